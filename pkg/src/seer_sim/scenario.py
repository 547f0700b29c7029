"""Scenario configs and episode generation (one simulator run per injected episode)."""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .mitigator import MitigationPolicy
from .predictor import Hyperparams
from .qos import QosSpec, detect_violations, window_p99
from .sim import (AnnotationError, ContentionEvent, SimConfig, Simulator, _derive_seed,
                  annotate_culprit, build)
from .topology import ServiceGraph, graph_from_config
from .trace import RESOURCES, ResourceKind, TraceRecord, ViolationEvent

CONFIG_HEADER = "# seer-sim config v1"


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    topology: dict = field(default_factory=lambda: {"shape": "social", "n_services": 20})
    sim: SimConfig = field(default_factory=SimConfig)
    episodes: int = 50
    episode_ticks: int = 240
    warmup_ticks: int = 60
    inject_jitter: int = 20
    duration: tuple[int, int] = (80, 120)
    intensity: tuple[float, float] = (1.85, 2.0)
    benign_fraction: float = 0.15
    benign_intensity: tuple[float, float] = (0.2, 0.8)
    horizon: int = 50
    train_fraction: float = 0.7
    qos_target: float | None = None
    qos_target_factor: float = 1.1
    qos_window: int = 100
    qos_persistence: int = 2
    calibration_ticks: int = 2000
    culprit_factor: float = 3.0
    # closed-loop runs keep the contention on until the end of the run
    closed_loop_ticks: int = 400
    diagnosis: str = "counters"
    name: str = "scenario"
    predictor: dict = field(default_factory=dict)     # Hyperparams overrides
    mitigation: dict = field(default_factory=dict)    # MitigationPolicy overrides

    def with_n(self, n: int) -> "ScenarioConfig":
        topo = dict(self.topology)
        topo["n_services"] = n
        return replace(self, topology=topo, name=f"{self.name}-n{n}")


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    first = text.split("\n", 1)[0].strip()
    if first != CONFIG_HEADER:
        raise ConfigError(f"{path}: first line must be {CONFIG_HEADER!r}, got {first!r}")
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, default_name=path.stem)


def config_from_dict(raw: dict, default_name: str = "scenario") -> ScenarioConfig:
    raw = dict(raw)
    topo = raw.pop("topology", None) or {"shape": "social", "n_services": 20}
    sim_raw = raw.pop("sim", {}) or {}
    bad = set(sim_raw) - set(SimConfig.__dataclass_fields__)
    if bad:
        raise ConfigError(f"unknown sim keys: {sorted(bad)}")
    sim_cfg = SimConfig.from_dict(sim_raw)
    predictor = dict(raw.pop("predictor", {}) or {})
    mitigation = dict(raw.pop("mitigation", {}) or {})
    scen = dict(raw.pop("scenario", {}) or {})
    qos = raw.pop("qos", {}) or {}
    if raw:
        raise ConfigError(f"unknown top-level config keys: {sorted(raw)}")
    mapping = {"target": "qos_target", "target_factor": "qos_target_factor",
               "window": "qos_window", "persistence": "qos_persistence"}
    for k, v in qos.items():
        if k not in mapping:
            raise ConfigError(f"unknown qos key {k!r}")
        scen[mapping[k]] = v
    fields = ScenarioConfig.__dataclass_fields__
    unknown = set(scen) - set(fields)
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    for k in ("duration", "intensity", "benign_intensity"):
        if k in scen:
            scen[k] = tuple(scen[k])
    scen.setdefault("name", default_name)
    if scen.get("diagnosis", "counters") not in ("counters", "probe"):
        raise ConfigError("diagnosis must be 'counters' or 'probe'")
    try:
        out = ScenarioConfig(topology=topo, sim=sim_cfg, predictor=predictor, mitigation=mitigation, **scen)
        hyperparams(out)
        policy(out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return out


def hyperparams(cfg: ScenarioConfig) -> Hyperparams:
    bad = set(cfg.predictor) - set(Hyperparams.__dataclass_fields__)
    if bad:
        raise ConfigError(f"unknown predictor keys: {sorted(bad)}")
    return Hyperparams(**cfg.predictor)


def policy(cfg: ScenarioConfig) -> MitigationPolicy:
    raw = dict(cfg.mitigation)
    bad = set(raw) - set(MitigationPolicy.__dataclass_fields__)
    if bad:
        raise ConfigError(f"unknown mitigation keys: {sorted(bad)}")
    if "use_partitioning" in raw:
        base = dict(MitigationPolicy().use_partitioning)
        for k, v in raw["use_partitioning"].items():
            base[ResourceKind.parse(k)] = bool(v)
        raw["use_partitioning"] = base
    return MitigationPolicy(**raw)


def make_graph(cfg: ScenarioConfig, seed: int) -> ServiceGraph:
    return graph_from_config(cfg.topology, cfg.sim.arrival_rate, seed)


def calibrate_qos(cfg: ScenarioConfig, graph: ServiceGraph, seed: int) -> QosSpec:
    """Explicit target if configured, else factor x the worst nominal window p99."""
    if cfg.qos_target is not None:
        return QosSpec(float(cfg.qos_target), cfg.qos_window, cfg.qos_persistence)
    sim = Simulator(graph, cfg.sim, _derive_seed(seed, "calibration"))
    sim.run_until(cfg.calibration_ticks, sample=False)
    _, p99 = window_p99(sim.e2e, cfg.qos_window)
    if p99.size == 0:
        raise ConfigError("calibration run produced no complete QoS windows (zero arrival rate?)")
    return QosSpec(float(cfg.qos_target_factor * p99.max()), cfg.qos_window, cfg.qos_persistence)


def injection_candidates(graph: ServiceGraph) -> list[int]:
    """Services whose saturation reaches end-to-end latency: on the blocking path, with no
    blocking callees of their own (callers hold large pools and mostly wait)."""
    reach = graph.blocking_reachable()
    return [m for m in sorted(reach)
            if not any(e.blocking for e in graph.children(m))] or sorted(reach)


def _is_benign(cfg: ScenarioConfig, seed: int, episode: int) -> bool:
    return random.Random(_derive_seed(seed, "inject", episode)).random() < cfg.benign_fraction


def _stratified_victim(cfg: ScenarioConfig, graph: ServiceGraph, seed: int, episode: int) -> int:
    """Harmful injections walk a fresh shuffle of the candidates each cycle, so every
    candidate is hit once before any is hit twice (small datasets cover the graph)."""
    pool = injection_candidates(graph)
    k = sum(not _is_benign(cfg, seed, e) for e in range(episode))
    cycle, pos = divmod(k, len(pool))
    order = list(pool)
    random.Random(_derive_seed(seed, "victims", cycle)).shuffle(order)
    return order[pos]


def draw_injection(cfg: ScenarioConfig, graph: ServiceGraph, seed: int, episode: int,
                   sustained: bool = False, length: int | None = None) -> ContentionEvent:
    rng = random.Random(_derive_seed(seed, "inject", episode))
    benign = rng.random() < cfg.benign_fraction
    if benign:
        victim = rng.choice(range(graph.n))
    else:
        victim = _stratified_victim(cfg, graph, seed, episode)
    node = graph.nodes[victim]
    resource = rng.choice([r for r in RESOURCES if node.demand[r] > 0])
    lo, hi = cfg.benign_intensity if benign else cfg.intensity
    intensity = round(rng.uniform(lo, hi), 6)
    start = cfg.warmup_ticks + rng.randint(0, cfg.inject_jitter)
    dur = rng.randint(*cfg.duration)
    total = length if length is not None else cfg.episode_ticks
    end = total if sustained else min(start + dur, total)
    return ContentionEvent(node.server, ResourceKind(resource), intensity, start, end)


@dataclass
class Episode:
    index: int
    seed: int
    injection: ContentionEvent
    records: list[TraceRecord]
    events: list[ViolationEvent]
    e2e: list[tuple[int, float]]
    drops: list[int]


def run_episode(cfg: ScenarioConfig, graph: ServiceGraph, qos: QosSpec, seed: int, index: int,
                injection: ContentionEvent | None = None, inject: bool = True) -> Episode:
    ep_seed = _derive_seed(seed, "episode", index)
    sim = build(graph, cfg.sim, ep_seed)
    if injection is None:
        injection = draw_injection(cfg, graph, seed, index)
    if inject:
        sim.inject(injection)
    records, _ = sim.run_until(cfg.episode_ticks)
    events = annotate_episode(sim, qos, cfg)
    return Episode(index, ep_seed, injection, records, events, sim.e2e, sim.drops_per_tick)


def annotate_episode(sim: Simulator, qos: QosSpec, cfg: ScenarioConfig) -> list[ViolationEvent]:
    out = []
    for v in detect_violations(sim.e2e, qos):
        culprit, resource = annotate_culprit(sim, v.onset_tick, factor=cfg.culprit_factor)
        out.append(ViolationEvent(v.onset_tick, v.end_tick, culprit, resource))
    return out


def offset_episode(ep: Episode, offset: int) -> tuple[list[TraceRecord], list[ViolationEvent]]:
    recs = [replace(r, tick=r.tick + offset) for r in ep.records]
    evs = [replace(e, onset_tick=e.onset_tick + offset, end_tick=e.end_tick + offset) for e in ep.events]
    return recs, evs


@dataclass
class Dataset:
    cfg: ScenarioConfig
    graph: ServiceGraph
    qos: QosSpec
    seed: int
    episodes: list[Episode]
    n_train: int

    @property
    def train(self) -> list[Episode]:
        return self.episodes[:self.n_train]

    @property
    def test(self) -> list[Episode]:
        return self.episodes[self.n_train:]

    def split_streams(self, which: str) -> tuple[list[TraceRecord], list[ViolationEvent]]:
        eps = self.train if which == "train" else self.test
        recs, evs = [], []
        for ep in eps:
            r, e = offset_episode(ep, ep.index * self.cfg.episode_ticks)
            recs.extend(r)
            evs.extend(e)
        return recs, evs


def split_counts(episodes: int, train_fraction: float) -> tuple[int, int]:
    n_train = int(round(episodes * train_fraction))
    return n_train, episodes - n_train


def generate(cfg: ScenarioConfig, seed: int, progress=None) -> Dataset:
    graph = make_graph(cfg, seed)
    qos = calibrate_qos(cfg, graph, seed)
    n_train, _ = split_counts(cfg.episodes, cfg.train_fraction)
    eps = []
    for i in range(cfg.episodes):
        eps.append(run_episode(cfg, graph, qos, seed, i))
        if progress:
            progress(i)
    return Dataset(cfg, graph, qos, seed, eps, n_train)
