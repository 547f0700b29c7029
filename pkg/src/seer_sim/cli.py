"""seer-sim command line: generate, train, evaluate, compare, run, sweep, latency, report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from . import harness as H
from . import predictor as P
from . import report as R
from .mitigator import DiagnosisMode
from .predictor import ModelFormatError, TrainingDiverged
from .scenario import (ConfigError, Dataset, ScenarioConfig, generate, hyperparams, load_config,
                       offset_episode, policy)
from .sim import AnnotationError, SimulationError
from .topology import TopologyError
from .trace import MalformedTrace, MetricKind, TraceFormatError, read_events, read_trace, trace_paths, \
    write_events, write_trace

# (exception type, category, exit code); first match wins, so subclasses go first
ERROR_TABLE = (
    (ConfigError, "config-error", 3),
    (yaml.YAMLError, "config-error", 3),
    (TopologyError, "topology-error", 4),
    (TraceFormatError, "trace-format-error", 5),
    (MalformedTrace, "trace-format-error", 5),
    (ModelFormatError, "model-format-error", 6),
    (AnnotationError, "annotation-error", 7),
    (TrainingDiverged, "training-diverged", 8),
    (OSError, "io-error", 9),
    (SimulationError, "simulation-error", 10),
    (ValueError, "config-error", 3),
)


def categorize(exc: BaseException) -> tuple[str, int]:
    for kind, cat, code in ERROR_TABLE:
        if isinstance(exc, kind):
            return cat, code
    return "internal-error", 1


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return v


def _sizes(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must be comma separated integers, got {text!r}") from None
    if not out or any(n < 1 for n in out):
        raise argparse.ArgumentTypeError("sizes must be positive")
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="scenario YAML (first line '# seer-sim config v1')")
    p.add_argument("--seed", required=True, type=_seed, help="master seed, 0 <= seed < 2^64")
    p.add_argument("--out", required=True, type=Path, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seer-sim", description="Tail-latency violation prediction on a simulated cluster.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate episodes and write train/test traces and events")
    _common(p)

    p = sub.add_parser("train", help="train the queue-depth model and write model_v1.txt")
    _common(p)
    p.add_argument("--metric", default="QueueDepth", help="input metric (QueueDepth, LatencyRate, Latency, CpuUtil)")

    p = sub.add_parser("evaluate", help="score a model on the held-out episodes")
    _common(p)
    p.add_argument("--model", type=Path, help="model file from 'train' (default: train in-process)")
    p.add_argument("--data", type=Path, help="directory written by 'generate' (default: regenerate)")

    p = sub.add_parser("compare", help="one model per input metric, same data")
    _common(p)

    p = sub.add_parser("run", help="closed-loop detection and mitigation over held-out episodes")
    _common(p)
    p.add_argument("--mitigate", choices=("on", "off"), default="on")
    p.add_argument("--diagnosis", choices=("counters", "probe"), default=None,
                   help="resource diagnosis mode (default: the config's)")
    p.add_argument("--model", type=Path, help="model file from 'train' (default: train in-process)")

    p = sub.add_parser("sweep", help="accuracy versus number of services")
    _common(p)
    p.add_argument("--sizes", type=_sizes, default=[10, 20, 50])

    p = sub.add_parser("latency", help="per-snapshot inference wall time CDFs")
    _common(p)
    p.add_argument("--sizes", type=_sizes, default=[10, 20, 50, 200])
    p.add_argument("--snapshots", type=int, default=2000)

    p = sub.add_parser("report", help="metric comparison, diagnosis accuracy and closed loop on/off in one go")
    _common(p)
    return ap


# ---------------------------------------------------------------- commands
def _dataset(cfg: ScenarioConfig, seed: int) -> Dataset:
    return generate(cfg, seed)


def _model(args, cfg: ScenarioConfig, ds: Dataset | None = None):
    if getattr(args, "model", None):
        return P.load(args.model), None
    ds = ds or _dataset(cfg, args.seed)
    model, _, prep = H.fit(ds, MetricKind.QUEUE_DEPTH, hyperparams(cfg))
    return model, prep


def cmd_generate(args, cfg: ScenarioConfig) -> list[Path]:
    ds = _dataset(cfg, args.seed)
    data = args.out / "data"
    data.mkdir(parents=True, exist_ok=True)
    paths = []
    for split in ("train", "test"):
        recs, evs = ds.split_streams(split)
        tp, ep = trace_paths(data, split)
        write_trace(tp, recs)
        write_events(ep, evs)
        paths += [tp, ep]
    rows = []
    for ep in ds.episodes:
        inj = ep.injection
        rows.append((ep.index, "train" if ep.index < ds.n_train else "test", ep.seed, inj.server,
                     inj.resource, inj.intensity, inj.start_tick, inj.end_tick, len(ep.events), sum(ep.drops)))
    paths.append(R.write_csv(args.out / f"episodes_{R.FORMAT_VERSION}.csv",
                             ("episode", "split", "seed", "server", "resource", "intensity", "start_tick",
                              "end_tick", "violations", "drops"), rows))
    paths.append(R.write_csv(args.out / f"qos_{R.FORMAT_VERSION}.csv",
                             ("target_us", "window", "persistence", "episode_ticks", "n_train", "n_test"),
                             [(ds.qos.target, ds.qos.window, ds.qos.persistence, cfg.episode_ticks,
                               len(ds.train), len(ds.test))]))
    return paths


def cmd_train(args, cfg: ScenarioConfig) -> list[Path]:
    ds = _dataset(cfg, args.seed)
    model, curve, _ = H.fit(ds, MetricKind.parse(args.metric), hyperparams(cfg))
    args.out.mkdir(parents=True, exist_ok=True)
    mpath = args.out / f"model_{R.FORMAT_VERSION}.txt"
    P.save(model, mpath)
    lpath = R.write_dat(args.out / f"loss_{R.FORMAT_VERSION}.dat", ("epoch", "loss"),
                        [(i, float(v)) for i, v in enumerate(curve)], "mean training loss per epoch")
    return [mpath, lpath]


def _test_from_files(data: Path, cfg: ScenarioConfig):
    tp, ep = trace_paths(data, "test")
    recs = list(read_trace(tp))
    evs = read_events(ep)
    n_ticks = 0
    if recs:
        first = min(r.tick for r in recs) // cfg.episode_ticks
        last = max(r.tick for r in recs) // cfg.episode_ticks
        n_ticks = (last - first + 1) * cfg.episode_ticks
    return recs, evs, n_ticks


def cmd_evaluate(args, cfg: ScenarioConfig) -> list[Path]:
    hyper = hyperparams(cfg)
    if args.model and args.data:
        model = P.load(args.model)
        recs, evs, n_ticks = _test_from_files(args.data, cfg)
    else:
        ds = _dataset(cfg, args.seed)
        model, prep = _model(args, cfg, ds)
        if prep is not None:
            recs, evs, n_ticks = prep.test_records, prep.test_events, prep.test_ticks
        else:
            recs, evs = [], []
            for ep in ds.test:
                r, e = offset_episode(ep, ep.index * cfg.episode_ticks)
                recs += r
                evs += e
            n_ticks = len(ds.test) * cfg.episode_ticks
    alerts = H.stream_alerts(model, recs, hyper.fire_threshold)
    m = H.evaluate(alerts, evs, H.MatchRule(model.horizon), n_ticks)
    paths = R.write_evaluation(args.out, m, model.input_metric.value)
    paths.append(R.write_csv(args.out / f"alerts_{R.FORMAT_VERSION}.csv", ("tick", "service", "score"),
                             [(a.tick, a.service, float(a.score)) for a in alerts]))
    return paths


def cmd_compare(args, cfg: ScenarioConfig) -> list[Path]:
    hyper = hyperparams(cfg)
    rows = H.compare_metrics(_dataset(cfg, args.seed), hyper, hyper.fire_threshold)
    return R.write_compare(args.out, rows)


def _mode(args, cfg: ScenarioConfig) -> DiagnosisMode:
    return DiagnosisMode.parse(getattr(args, "diagnosis", None) or cfg.diagnosis)


def cmd_run(args, cfg: ScenarioConfig) -> list[Path]:
    ds = _dataset(cfg, args.seed)
    model, _ = _model(args, cfg, ds)
    suite = H.closed_loop_suite(ds, model, policy(cfg), _mode(args, cfg), args.mitigate == "on",
                                hyperparams(cfg).fire_threshold)
    return R.write_closed_loop(args.out, suite)


def cmd_sweep(args, cfg: ScenarioConfig) -> list[Path]:
    sizes = sorted(args.sizes)
    hyper = hyperparams(cfg)
    return R.write_sweep(args.out, H.scalability_sweep(cfg, sizes, args.seed, hyper, hyper.fire_threshold))


def cmd_latency(args, cfg: ScenarioConfig) -> list[Path]:
    hyper = hyperparams(cfg)
    cdfs = []
    for n in args.sizes:
        model = P.init(n, hyper, horizon=cfg.horizon)
        cdfs.append(H.latency_cdf(model, args.snapshots, seed=args.seed))
    return R.write_latency(args.out, cdfs)


def cmd_report(args, cfg: ScenarioConfig) -> list[Path]:
    hyper = hyperparams(cfg)
    ds = _dataset(cfg, args.seed)
    rows = H.compare_metrics(ds, hyper, hyper.fire_threshold)
    paths = R.write_compare(args.out, rows)
    diag = {m.value: H.diagnosis_suite(ds, m) for m in (DiagnosisMode.COUNTERS, DiagnosisMode.PROBE)}
    paths += R.write_diagnosis(args.out, diag)
    model, _, _ = H.fit(ds, MetricKind.QUEUE_DEPTH, hyper)
    pol = policy(cfg)
    mode = _mode(args, cfg)
    suites = [H.closed_loop_suite(ds, model, pol, mode, on, hyper.fire_threshold) for on in (False, True)]
    for s in suites:
        paths += R.write_closed_loop(args.out, s)
    lines = [f"# seer-sim report {R.FORMAT_VERSION}", f"config {cfg.name}", f"seed {args.seed}",
             f"services {ds.graph.n}", f"episodes {len(ds.episodes)} train {len(ds.train)} test {len(ds.test)}",
             f"qos_target_us {ds.qos.target!r}"]
    for r in rows:
        lines.append(f"detection {r.metric.value} {r.metrics.detection_accuracy!r} "
                     f"culprit {r.metrics.culprit_accuracy!r} fp_per_1000 {r.metrics.false_positive_rate!r}")
    for k, v in diag.items():
        lines.append(f"diagnosis_accuracy {k} {H.diagnosis_accuracy(v)!r} over {len(v)}")
    for s in suites:
        counts = s.outcome_counts()
        lines.append(f"closed_loop {'on' if s.mitigate_on else 'off'} success {s.success_rate()!r} "
                     + " ".join(f"{k}={v}" for k, v in counts.items()))
    summary = args.out / f"report_{R.FORMAT_VERSION}.txt"
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths + [summary]


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare,
            "run": cmd_run, "sweep": cmd_sweep, "latency": cmd_latency, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        paths = COMMANDS[args.command](args, cfg)
    except KeyboardInterrupt:
        print("seer-sim: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure gets a categorized line
        cat, code = categorize(exc)
        print(f"seer-sim: error[{cat}]: {exc}", file=sys.stderr)
        return code
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
