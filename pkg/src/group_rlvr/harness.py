"""Experiment orchestration behind the command-line interface.

Every command writes into one output directory. Metrics, timelines and SVGs
depend only on the configuration and seed; wall-clock data go to
``manifest.json``.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, dump_config
from .dynamics import PhaseTimeline, RegimeReport, classify_regime, detect_transitions, integrate_reduced
from .groups import GroupTable, group_from_name
from .policy import MlpConfig
from .svgplot import write_chart
from .tasks import new_position_space, sample_instance, write_corpus
from .train import ConfigError, EvalRecord, InstabilityError, iter_training, save_checkpoint

METRIC_KEYS = ("run", "iteration", "order", "success", "hit_rate", "q_mean", "r_mean")


class MetricsParseError(ValueError):
    pass


@dataclass
class RunManifest:
    config_hash: str
    version: str
    started: str
    finished: str = ""
    files: list[str] = field(default_factory=list)
    wall_seconds: dict[str, float] = field(default_factory=dict)
    status: str = "running"

    def write(self, out: Path) -> None:
        with open(out / "manifest.json", "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def build_context(cfg: ExperimentConfig) -> tuple[GroupTable, object, MlpConfig]:
    group = group_from_name(cfg.group)
    space = new_position_space(cfg.dpos, cfg.position_seed)
    return group, space, MlpConfig(group.order, cfg.C_B)


def run_tag(lengths) -> str:
    return "L" + "-".join(str(L) for L in lengths)


def _prepare(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_gen(cfg: ExperimentConfig, count: int, out) -> Path:
    """Write ``count`` instances; horizons cycle through the configured lengths."""
    if count < 0:
        raise ConfigError("count must be nonnegative")
    out = _prepare(out)
    group, space, _ = build_context(cfg)
    rng = np.random.default_rng(cfg.seed)
    lengths = cfg.resolved_lengths()
    instances = [sample_instance(group, space, lengths[i % len(lengths)], rng) for i in range(count)]
    header = {"group": cfg.group, "order": group.order, "dpos": cfg.dpos, "seed": cfg.seed,
              "lengths": lengths, "count": count, "config_hash": cfg.config_hash()}
    path = out / "instances.jsonl"
    write_corpus(path, instances, header)
    return path


def metrics_line(record: EvalRecord, run: str, order: int) -> str:
    rec = {"run": run, "iteration": record.iteration, "order": order,
           "success": {str(k): v for k, v in sorted(record.success.items())},
           "hit_rate": {str(k): v for k, v in sorted(record.hit_rate.items())},
           "q_mean": record.q_mean, "r_mean": record.r_mean}
    return json.dumps(rec, sort_keys=True)


def _plot_metrics(out: Path, records: dict[str, list[dict]], fixed: bool) -> list[str]:
    written = []
    for key, label in (("success", "success rate"), ("hit_rate", "attention hit rate")):
        series = {}
        for run, recs in records.items():
            lengths = sorted({int(L) for r in recs for L in r[key]})
            for L in lengths:
                name = f"L={L}" if fixed else f"{run} L={L}"
                series[name] = ([r["iteration"] for r in recs], [r[key][str(L)] for r in recs])
        path = out / f"{key}.svg"
        write_chart(path, series, title=label, xlabel="iteration", ylabel=label, ylim=(0.0, 1.0))
        written.append(path.name)
    return written


def cmd_train(cfg: ExperimentConfig, out, log=None) -> dict[str, list[dict]]:
    """Run every configured training run and emit metrics, checkpoints and plots.

    On numeric instability the outputs gathered so far are kept and the
    InstabilityError is re-raised.
    """
    out = _prepare(out)
    manifest = RunManifest(cfg.config_hash(), __version__, _now())
    (out / "config.ini").write_text(dump_config(cfg))
    files = ["config.ini"]
    if cfg.trainer == "reduced-dynamics":
        return _train_reduced(cfg, out, manifest, files)
    group, space, mlp = build_context(cfg)
    records: dict[str, list[dict]] = {}
    metrics_path = out / "metrics.jsonl"
    files.append(metrics_path.name)
    error = None
    with open(metrics_path, "w") as fh:
        for lengths in cfg.runs():
            tag = run_tag(lengths)
            records[tag] = []
            start = time.perf_counter()
            try:
                for item in iter_training(cfg.train_config(lengths), group, space, mlp):
                    if isinstance(item, EvalRecord):
                        line = metrics_line(item, tag, group.order)
                        fh.write(line + "\n")
                        fh.flush()
                        records[tag].append(json.loads(line))
                        if log:
                            log(f"{tag} it={item.iteration} success={item.success} hit={item.hit_rate}")
                    else:
                        ckpt = f"checkpoint_{tag}.json"
                        save_checkpoint(out / ckpt, item)
                        files.append(ckpt)
            except InstabilityError as exc:
                error = exc
            manifest.wall_seconds[tag] = round(time.perf_counter() - start, 3)
            if error:
                break
    files += _plot_metrics(out, records, cfg.length_mode == "fixed")
    manifest.files = files
    manifest.finished = _now()
    manifest.status = "instability" if error else "ok"
    manifest.write(out)
    if error:
        raise error
    return records


def _train_reduced(cfg: ExperimentConfig, out: Path, manifest: RunManifest, files: list[str]):
    group = group_from_name(cfg.group)
    dyn = cfg.dynamics
    timelines = {}
    error = None
    for lengths in cfg.runs():
        tag = run_tag(lengths)
        start = time.perf_counter()
        try:
            tl = integrate_reduced(dyn.q0, dyn.r0, dyn.lr, lengths, dyn.steps, group.order, cfg.dpos, cfg.C_B,
                                   dyn.mc_instances, cfg.seed, group)
        except InstabilityError as exc:
            error, tl = exc, exc.partial
        manifest.wall_seconds[tag] = round(time.perf_counter() - start, 3)
        timelines[tag] = tl
        if tl is not None:
            name = f"timeline_{tag}.csv"
            tl.write_csv(out / name)
            files.append(name)
        if error:
            break
    series = {f"{tag} L={L}": (list(tl.t), list(tl.rewards[L]))
              for tag, tl in timelines.items() if tl is not None for L in tl.lengths}
    write_chart(out / "reward.svg", series, title="exact reward", xlabel="iteration", ylabel="reward",
                ylim=(0.0, 1.0))
    files.append("reward.svg")
    manifest.files = files
    manifest.finished = _now()
    manifest.status = "instability" if error else "ok"
    manifest.write(out)
    if error:
        raise error
    return timelines


# ---------------------------------------------------------------------------
# analysis


def read_metrics(path) -> dict[str, list[dict]]:
    """Group metric records by run; malformed lines raise MetricsParseError naming the line."""
    runs: dict[str, list[dict]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricsParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            missing = [k for k in METRIC_KEYS if k not in rec] if isinstance(rec, dict) else list(METRIC_KEYS)
            if missing:
                raise MetricsParseError(f"{path}:{lineno}: missing keys {missing}")
            runs.setdefault(str(rec["run"]), []).append(rec)
    return runs


@dataclass
class RunAnalysis:
    run: str
    timeline: PhaseTimeline
    report: RegimeReport
    last_iteration: int

    def text(self) -> str:
        tl = self.timeline
        lines = [f"run {self.run} (through iteration {self.last_iteration})",
                 "  L      T_vis   T_mas   rise"]
        rises = tl.rises()
        for L, rise in zip(tl.lengths, rises):
            fmt = lambda v: "-" if v is None else str(v)  # noqa: E731
            lines.append(f"  {L:<6} {fmt(tl.t_vis[L]):<7} {fmt(tl.t_mas[L]):<7} {fmt(rise)}")
        for line in self.report.summary().splitlines():
            lines.append("  " + line)
        return "\n".join(lines)


def analyze_run(run: str, recs: list[dict], threshold: float = 10.0) -> RunAnalysis:
    recs = sorted(recs, key=lambda r: r["iteration"])
    t = np.array([r["iteration"] for r in recs])
    lengths = sorted({int(L) for r in recs for L in r["success"]})
    curves = {L: np.array([r["success"].get(str(L), math.nan) for r in recs]) for L in lengths}
    chance = 1.0 / recs[0]["order"]
    t_vis, t_mas, plats = detect_transitions(curves, chance=chance, t=t)
    tl = PhaseTimeline(lengths, t, np.array([r["q_mean"] for r in recs]), np.array([r["r_mean"] for r in recs]),
                       curves, t_vis, t_mas, plats, chance)
    report = classify_regime(lengths, t_vis, t_mas, plats, threshold=threshold, end=int(t[-1]))
    return RunAnalysis(run, tl, report, int(t[-1]))


def cmd_analyze(paths, threshold: float = 10.0) -> list[RunAnalysis]:
    out = []
    for path in paths:
        for run, recs in read_metrics(path).items():
            out.append(analyze_run(run, recs, threshold))
    return out


# ---------------------------------------------------------------------------
# ratio scan


def cmd_scan(cfg: ExperimentConfig, out) -> list[RegimeReport]:
    from .dynamics import scan_ratio

    dyn = cfg.dynamics
    if not dyn.ratios:
        raise ConfigError("empty ratio grid")
    group = group_from_name(cfg.group)
    cap = min(cfg.dpos - 1, group.order)
    if not 2 <= cfg.L1 < cfg.L_max <= cap:
        raise ConfigError(f"scan endpoints L1={cfg.L1}, L_max={cfg.L_max} need 2 <= L1 < L_max <= {cap}")
    out = _prepare(out)
    manifest = RunManifest(cfg.config_hash(), __version__, _now())
    start = time.perf_counter()
    reports, timelines = scan_ratio(dyn.ratios, dyn.lr, dyn.steps, cfg.L1, cfg.L_max, group.order, cfg.dpos,
                                    cfg.C_B, dyn.mc_instances, cfg.seed, dyn.threshold, group=group, q0=dyn.q0,
                                    r0=dyn.r0)
    files = ["scan.csv", "scan.txt", "plateau.svg"]
    with open(out / "scan.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["R", "horizons", "max_plateau", "max_rise", "label"])
        for rep in reports:
            plats = [p for p in rep.plateaus if p is not None]
            rises = [x for x in rep.rises if x is not None]
            w.writerow([rep.ratio, " ".join(map(str, rep.lengths)), max(plats) if plats else "",
                        max(rises) if rises else "", rep.label or ""])
    with open(out / "scan.txt", "w") as fh:
        fh.write("\n\n".join(rep.summary() for rep in reports) + "\n")
    for rep, tl in zip(reports, timelines):
        name = f"timeline_R{rep.ratio:g}.csv"
        tl.write_csv(out / name)
        files.append(name)
    pts = [(rep.ratio, max([p for p in rep.plateaus if p is not None], default=0)) for rep in reports]
    write_chart(out / "plateau.svg", {"max plateau": ([p[0] for p in pts], [p[1] for p in pts])},
                title="longest plateau versus difficulty ratio", xlabel="R", ylabel="iterations")
    manifest.files = files
    manifest.wall_seconds["scan"] = round(time.perf_counter() - start, 3)
    manifest.finished = _now()
    manifest.status = "ok"
    manifest.write(out)
    return reports


def thread_cap() -> int | None:
    raw = os.environ.get("GROUP_RLVR_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GROUP_RLVR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("GROUP_RLVR_THREADS must be a positive integer")
    return n
