"""Experiment configuration: sectioned ``key = value`` files, presets and a stable hash.

Example file::

    [experiment]
    group = Z96
    dpos = 64
    C_B = 5
    trainer = rl

    [lengths]
    mode = mixed
    values = 5, 15, 45

    [train]
    lr = 20
    iterations = 500
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .groups import GroupError, MAX_ORDER, group_from_name
from .train import ConfigError, TrainConfig, horizon_set

LENGTH_MODES = ("fixed", "mixed", "ratio")
TRAINERS = ("rl", "sft", "reduced-dynamics")


@dataclass
class DynamicsConfig:
    lr: float = 500.0
    steps: int = 8000
    q0: float = 0.05
    r0: float = 0.0
    mc_instances: int = 32
    threshold: float = 10.0
    ratios: tuple[float, ...] = (2.0, 3.0, 5.0, 7.0, 9.0)


@dataclass
class ExperimentConfig:
    group: str = "Z96"
    dpos: int = 64
    C_B: float = 5.0
    parametrization: str = "full"
    trainer: str = "rl"
    length_mode: str = "fixed"
    lengths: tuple[int, ...] = (5,)
    ratio: float | None = None
    L1: int = 5
    L_max: int = 45
    seed: int = 0
    position_seed: int = 0
    out: str = "runs/default"
    train: TrainConfig = field(default_factory=TrainConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)

    def resolved_lengths(self) -> list[int]:
        if self.length_mode == "ratio":
            if self.ratio is None:
                raise ConfigError("ratio mode needs a ratio")
            return horizon_set(self.ratio, self.L1, self.L_max)
        return sorted(set(int(L) for L in self.lengths))

    def runs(self) -> list[tuple[int, ...]]:
        """Length sets of the individual training runs: one per horizon in fixed mode."""
        Ls = self.resolved_lengths()
        return [(L,) for L in Ls] if self.length_mode == "fixed" else [tuple(Ls)]

    def train_config(self, lengths) -> TrainConfig:
        return replace(self.train, lengths=tuple(lengths), seed=self.seed,
                       parametrization=self.parametrization,
                       trainer="sft" if self.trainer == "sft" else "rl")

    def validate(self) -> "ExperimentConfig":
        if self.trainer not in TRAINERS:
            raise ConfigError(f"unknown trainer {self.trainer!r}")
        if self.length_mode not in LENGTH_MODES:
            raise ConfigError(f"unknown length mode {self.length_mode!r}")
        if self.parametrization not in ("full", "reduced"):
            raise ConfigError(f"unknown parametrization {self.parametrization!r}")
        if self.dpos < 3:
            raise ConfigError("need at least 3 position identifiers")
        if self.C_B <= 0:
            raise ConfigError("C_B must be positive")
        try:
            order = group_order(self.group)
        except GroupError as exc:
            raise ConfigError(str(exc)) from exc
        Ls = self.resolved_lengths()
        if not Ls:
            raise ConfigError("empty length set")
        cap = min(self.dpos - 1, order)
        bad = [L for L in Ls if not 2 <= L <= cap]
        if bad:
            raise ConfigError(f"horizons {bad} outside [2, {cap}]")
        if self.trainer == "reduced-dynamics" and not self.dynamics.ratios and self.length_mode == "ratio":
            raise ConfigError("empty ratio grid")
        return self

    def semantic_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")
        d["train"].pop("lengths")
        d["train"].pop("seed")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def group_order(name: str) -> int:
    name = name.strip()
    if name[:1] in ("Z", "C") and name[1:].isdigit():
        n = int(name[1:])
        if not 1 <= n <= MAX_ORDER:
            raise GroupError(f"order {n} outside [1, {MAX_ORDER}]")
        return n
    return group_from_name(name).order


def _parse_tuple(text: str, kind=int) -> tuple:
    parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
    return tuple(kind(p) for p in parts)


def _coerce(cls, values: dict, section: str):
    kinds = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, raw in values.items():
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        kind = str(kinds[key])
        try:
            if kind.startswith("tuple[int"):
                out[key] = _parse_tuple(raw, int)
            elif kind.startswith("tuple[float"):
                out[key] = _parse_tuple(raw, float)
            elif kind.startswith("float"):
                out[key] = None if raw.lower() == "none" else float(raw)
            elif kind == "int":
                out[key] = int(raw)
            else:
                out[key] = raw
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    return out


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse config text on top of ``base`` (defaults when omitted)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = base or ExperimentConfig()
    known = {"experiment", "lengths", "train", "dynamics"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"unknown sections {sorted(extra)}")
    top = {}
    if parser.has_section("experiment"):
        top.update(parser["experiment"])
    if parser.has_section("lengths"):
        for key, value in parser["lengths"].items():
            top["length_mode" if key == "mode" else "lengths" if key == "values" else key] = value
    updates = _coerce(ExperimentConfig, top, "experiment")
    for key in ("train", "dynamics"):
        if key in updates:
            raise ConfigError(f"{key} must be its own section")
    if parser.has_section("train"):
        train_vals = _coerce(TrainConfig, dict(parser["train"]), "train")
        updates["train"] = replace(cfg.train, **train_vals)
    if parser.has_section("dynamics"):
        updates["dynamics"] = replace(cfg.dynamics, **_coerce(DynamicsConfig, dict(parser["dynamics"]), "dynamics"))
    return replace(cfg, **updates).validate()


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)


def dump_config(cfg: ExperimentConfig) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        return str(v)

    exp = {k: v for k, v in asdict(cfg).items() if k not in ("train", "dynamics", "lengths", "length_mode", "ratio",
                                                               "L1", "L_max")}
    sections = {
        "experiment": exp,
        "lengths": {"mode": cfg.length_mode, "values": cfg.lengths, "ratio": cfg.ratio, "L1": cfg.L1,
                    "L_max": cfg.L_max},
        "train": {k: v for k, v in asdict(cfg.train).items() if k not in ("lengths", "seed", "parametrization",
                                                                          "trainer")},
        "dynamics": asdict(cfg.dynamics),
    }
    lines = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {fmt(v)}" for k, v in body.items())
        lines.append("")
    return "\n".join(lines)


_PROTOCOL = dict(group="Z96", dpos=64, C_B=5.0, parametrization="full", trainer="rl")
_PROTOCOL_TRAIN = TrainConfig(lr=20.0, batch_size=512, iterations=500, ema_momentum=0.95, entropy_coef=1e-3,
                              eval_every=20, eval_batches=4, eval_batch_size=512)

PRESETS = {
    "fig4": ExperimentConfig(**_PROTOCOL, length_mode="fixed", lengths=(5, 15, 45), out="runs/fig4",
                             train=_PROTOCOL_TRAIN),
    "fig5a": ExperimentConfig(**_PROTOCOL, length_mode="mixed", lengths=(5, 15, 45), out="runs/fig5a",
                              train=replace(_PROTOCOL_TRAIN, iterations=1500, eval_every=50)),
    "fig5b": ExperimentConfig(**_PROTOCOL, length_mode="mixed", lengths=(5, 35), out="runs/fig5b",
                              train=replace(_PROTOCOL_TRAIN, iterations=1500, eval_every=50)),
}


def preset(name: str) -> ExperimentConfig:
    try:
        return replace(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
