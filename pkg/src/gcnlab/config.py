"""Run configuration and its flat ``section.key=value`` text format.

Every key is listed in ``FIELDS``; unknown keys are rejected.  Lines may be
blank or start with ``#``.  ``dump_config`` writes every key in ``FIELDS``
order, so ``parse_config(dump_config(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from pathlib import Path

from .mcts import MctsConfig
from .sampling import MixtureSpec
from .seqspace import SpaceConfig

VARIANTS = ("gcn", "gan", "gan_scheduler", "maligan", "exp_d")
QHAT_KINDS = ("p", "nucleus", "mcts")
TARGET_KINDS = ("dirichlet", "hidden_generator", "explicit")
INIT_KINDS = ("uniform", "random", "target", "explicit")
DEFAULT_TEMPS = (0.5, 0.7, 1.0, 1.3, 1.6)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LinearSchedule:
    start: float
    end: float

    def __str__(self):
        return f"linear({self.start!r},{self.end!r})"


def parse_schedule(text: str) -> LinearSchedule | None:
    text = text.strip()
    if text == "none":
        return None
    m = re.fullmatch(r"linear\(\s*([^,\s]+)\s*,\s*([^,\s)]+)\s*\)", text)
    if not m:
        raise ConfigError(f"scheduler must be 'none' or 'linear(start,end)', got {text!r}")
    return LinearSchedule(float(m.group(1)), float(m.group(2)))


@dataclass(frozen=True)
class TrainConfig:
    vocab_size: int = 2
    max_len: int = 2
    num_contexts: int = 0

    target_kind: str = "dirichlet"
    target_alpha: float = 1.0
    target_probs: tuple[float, ...] = ()
    target_scale: float = 2.0
    target_seed: int | None = None

    init_kind: str = "uniform"
    init_scale: float = 1.0
    init_probs: tuple[float, ...] = ()

    variant: str = "gcn"
    qhat: str = "p"
    batch_size: int = 64
    iters: int = 100
    lr_gen: float = 0.5
    lr_disc: float = 0.05
    disc_steps: int = 1
    seed: int = 0
    scheduler: LinearSchedule | None = None
    maligan_clip: float = 10.0
    divergence_factor: float = 10.0

    epsilon: float = 0.1
    sigma: float = 0.1

    mcts_c_puct: float = 1.0
    mcts_rounds: int = 50
    mcts_sigma: float = 0.1
    mcts_mode: str = "auto"

    exact_steps: int = 50
    exact_stop_kl: float = 1e-12

    curve_temps: tuple[float, ...] = DEFAULT_TEMPS
    curve_samples: int = 64
    curve_refs: int = 256
    curve_max_n: int = 4

    def __post_init__(self):
        self.validate()

    @property
    def space(self) -> SpaceConfig:
        return SpaceConfig.make(self.vocab_size, self.max_len, self.num_contexts)

    @property
    def mixture(self) -> MixtureSpec | None:
        if self.qhat == "p":
            return None
        return MixtureSpec(self.epsilon, self.qhat, self.sigma)

    @property
    def mcts(self) -> MctsConfig:
        mode = self.mcts_mode
        if mode == "auto":
            mode = "conditional" if self.num_contexts > 0 else "unconditional"
        return MctsConfig(self.mcts_c_puct, self.mcts_rounds, self.mcts_sigma, mode)

    @property
    def effective_target_seed(self) -> int:
        return self.seed if self.target_seed is None else self.target_seed

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.variant in VARIANTS, f"trainer.variant must be one of {VARIANTS}")
        need(self.qhat in QHAT_KINDS, f"trainer.qhat must be one of {QHAT_KINDS}")
        need(self.target_kind in TARGET_KINDS, f"target.kind must be one of {TARGET_KINDS}")
        need(self.init_kind in INIT_KINDS, f"init.kind must be one of {INIT_KINDS}")
        need(self.mcts_mode in ("auto", "conditional", "unconditional"), "bad mcts.mode")
        if self.variant == "gan_scheduler":
            need(self.scheduler is not None, "variant gan_scheduler needs a scheduler")
        if self.variant == "gcn":
            need(self.scheduler is None, "variant gcn is normalized and takes no scheduler")
        need(self.batch_size >= 1, "trainer.batch_size must be >= 1")
        need(self.iters >= 0, "trainer.iters must be >= 0")
        need(self.disc_steps >= 1, "trainer.disc_steps must be >= 1")
        need(self.lr_gen > 0 and self.lr_disc > 0, "learning rates must be positive")
        need(self.target_alpha > 0, "target.alpha must be positive")
        need(self.curve_samples >= 2, "curves.n_samples must be >= 2")
        need(all(t > 0 for t in self.curve_temps), "curve temperatures must be positive")
        need(list(self.curve_temps) == sorted(self.curve_temps), "curve temperatures must be ascending")
        try:
            self.space.check_budget()
            MixtureSpec(self.epsilon, "nucleus", self.sigma)
            self.mcts
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    return tuple(float(t) for t in text.split(",")) if text else ()


def _opt_int(text: str) -> int | None:
    return None if text.strip() == "none" else int(text)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# dotted key -> (field name, parser)
FIELDS: dict[str, tuple[str, callable]] = {
    "space.vocab_size": ("vocab_size", int),
    "space.max_len": ("max_len", int),
    "space.num_contexts": ("num_contexts", int),
    "target.kind": ("target_kind", str),
    "target.alpha": ("target_alpha", float),
    "target.probs": ("target_probs", _floats),
    "target.scale": ("target_scale", float),
    "target.seed": ("target_seed", _opt_int),
    "init.kind": ("init_kind", str),
    "init.scale": ("init_scale", float),
    "init.probs": ("init_probs", _floats),
    "trainer.variant": ("variant", str),
    "trainer.qhat": ("qhat", str),
    "trainer.batch_size": ("batch_size", int),
    "trainer.iters": ("iters", int),
    "trainer.lr_gen": ("lr_gen", float),
    "trainer.lr_disc": ("lr_disc", float),
    "trainer.disc_steps": ("disc_steps", int),
    "trainer.seed": ("seed", int),
    "trainer.scheduler": ("scheduler", parse_schedule),
    "trainer.maligan_clip": ("maligan_clip", float),
    "trainer.divergence_factor": ("divergence_factor", float),
    "mixture.epsilon": ("epsilon", float),
    "mixture.sigma": ("sigma", float),
    "mcts.c_puct": ("mcts_c_puct", float),
    "mcts.rounds": ("mcts_rounds", int),
    "mcts.sigma": ("mcts_sigma", float),
    "mcts.mode": ("mcts_mode", str),
    "exact.steps": ("exact_steps", int),
    "exact.stop_kl": ("exact_stop_kl", float),
    "curves.temps": ("curve_temps", _floats),
    "curves.n_samples": ("curve_samples", int),
    "curves.n_refs": ("curve_refs", int),
    "curves.max_n": ("curve_max_n", int),
}


def parse_config(text: str, overrides: dict[str, str] | None = None) -> TrainConfig:
    values: dict[str, object] = {}
    items: list[tuple[int, str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        items.append((lineno, key, val))
    for key, val in (overrides or {}).items():
        items.append((0, key, val))
    for lineno, key, val in items:
        where = f"line {lineno}: " if lineno else ""
        if key not in FIELDS:
            raise ConfigError(f"{where}unknown config key {key!r}")
        name, parse = FIELDS[key]
        try:
            values[name] = parse(val)
        except ValueError as exc:
            raise ConfigError(f"{where}bad value for {key}: {exc}") from exc
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"{key}={_fmt(getattr(cfg, name))}" for key, (name, _) in FIELDS.items()]
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def replace(cfg: TrainConfig, **changes) -> TrainConfig:
    return dataclasses.replace(cfg, **changes)
