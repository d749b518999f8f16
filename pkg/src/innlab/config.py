"""Experiment configuration: presets and the flat ``key = value`` file format."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from fractions import Fraction

from .attacks import AttackConfig
from .errors import ConfigError
from .interference import InterferenceConfig
from .models import TrainConfig

PRESETS = {
    "fig3-blue": (0.5, 0.4, 0.4, 8),
    "fig3-green": (0.3, 0.3, 0.4, 4),
    "fig3-red": (0.2, 0.3, 0.2, 4),
    "fig3-purple": (0.1, 0.1, 0.1, 8),
}

# clean pretraining from scratch needs more epochs than the 4 fine-tuning ones
DESK_PRETRAIN = TrainConfig(batch_size=64, learning_rate=0.03, epochs=15)
# small batches give more SGD steps on the ~1.3k-image digits train split
DESK_FINETUNE = TrainConfig(batch_size=32)
# stretch {0,2,4,8,16}/255 so the top point lands on the usual MNIST radius 0.3
DESK_EPS_SCALE = 0.3 / (16 / 255)
DESK_EPSILONS = tuple(k / 255 * DESK_EPS_SCALE for k in (0, 2, 4, 8, 16))


def parse_epsilon(text: str) -> float:
    """``k/255`` fractions, bare integers (also read as k/255) or decimals."""
    text = text.strip()
    try:
        if "/" in text:
            value = float(Fraction(text))
        elif text.isdigit():
            value = int(text) / 255
        else:
            value = float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad epsilon {text!r}") from exc
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"epsilon {text!r} outside [0,1]")
    return value


def parse_epsilons(text: str) -> tuple[float, ...]:
    return tuple(parse_epsilon(t) for t in text.split(",") if t.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_format: str = "digits"
    train_paths: tuple[str, ...] = ()
    test_paths: tuple[str, ...] = ()
    N: int = 10
    interference: InterferenceConfig = field(default_factory=lambda: InterferenceConfig(*PRESETS["fig3-blue"]))
    pretrain: TrainConfig = DESK_PRETRAIN
    train: TrainConfig = DESK_FINETUNE
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.0))
    modes: tuple[str, ...] = ("INN1", "INN2", "undefended")
    epsilons: tuple[float, ...] = DESK_EPSILONS
    eval_images: int = 1000
    out_dir: str = "out"
    preset: str | None = None

    @property
    def seed(self) -> int:
        return self.interference.master_seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            interference=replace(self.interference, master_seed=seed),
            pretrain=replace(self.pretrain, seed=seed),
            train=replace(self.train, seed=seed),
            attack=replace(self.attack, seed=seed),
        )


def from_preset(name: str, seed: int = 0) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    a, b, g, k = PRESETS[name]
    cfg = ExperimentConfig(interference=InterferenceConfig(a, b, g, k), preset=name)
    return cfg.with_seed(seed)


# ---------------------------------------------------------------------------
# key = value rendering


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


def _paths(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def render(cfg: ExperimentConfig) -> str:
    ic, pt, tr, at = cfg.interference, cfg.pretrain, cfg.train, cfg.attack
    lines = [
        "# innlab experiment configuration",
        f"preset = {cfg.preset or ''}",
        f"dataset.format = {cfg.dataset_format}",
        f"dataset.train = {','.join(cfg.train_paths)}",
        f"dataset.test = {','.join(cfg.test_paths)}",
        f"N = {cfg.N}",
        f"seed = {ic.master_seed}",
        f"alpha = {ic.alpha!r}",
        f"beta = {ic.beta!r}",
        f"gamma = {ic.gamma!r}",
        f"K = {ic.K}",
    ]
    for prefix, t in (("pretrain", pt), ("train", tr)):
        lines += [
            f"{prefix}.batch_size = {t.batch_size}",
            f"{prefix}.momentum = {t.momentum!r}",
            f"{prefix}.weight_decay = {t.weight_decay!r}",
            f"{prefix}.learning_rate = {t.learning_rate!r}",
            f"{prefix}.epochs = {t.epochs}",
        ]
    lines += [
        f"attack.iterations = {at.iterations}",
        f"attack.snapshot = {at.attack_snapshot_index}",
        f"attack.eot_resample = {str(at.eot_resample).lower()}",
        f"attack.random_start = {str(at.random_start).lower()}",
        f"modes = {','.join(cfg.modes)}",
        f"eps = {','.join(repr(e) for e in cfg.epsilons)}",
        f"eval_images = {cfg.eval_images}",
        f"out = {cfg.out_dir}",
    ]
    return "\n".join(lines) + "\n"


def parse(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` comments) over ``base`` or a preset.

    A ``preset`` line, wherever it appears, supplies the starting values.
    """
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()

    preset = pairs.pop("preset", "")
    cfg = from_preset(preset) if preset else (base or ExperimentConfig())
    ic = {f.name: getattr(cfg.interference, f.name) for f in fields(InterferenceConfig)}
    tcfgs = {
        "pretrain": {f.name: getattr(cfg.pretrain, f.name) for f in fields(TrainConfig)},
        "train": {f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)},
    }
    at = {f.name: getattr(cfg.attack, f.name) for f in fields(AttackConfig)}
    top = {}
    for key, value in pairs.items():
        try:
            if key == "dataset.format":
                top["dataset_format"] = value
            elif key == "dataset.train":
                top["train_paths"] = _paths(value)
            elif key == "dataset.test":
                top["test_paths"] = _paths(value)
            elif key == "N":
                top["N"] = int(value)
            elif key == "seed":
                ic["master_seed"] = int(value)
            elif key in ("alpha", "beta", "gamma"):
                ic[key] = float(value)
            elif key == "K":
                ic["K"] = int(value)
            elif key.split(".")[0] in tcfgs and "." in key:
                prefix, name = key.split(".", 1)
                if name not in tcfgs[prefix] or name == "seed":
                    raise ConfigError(f"unknown key {key!r}")
                tcfgs[prefix][name] = int(value) if name in ("batch_size", "epochs") else float(value)
            elif key == "attack.iterations":
                at["iterations"] = int(value)
            elif key == "attack.snapshot":
                at["attack_snapshot_index"] = int(value)
            elif key == "attack.eot_resample":
                at["eot_resample"] = _bool(value)
            elif key == "attack.random_start":
                at["random_start"] = _bool(value)
            elif key == "modes":
                top["modes"] = _paths(value)
            elif key == "eps":
                top["epsilons"] = parse_epsilons(value)
            elif key == "eval_images":
                top["eval_images"] = int(value)
            elif key == "out":
                top["out_dir"] = value
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc

    seed = ic["master_seed"]
    at["step_size"] = None
    at["seed"] = seed
    for t in tcfgs.values():
        t["seed"] = seed
    return replace(
        cfg,
        interference=InterferenceConfig(**ic),
        pretrain=TrainConfig(**tcfgs["pretrain"]),
        train=TrainConfig(**tcfgs["train"]),
        attack=AttackConfig(**at),
        preset=preset or cfg.preset,
        **top,
    )
