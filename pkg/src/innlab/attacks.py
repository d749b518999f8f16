"""White-box L-infinity FGSM and PGD in the two INN gradient modes.

``INN1`` differentiates through the full interference pipeline with one fixed
realization drawn by the attacker. ``INN2`` differentiates the raw image
against the marginal base-class objective. An undefended K=1 model is
attacked with ``INN2``, which then reduces to plain cross-entropy.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import atomic_write
from .errors import ConfigError, LabelError, ParseError
from .interference import (
    STREAM_ATTACK,
    Background,
    InterferenceConfig,
    NoiseRealization,
    apply_interference,
    draw_batch,
    encode_label,
)

MODES = ("INN1", "INN2")
ADV_MAGIC = b"INNA"
ADV_VERSION = 1
_MODE_CODES = {"INN1": 0, "INN2": 1, "undefended": 2}
CHUNK = 64  # images per attack job; fixed so results do not depend on --threads


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    iterations: int = 50
    step_size: float | None = None
    mode: str = "INN1"
    attack_snapshot_index: int = 2  # third epoch, 0-based
    eot_resample: bool = False
    random_start: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0,1], got {self.epsilon}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.step_size is None:
            object.__setattr__(self, "step_size", 2.5 * self.epsilon / self.iterations)

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return replace(self, epsilon=epsilon, step_size=None)


@dataclass
class AdversarialExample:
    """A batch of attacked images (a single image is a batch of one)."""

    original: np.ndarray
    perturbed: np.ndarray
    epsilon: float
    mode: str
    achieved_loss: np.ndarray
    image_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def _frozen(model):
    return model.frozen() if hasattr(model, "frozen") else model


def _per_example_loss(logits: np.ndarray, labels: np.ndarray, marginal_k: int | None) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    if marginal_k is None:
        return -logp[rows, labels]
    grp = logp.reshape(len(labels), -1, marginal_k)[rows, labels]
    m = grp.max(axis=1)
    return -(m + np.log(np.exp(grp - m[:, None]).sum(axis=1)))


class _Objective:
    """Loss of a batch of candidate images under one attack mode.

    In INN1 mode the attacker's realization is drawn once from its own seed
    stream (or re-drawn every step when ``eot_resample`` is set) unless one
    is supplied.
    """

    def __init__(self, model, labels, cfg: AttackConfig, icfg, backgrounds, image_ids, shape, realization=None):
        self.model = _frozen(model)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.cfg = cfg
        self.icfg = icfg
        self.backgrounds = backgrounds
        self.image_ids = np.asarray(image_ids, dtype=np.int64)
        self.shape = tuple(shape)
        self.K = getattr(model, "K", 1)
        n_base = getattr(model, "N", None)
        if n_base is not None and self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n_base):
            raise LabelError(f"base labels must lie in [0, {n_base})")
        self._fixed = None
        if cfg.mode == "INN1":
            if icfg is None or backgrounds is None:
                raise ConfigError("INN1 needs the interference config and backgrounds")
            if icfg.K != self.K:
                raise ConfigError(f"model K={self.K} but interference K={icfg.K}")
            if realization is not None:
                self._fixed = realization
            elif not cfg.eot_resample:
                self._fixed = self.realization(0)

    def realization(self, counter: int) -> NoiseRealization:
        return draw_batch(self.icfg, self.shape, self.image_ids, counter, attack_stream(self.cfg.seed))

    def forward(self, x: Tensor, step: int) -> tuple[Tensor, np.ndarray, int | None]:
        if self.cfg.mode == "INN1":
            real = self._fixed if self._fixed is not None else self.realization(step)
            composite = encode_label(self.labels, real.background_index, self.K)
            logits = self.model(apply_interference(x, self.icfg, self.backgrounds, real))
            return logits, composite, None
        return self.model(x), self.labels, self.K

    def gradient(self, x: np.ndarray, step: int = 0) -> np.ndarray:
        xt = Tensor(x, requires_grad=True)
        with ad.ComputationTape() as tape:
            logits, target, mk = self.forward(xt, step)
            if mk is None:
                loss = ad.softmax_cross_entropy(logits, target)
            else:
                loss = ad.marginal_cross_entropy(logits, target, mk)
            # sum over the batch so each image's gradient is its own
            ad.backward(ad.scale(loss, float(len(target))), tape)
        return xt.grad

    def losses(self, x: np.ndarray, step: int = 0) -> np.ndarray:
        with ad.no_grad():
            logits, target, mk = self.forward(Tensor(x), step)
        return _per_example_loss(logits.data, target, mk)


def attack_stream(seed: int) -> int:
    """Stream id for an attacker seed; never collides with train/eval streams."""
    return STREAM_ATTACK + 16 * (int(seed) + 1)


def _prepare(x, labels, image_ids):
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(labels) != len(x):
        raise LabelError(f"{len(x)} images but {len(labels)} labels")
    ids = np.arange(len(x)) if image_ids is None else np.atleast_1d(np.asarray(image_ids, dtype=np.int64))
    return x, labels, ids, single


def _batched(real: NoiseRealization) -> NoiseRealization:
    if np.asarray(real.background_index).ndim:
        return real
    return NoiseRealization(
        real.white[None], real.sp_mask[None], real.sp_value[None], np.array([real.background_index])
    )


def attack_gradient(
    x,
    labels,
    model,
    mode: str,
    icfg: InterferenceConfig | None = None,
    backgrounds: Sequence[Background] | None = None,
    realization: NoiseRealization | None = None,
    image_ids=None,
    seed: int = 0,
) -> np.ndarray:
    """Gradient of the mode's attack loss with respect to the raw images.

    ``labels`` are base classes. INN1 targets the composite label of the
    realization's background; INN2 targets the marginal base-class probability.
    """
    x, labels, ids, single = _prepare(x, labels, image_ids)
    cfg = AttackConfig(epsilon=0.0, mode=mode, seed=seed)
    real = None if realization is None else _batched(realization)
    obj = _Objective(model, labels, cfg, icfg, backgrounds, ids, x.shape[1:], real)
    g = obj.gradient(x)
    return g[0] if single else g


def _pgd_core(x, obj: _Objective, cfg: AttackConfig, steps: int, step_size: float, rng=None) -> np.ndarray:
    eps = np.float32(cfg.epsilon)
    lo = np.maximum(x - eps, np.float32(0))
    hi = np.minimum(x + eps, np.float32(1))
    cur = x.copy()
    if rng is not None:
        cur = np.clip(cur + rng.uniform(-eps, eps, size=x.shape).astype(np.float32), lo, hi)
    step = np.float32(step_size)
    for t in range(steps):
        g = obj.gradient(cur, t)
        cur = np.clip(cur + step * np.sign(g), lo, hi)
    return cur


def _run(x, labels, model, cfg, icfg, backgrounds, image_ids, single_step: bool) -> AdversarialExample:
    x, labels, ids, single = _prepare(x, labels, image_ids)
    obj = _Objective(model, labels, cfg, icfg, backgrounds, ids, x.shape[1:])
    if cfg.epsilon == 0:
        adv = x.copy()
    elif single_step:
        g = obj.gradient(x, 0)
        adv = np.clip(x + np.float32(cfg.epsilon) * np.sign(g), np.float32(0), np.float32(1))
    else:
        rng = np.random.default_rng([cfg.seed, *ids.tolist()]) if cfg.random_start else None
        adv = _pgd_core(x, obj, cfg, cfg.iterations, cfg.step_size, rng)
    loss = obj.losses(adv, 0)
    if single:
        return AdversarialExample(x[0], adv[0], cfg.epsilon, cfg.mode, loss, ids)
    return AdversarialExample(x, adv, cfg.epsilon, cfg.mode, loss, ids)


def fgsm(x, labels, model, cfg: AttackConfig, icfg=None, backgrounds=None, image_ids=None) -> AdversarialExample:
    """One signed-gradient step of size epsilon, clipped to [0,1]."""
    return _run(x, labels, model, cfg, icfg, backgrounds, image_ids, single_step=True)


def pgd(x, labels, model, cfg: AttackConfig, icfg=None, backgrounds=None, image_ids=None) -> AdversarialExample:
    """Iterated signed-gradient steps projected onto the epsilon-ball and [0,1]."""
    return _run(x, labels, model, cfg, icfg, backgrounds, image_ids, single_step=False)


def attack_dataset(
    images: np.ndarray,
    labels: np.ndarray,
    model,
    cfg: AttackConfig,
    icfg=None,
    backgrounds=None,
    image_ids=None,
    threads: int = 1,
) -> AdversarialExample:
    """PGD over a whole set in fixed-size chunks, optionally on worker threads."""
    ids = np.arange(len(images)) if image_ids is None else np.asarray(image_ids, dtype=np.int64)
    frozen = _frozen(model)
    jobs = [slice(i, i + CHUNK) for i in range(0, len(images), CHUNK)]

    def work(sl):
        return pgd(images[sl], labels[sl], frozen, cfg, icfg, backgrounds, ids[sl])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, jobs))
    else:
        parts = [work(sl) for sl in jobs]
    if not parts:
        empty = np.zeros((0, *images.shape[1:]), np.float32)
        return AdversarialExample(empty, empty, cfg.epsilon, cfg.mode, np.zeros(0), ids)
    return AdversarialExample(
        np.concatenate([p.original for p in parts]),
        np.concatenate([p.perturbed for p in parts]),
        cfg.epsilon,
        cfg.mode,
        np.concatenate([p.achieved_loss for p in parts]),
        ids,
    )


# ---------------------------------------------------------------------------
# adversarial set files

_HEADER = struct.Struct("<4sIdIBIQIIII")


def encode_adversarial_set(adv: AdversarialExample, iterations: int, snapshot_index: int, seed: int, mode: str | None = None) -> bytes:
    mode = mode or adv.mode
    if mode not in _MODE_CODES:
        raise ConfigError(f"unknown mode {mode!r}")
    pert = np.asarray(adv.perturbed, dtype="<f4")
    n, c, h, w = pert.shape
    parts = [_HEADER.pack(ADV_MAGIC, ADV_VERSION, float(adv.epsilon), iterations, _MODE_CODES[mode],
                          snapshot_index, int(seed) & (2**64 - 1), c, h, w, n)]
    for i in range(n):
        parts.append(struct.pack("<I", int(adv.image_ids[i])))
        parts.append(pert[i].tobytes())
    return b"".join(parts)


@dataclass
class AdversarialSet:
    epsilon: float
    iterations: int
    mode: str
    snapshot_index: int
    seed: int
    image_ids: np.ndarray
    images: np.ndarray


def decode_adversarial_set(raw: bytes) -> AdversarialSet:
    if len(raw) < _HEADER.size:
        raise ParseError("adversarial set shorter than its header")
    magic, version, eps, iters, code, snap, seed, c, h, w, n = _HEADER.unpack_from(raw)
    if magic != ADV_MAGIC:
        raise ParseError(f"bad adversarial-set magic {magic!r}")
    if version != ADV_VERSION:
        raise ParseError(f"unsupported adversarial-set version {version}")
    modes = {v: k for k, v in _MODE_CODES.items()}
    if code not in modes:
        raise ParseError(f"unknown mode code {code}")
    rec = 4 + 4 * c * h * w
    if len(raw) != _HEADER.size + n * rec:
        raise ParseError(f"expected {n} records of {rec} bytes, file has {len(raw) - _HEADER.size} payload bytes")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec)
    ids = body[:, :4].copy().view("<u4").reshape(n).astype(np.int64)
    images = body[:, 4:].copy().view("<f4").reshape(n, c, h, w).astype(np.float32)
    return AdversarialSet(eps, iters, modes[code], snap, seed, ids, images)


def save_adversarial_set(path, adv: AdversarialExample, iterations: int, snapshot_index: int, seed: int, mode: str | None = None) -> None:
    atomic_write(path, encode_adversarial_set(adv, iterations, snapshot_index, seed, mode))


def load_adversarial_set(path) -> AdversarialSet:
    with open(path, "rb") as fh:
        return decode_adversarial_set(fh.read())
