"""Input interference: white noise, salt-and-pepper noise, background overlay.

Images are float32 arrays shaped ``[..., C, H, W]``. The transforms are built
from autodiff ops so that an attacker can differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, LabelError

# independent RNG streams; part of every realization's seed key
STREAM_TRAIN = 0
STREAM_EVAL = 1
STREAM_ATTACK = 2
STREAM_BACKGROUND = 3

RECIPES = (
    "solid_gray",
    "horizontal_gradient",
    "vertical_gradient",
    "checkerboard",
    "diagonal_stripes",
    "concentric_rings",
    "radial_gradient",
    "lowfreq_noise",
)


@dataclass(frozen=True)
class InterferenceConfig:
    alpha: float = 0.5
    beta: float = 0.4
    gamma: float = 0.4
    K: int = 8
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0,1], got {self.gamma}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")

    @classmethod
    def identity(cls, master_seed: int = 0) -> "InterferenceConfig":
        return cls(alpha=0.0, beta=0.0, gamma=0.0, K=1, master_seed=master_seed)


@dataclass(frozen=True)
class Background:
    pixels: np.ndarray  # [C,H,W] float32 in [0,1]
    index: int
    generator_name: str
    seed: int


@dataclass(frozen=True)
class NoiseRealization:
    """One draw of the random parts of the pipeline.

    Arrays may carry a leading batch axis; ``background_index`` is then an
    integer array of the same batch length.
    """

    white: np.ndarray  # [..., C, H, W], uniform in (0,1)
    sp_mask: np.ndarray  # [..., H, W] bool
    sp_value: np.ndarray  # [..., H, W] bool, True = salt (1.0)
    background_index: int | np.ndarray


# ---------------------------------------------------------------------------
# randomness


def stream_rng(master_seed: int, stream: int, *key: int) -> np.random.Generator:
    """Counter-based generator keyed by (master_seed, stream, *key)."""
    seq = np.random.SeedSequence(int(master_seed) & (2**64 - 1), spawn_key=(stream, *map(int, key)))
    return np.random.Generator(np.random.Philox(seq))


def draw_realization(
    cfg: InterferenceConfig,
    shape: Sequence[int],
    image_id: int,
    counter: int = 0,
    stream: int = STREAM_TRAIN,
) -> NoiseRealization:
    """Realization for one ``[C,H,W]`` image, fully fixed by its key."""
    c, h, w = shape
    rng = stream_rng(cfg.master_seed, stream, image_id, counter)
    white = rng.random((c, h, w), dtype=np.float32)
    white[white == 0] = np.float32(np.finfo(np.float32).tiny)
    sp_mask = rng.random((h, w)) < cfg.gamma
    sp_value = rng.random((h, w)) < 0.5
    k = int(rng.integers(cfg.K))
    return NoiseRealization(white, sp_mask, sp_value, k)


def stack_realizations(items: Sequence[NoiseRealization]) -> NoiseRealization:
    return NoiseRealization(
        white=np.stack([r.white for r in items]),
        sp_mask=np.stack([r.sp_mask for r in items]),
        sp_value=np.stack([r.sp_value for r in items]),
        background_index=np.array([r.background_index for r in items], dtype=np.int64),
    )


def draw_batch(
    cfg: InterferenceConfig,
    shape: Sequence[int],
    image_ids: Sequence[int],
    counter: int = 0,
    stream: int = STREAM_TRAIN,
) -> NoiseRealization:
    return stack_realizations([draw_realization(cfg, shape, i, counter, stream) for i in image_ids])


# ---------------------------------------------------------------------------
# transforms


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def white_noise(x, beta: float, white: np.ndarray) -> Tensor:
    """(x + beta*white) / (1 + beta)."""
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    x = _as_tensor(x)
    if white.shape != x.shape:
        raise DimensionError(f"white noise shape {white.shape} != image shape {x.shape}")
    f32 = np.float32
    return ad.shift_divide(x, f32(beta) * white.astype(f32), f32(1) + f32(beta))


def salt_pepper(x, gamma: float, sp_mask: np.ndarray, sp_value: np.ndarray) -> Tensor:
    """Replace masked pixels, jointly over channels, by 1 (salt) or 0 (pepper)."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0,1], got {gamma}")
    x = _as_tensor(x)
    if sp_mask.shape != x.shape[:-3] + x.shape[-2:] or sp_value.shape != sp_mask.shape:
        raise DimensionError(
            f"salt-and-pepper mask {sp_mask.shape} / values {sp_value.shape} do not cover image {x.shape}"
        )
    mask = np.expand_dims(sp_mask, -3)
    values = np.expand_dims(sp_value, -3).astype(np.float32)
    return ad.masked_fill(x, mask, values)


def overlay(x_prime, bg_pixels: np.ndarray, alpha: float) -> Tensor:
    """x' + alpha*y, with no renormalisation."""
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    x_prime = _as_tensor(x_prime)
    if bg_pixels.shape != x_prime.shape:
        raise DimensionError(f"background shape {bg_pixels.shape} != image shape {x_prime.shape}")
    return ad.add(x_prime, Tensor(np.float32(alpha) * bg_pixels.astype(np.float32)))


def background_stack(backgrounds: Sequence[Background], index) -> np.ndarray:
    idx = np.asarray(index)
    if idx.ndim == 0:
        return backgrounds[int(idx)].pixels
    return np.stack([backgrounds[int(i)].pixels for i in idx])


def apply_interference(
    x,
    cfg: InterferenceConfig,
    backgrounds: Sequence[Background],
    realization: NoiseRealization,
) -> Tensor:
    """white_noise -> salt_pepper -> overlay, in that fixed order."""
    if len(backgrounds) != cfg.K:
        raise ConfigError(f"config has K={cfg.K} but {len(backgrounds)} backgrounds were given")
    idx = np.asarray(realization.background_index)
    if idx.size and (idx.min() < 0 or idx.max() >= cfg.K):
        raise ConfigError(f"background index outside [0, {cfg.K})")
    stage = white_noise(x, cfg.beta, realization.white)
    stage = salt_pepper(stage, cfg.gamma, realization.sp_mask, realization.sp_value)
    return overlay(stage, background_stack(backgrounds, idx), cfg.alpha)


# ---------------------------------------------------------------------------
# composite labels


def encode_label(base_class, background_index, K: int):
    """Composite label ``base_class*K + background_index``; works on arrays."""
    c = np.asarray(base_class)
    k = np.asarray(background_index)
    if K < 1:
        raise LabelError(f"K must be >= 1, got {K}")
    if (k < 0).any() or (k >= K).any() or (c < 0).any():
        raise LabelError(f"background index must lie in [0, {K}) and class be >= 0")
    out = c.astype(np.int64) * K + k
    return int(out) if out.ndim == 0 else out


def decode_label(composite, K: int):
    c = np.asarray(composite)
    if K < 1 or (c < 0).any():
        raise LabelError("composite label must be >= 0 and K >= 1")
    base, k = np.divmod(c.astype(np.int64), K)
    if base.ndim == 0:
        return int(base), int(k)
    return base, k


# ---------------------------------------------------------------------------
# backgrounds


def _recipe(name: str, h: int, w: int, rng: np.random.Generator, shift: tuple[int, int]) -> np.ndarray:
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    rows = (rows + shift[0]) % max(h, 1)
    cols = (cols + shift[1]) % max(w, 1)
    if name == "solid_gray":
        img = np.full((h, w), 0.5)
    elif name == "horizontal_gradient":
        img = cols / max(w - 1, 1)
    elif name == "vertical_gradient":
        img = rows / max(h - 1, 1)
    elif name == "checkerboard":
        img = ((rows // 8 + cols // 8) % 2).astype(np.float64)
    elif name == "diagonal_stripes":
        img = (((rows + cols) // 4) % 2).astype(np.float64)
    elif name in ("concentric_rings", "radial_gradient"):
        dist = np.hypot(rows - (h - 1) / 2, cols - (w - 1) / 2)
        if name == "concentric_rings":
            img = 0.5 + 0.5 * np.cos(2 * np.pi * dist / 6.0)
        else:
            img = 1.0 - dist / max(dist.max(), 1e-12)
    elif name == "lowfreq_noise":
        coarse = rng.random((max(h // 4, 1) + 2, max(w // 4, 1) + 2))
        ri = np.linspace(0, coarse.shape[0] - 1, h)
        ci = np.linspace(0, coarse.shape[1] - 1, w)
        tmp = np.stack([np.interp(ci, np.arange(coarse.shape[1]), row) for row in coarse])
        img = np.stack([np.interp(ri, np.arange(coarse.shape[0]), col) for col in tmp.T]).T
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) if hi > lo else np.full((h, w), 0.5)
    else:
        raise ConfigError(f"unknown background recipe {name!r}")
    return np.clip(img, 0.0, 1.0)


def make_background(generator_name: str, seed: int, c: int, h: int, w: int, index: int = 0) -> Background:
    """Regenerate a background from its recipe name and seed."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    repeat = index // len(RECIPES)
    shift = (int(rng.integers(h)), int(rng.integers(w))) if repeat else (0, 0)
    plane = _recipe(generator_name, h, w, rng, shift).astype(np.float32)
    pixels = np.ascontiguousarray(np.broadcast_to(plane, (c, h, w)))
    return Background(pixels, index, generator_name, seed)


def generate_backgrounds(K: int, C: int, H: int, W: int, master_seed: int = 0) -> list[Background]:
    """K procedural backgrounds; recipes cycle, repeats get seeded shifts."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    out = []
    for k in range(K):
        seed = int(stream_rng(master_seed, STREAM_BACKGROUND, k).integers(2**63))
        out.append(make_background(RECIPES[k % len(RECIPES)], seed, C, H, W, index=k))
    return out
