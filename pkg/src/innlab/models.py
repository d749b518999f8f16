"""SmallConvNet, clean pretraining, K-fold label expansion and INN fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, ClassVar, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SgdState, Tensor
from .checkpoint import Checkpoint
from .datasets import DatasetHandle
from .errors import CheckpointError, ConfigError, LabelError, NonFiniteError, TrainingError
from .interference import (
    STREAM_TRAIN,
    Background,
    InterferenceConfig,
    apply_interference,
    draw_batch,
    encode_label,
)

log = logging.getLogger(__name__)

ARCH = "smallconvnet-v1"
PARAM_NAMES = (
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
)
EVAL_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    learning_rate: float = 0.01
    epochs: int = 4
    seed: int = 0

    REFERENCE_BATCH_SIZE: ClassVar[int] = 512

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


class SmallConvNet:
    """conv3x3(C->32) relu conv3x3(32->64) relu maxpool2 dense(128) relu dense(N*K)."""

    def __init__(self, C: int, H: int, W: int, N: int, K: int = 1, seed: int = 0, init: bool = True):
        if H % 2 or W % 2:
            raise ConfigError(f"image height/width must be even, got {H}x{W}")
        self.C, self.H, self.W, self.N, self.K = C, H, W, N, K
        self.params: dict[str, Tensor] = {}
        if init:
            rng = np.random.default_rng(seed)
            shapes = self.param_shapes(C, H, W, N, K)
            # He-normal weights, zero biases
            for layer in ("conv1", "conv2", "fc1", "fc2"):
                wshape = shapes[f"{layer}.weight"]
                fan_in = int(np.prod(wshape[1:])) if layer.startswith("conv") else wshape[0]
                w = rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)
                self.params[f"{layer}.weight"] = Tensor(w, requires_grad=True, name=f"{layer}.weight")
                self.params[f"{layer}.bias"] = Tensor(
                    np.zeros(shapes[f"{layer}.bias"]), requires_grad=True, name=f"{layer}.bias"
                )

    @staticmethod
    def param_shapes(C: int, H: int, W: int, N: int, K: int = 1) -> dict[str, tuple[int, ...]]:
        hidden = 64 * (H // 2) * (W // 2)
        return {
            "conv1.weight": (32, C, 3, 3),
            "conv1.bias": (32,),
            "conv2.weight": (64, 32, 3, 3),
            "conv2.bias": (64,),
            "fc1.weight": (hidden, 128),
            "fc1.bias": (128,),
            "fc2.weight": (128, N * K),
            "fc2.bias": (N * K,),
        }

    @property
    def num_outputs(self) -> int:
        return self.N * self.K

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in PARAM_NAMES]

    def frozen(self) -> "SmallConvNet":
        """A view sharing parameter storage but recording no parameter gradients."""
        view = SmallConvNet(self.C, self.H, self.W, self.N, self.K, init=False)
        for name, t in self.params.items():
            view.params[name] = Tensor._wrap(t.data, False, name)
        return view

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.conv2d(x, p["conv1.weight"], p["conv1.bias"], 1, 1))
        h = ad.relu(ad.conv2d(h, p["conv2.weight"], p["conv2.bias"], 1, 1))
        h = ad.flatten(ad.maxpool2d(h, 2))
        h = ad.relu(ad.dense(h, p["fc1.weight"], p["fc1.bias"]))
        return ad.dense(h, p["fc2.weight"], p["fc2.bias"])

    __call__ = forward

    def hidden(self, x: Tensor) -> np.ndarray:
        """Penultimate activations (input of the final dense layer)."""
        p = self.params
        with ad.no_grad():
            h = ad.relu(ad.conv2d(x, p["conv1.weight"], p["conv1.bias"], 1, 1))
            h = ad.relu(ad.conv2d(h, p["conv2.weight"], p["conv2.bias"], 1, 1))
            h = ad.flatten(ad.maxpool2d(h, 2))
            return ad.relu(ad.dense(h, p["fc1.weight"], p["fc1.bias"])).data

    def logits(self, images: np.ndarray) -> np.ndarray:
        """Inference without recording, in fixed-size chunks."""
        out = []
        with ad.no_grad():
            for i in range(0, len(images), EVAL_CHUNK):
                out.append(self.forward(Tensor(images[i : i + EVAL_CHUNK])).data)
        return np.concatenate(out) if out else np.zeros((0, self.num_outputs), np.float32)

    def to_checkpoint(self, **extra) -> Checkpoint:
        meta = {"arch": ARCH, "C": self.C, "H": self.H, "W": self.W, "N": self.N, "K": self.K}
        meta.update(extra)
        return Checkpoint(
            {k: str(v) for k, v in meta.items()},
            {n: self.params[n].data.copy() for n in PARAM_NAMES},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SmallConvNet":
        meta = ckpt.metadata
        if meta.get("arch") != ARCH:
            raise CheckpointError(f"checkpoint arch {meta.get('arch')!r} is not {ARCH!r}")
        try:
            dims = [int(meta[k]) for k in ("C", "H", "W", "N", "K")]
        except KeyError as exc:
            raise CheckpointError(f"checkpoint metadata lacks {exc.args[0]!r}") from None
        model = cls(*dims, init=False)
        shapes = cls.param_shapes(*dims)
        for name in PARAM_NAMES:
            if name not in ckpt.tensors:
                raise CheckpointError(f"checkpoint lacks tensor {name!r}")
            arr = ckpt.tensors[name]
            if arr.shape != shapes[name]:
                raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, architecture needs {shapes[name]}")
            model.params[name] = Tensor(arr, requires_grad=True, name=name)
        return model


@dataclass
class SnapshotSet:
    snapshots: list[Checkpoint]
    metadata: dict[str, str] = field(default_factory=dict)
    transforms_per_epoch: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.snapshots)

    def models(self) -> list[SmallConvNet]:
        return [SmallConvNet.from_checkpoint(c) for c in self.snapshots]

    @property
    def N(self) -> int:
        return int(self.snapshots[0].metadata["N"])

    @property
    def K(self) -> int:
        return int(self.snapshots[0].metadata["K"])


# ---------------------------------------------------------------------------
# training


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _run_epoch(
    model: SmallConvNet,
    state: SgdState,
    n: int,
    batch_size: int,
    order: np.ndarray,
    make_batch: Callable[[np.ndarray], tuple[Tensor, np.ndarray]],
    epoch: int,
) -> float:
    params = model.parameters()
    total, seen = 0.0, 0
    for step, start in enumerate(range(0, n, batch_size)):
        idx = order[start : start + batch_size]
        try:
            x, y = make_batch(idx)
            with ad.ComputationTape() as tape:
                loss = ad.softmax_cross_entropy(model(x), y)
                ad.backward(loss, tape)
            ad.sgd_momentum_step(params, state)
        except NonFiniteError as exc:
            raise TrainingError(f"training diverged at epoch {epoch}, step {step}: {exc}") from exc
        total += float(loss.data) * len(idx)
        seen += len(idx)
    return total / max(seen, 1)


def _sgd(model: SmallConvNet, cfg: TrainConfig) -> SgdState:
    return SgdState.for_params(
        model.parameters(),
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )


def pretrain(dataset: DatasetHandle, cfg: TrainConfig, N: int | None = None) -> SmallConvNet:
    """Clean training with N output classes and no interference."""
    N = dataset.N if N is None else N
    if len(dataset) and dataset.labels.max() >= N:
        raise LabelError(f"dataset labels exceed N={N}")
    c, h, w = dataset.image_shape
    model = SmallConvNet(c, h, w, N, 1, seed=cfg.seed)
    state = _sgd(model, cfg)

    def make_batch(idx):
        return Tensor(dataset.images[idx]), dataset.labels[idx]

    for epoch in range(cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, len(dataset))
        loss = _run_epoch(model, state, len(dataset), cfg.batch_size, order, make_batch, epoch)
        log.info("pretrain epoch %d: mean loss %.4f", epoch + 1, loss)
    return model


def transfer_expand(pretrained: Checkpoint | SmallConvNet, N: int, K: int, seed: int = 0, jitter_std: float = 0.01) -> SmallConvNet:
    """Copy a clean N-class model and widen its output layer to N*K composites.

    Composite column ``c*K + k`` starts from the pretrained column for ``c``
    plus seeded Gaussian jitter on weights and bias.
    """
    src = pretrained if isinstance(pretrained, SmallConvNet) else SmallConvNet.from_checkpoint(pretrained)
    if src.num_outputs != N:
        raise CheckpointError(f"pretrained model has {src.num_outputs} outputs, expected N={N}")
    model = SmallConvNet(src.C, src.H, src.W, N, K, init=False)
    for name in PARAM_NAMES[:-2]:
        model.params[name] = Tensor(src.params[name].data, requires_grad=True, name=name)
    rng = np.random.default_rng(seed)
    w = np.repeat(src.params["fc2.weight"].data, K, axis=1)
    b = np.repeat(src.params["fc2.bias"].data, K)
    if jitter_std:
        w = w + (rng.standard_normal(w.shape) * jitter_std).astype(np.float32)
        b = b + (rng.standard_normal(b.shape) * jitter_std).astype(np.float32)
    model.params["fc2.weight"] = Tensor(w, requires_grad=True, name="fc2.weight")
    model.params["fc2.bias"] = Tensor(b, requires_grad=True, name="fc2.bias")
    return model


def snapshot_metadata(model: SmallConvNet, icfg: InterferenceConfig, tcfg: TrainConfig, dataset_id: str) -> dict[str, str]:
    return {
        "N": str(model.N),
        "K": str(model.K),
        "alpha": repr(float(icfg.alpha)),
        "beta": repr(float(icfg.beta)),
        "gamma": repr(float(icfg.gamma)),
        "seed": str(icfg.master_seed),
        "train_seed": str(tcfg.seed),
        "learning_rate": repr(float(tcfg.learning_rate)),
        "batch_size": str(tcfg.batch_size),
        "dataset": dataset_id,
    }


def interfered_batch(
    images: np.ndarray,
    labels: np.ndarray,
    ids: Sequence[int],
    icfg: InterferenceConfig,
    backgrounds: Sequence[Background],
    counter: int,
    stream: int = STREAM_TRAIN,
) -> tuple[Tensor, np.ndarray]:
    """Blended inputs and composite labels for a batch, one realization per image."""
    real = draw_batch(icfg, images.shape[1:], ids, counter, stream)
    with ad.no_grad():
        x = apply_interference(images, icfg, backgrounds, real)
    return Tensor(x.data), encode_label(labels, real.background_index, icfg.K)


def finetune_inn(
    model: SmallConvNet,
    dataset: DatasetHandle,
    icfg: InterferenceConfig,
    tcfg: TrainConfig,
    backgrounds: Sequence[Background],
    dataset_id: str | None = None,
) -> SnapshotSet:
    """Fine-tune on interfered inputs; one checkpoint per epoch.

    Each training image gets one fresh realization per epoch, so an epoch
    sees exactly ``len(dataset)`` transformed images.
    """
    if model.K != icfg.K or model.N * icfg.K != model.num_outputs:
        raise ConfigError(f"model has K={model.K}, interference config has K={icfg.K}")
    if len(backgrounds) != icfg.K:
        raise ConfigError(f"{len(backgrounds)} backgrounds for K={icfg.K}")
    if len(dataset) and dataset.labels.max() >= model.N:
        raise LabelError(f"dataset labels exceed N={model.N}")
    state = _sgd(model, tcfg)
    meta = snapshot_metadata(model, icfg, tcfg, dataset_id or dataset.name)
    result = SnapshotSet([], dict(meta))
    ids = np.arange(len(dataset))

    for epoch in range(tcfg.epochs):
        applied = 0

        def make_batch(idx, epoch=epoch):
            nonlocal applied
            applied += len(idx)
            return interfered_batch(
                dataset.images[idx], dataset.labels[idx], ids[idx], icfg, backgrounds, epoch
            )

        order = _epoch_order(tcfg.seed, epoch, len(dataset))
        loss = _run_epoch(model, state, len(dataset), tcfg.batch_size, order, make_batch, epoch)
        log.info("finetune epoch %d: mean loss %.4f", epoch + 1, loss)
        result.snapshots.append(model.to_checkpoint(**meta, epoch=epoch + 1))
        result.transforms_per_epoch.append(applied)
    return result


def dataset_loss(
    model: SmallConvNet,
    dataset: DatasetHandle,
    icfg: InterferenceConfig,
    backgrounds: Sequence[Background],
    counter: int,
) -> float:
    """Mean composite-label loss over the dataset for a fixed realization counter."""
    total = 0.0
    ids = np.arange(len(dataset))
    with ad.no_grad():
        for start in range(0, len(dataset), EVAL_CHUNK):
            sl = slice(start, start + EVAL_CHUNK)
            x, y = interfered_batch(dataset.images[sl], dataset.labels[sl], ids[sl], icfg, backgrounds, counter)
            total += float(ad.softmax_cross_entropy(model(x), y).data) * len(y)
    return total / max(len(dataset), 1)


def accuracy(model: SmallConvNet, dataset: DatasetHandle) -> float:
    """Clean top-1 accuracy of a K=1 model."""
    pred = model.logits(dataset.images).argmax(axis=1)
    return float((pred == dataset.labels).mean())
