"""Defended inference by soft voting over snapshots, and robustness curves."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, attack_dataset
from .autodiff import Tensor
from .errors import ConfigError, LabelError
from .interference import (
    STREAM_EVAL,
    Background,
    InterferenceConfig,
    apply_interference,
    draw_batch,
    generate_backgrounds,
)
from .models import EVAL_CHUNK, SmallConvNet, SnapshotSet

CURVE_HEADER = "epsilon,mode,top1_base_accuracy,n_images,seed"


@dataclass
class ClassDistribution:
    probs: np.ndarray  # [N*K], class-major composite layout
    N: int
    K: int

    def base_probs(self) -> np.ndarray:
        return marginalize(self.probs, self.K)


def marginalize(probs: np.ndarray, K: int) -> np.ndarray:
    """P(base c) = sum_k P(composite c*K + k); works on [..., N*K]."""
    return probs.reshape(*probs.shape[:-1], -1, K).sum(axis=-1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def eval_stream(seed: int) -> int:
    return STREAM_EVAL + 16 * (int(seed) + 1)


def _as_models(snapshots) -> list[SmallConvNet]:
    if isinstance(snapshots, SnapshotSet):
        models = snapshots.models()
    elif isinstance(snapshots, SmallConvNet):
        models = [snapshots]
    else:
        models = list(snapshots)
    if not models:
        raise ConfigError("snapshot set is empty")
    return models


def _check_metadata(snapshots, icfg: InterferenceConfig) -> None:
    if not isinstance(snapshots, SnapshotSet):
        return
    for ckpt in snapshots.snapshots:
        meta = ckpt.metadata
        expected = {"K": str(icfg.K), "alpha": repr(float(icfg.alpha)), "beta": repr(float(icfg.beta)), "gamma": repr(float(icfg.gamma))}
        for key, value in expected.items():
            if key in meta and meta[key] != value:
                raise ConfigError(f"snapshot {key}={meta[key]} does not match interference config {key}={value}")


def soft_vote(
    images: np.ndarray,
    image_ids: Sequence[int],
    models: Sequence[SmallConvNet],
    icfg: InterferenceConfig,
    backgrounds: Sequence[Background],
    seed: int,
) -> np.ndarray:
    """Average composite distribution [B, N*K] over models on one blended input per image."""
    if any(m.K != icfg.K for m in models):
        raise ConfigError(f"snapshot K does not match interference K={icfg.K}")
    ids = np.asarray(image_ids, dtype=np.int64)
    out = []
    for start in range(0, len(images), EVAL_CHUNK):
        sl = slice(start, start + EVAL_CHUNK)
        real = draw_batch(icfg, images.shape[1:], ids[sl], 0, eval_stream(seed))
        with ad.no_grad():
            blended = Tensor(apply_interference(images[sl], icfg, backgrounds, real).data)
            acc = np.zeros((len(ids[sl]), models[0].num_outputs), dtype=np.float64)
            for m in models:
                acc += softmax(m(blended).data)
        out.append(acc / len(models))
    if not out:
        return np.zeros((0, models[0].num_outputs))
    return np.concatenate(out)


def defended_predict(
    x: np.ndarray,
    snapshots,
    icfg: InterferenceConfig,
    backgrounds: Sequence[Background],
    seed: int,
    image_id: int = 0,
) -> tuple[int, ClassDistribution]:
    """Base-class prediction for one [C,H,W] image plus the voted distribution."""
    _check_metadata(snapshots, icfg)
    models = _as_models(snapshots)
    probs = soft_vote(np.asarray(x, np.float32)[None], [image_id], models, icfg, backgrounds, seed)[0]
    dist = ClassDistribution(probs, models[0].N, icfg.K)
    return int(np.argmax(dist.base_probs())), dist


@dataclass
class EvalResult:
    accuracy: float
    ids: np.ndarray
    true: np.ndarray
    pred: np.ndarray
    maxprob: np.ndarray

    def render_log(self) -> str:
        return "".join(
            f"{i},{t},{p},{m:.6f}\n" for i, t, p, m in zip(self.ids, self.true, self.pred, self.maxprob)
        )


def evaluate(
    images: np.ndarray,
    labels,
    snapshots,
    icfg: InterferenceConfig,
    backgrounds: Sequence[Background],
    seed: int,
    image_ids=None,
) -> EvalResult:
    """Top-1 base-class accuracy of the defended ensemble."""
    if len(images) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    if labels is None or len(labels) != len(images):
        raise LabelError("every image needs a label")
    _check_metadata(snapshots, icfg)
    models = _as_models(snapshots)
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.arange(len(images)) if image_ids is None else np.asarray(image_ids, dtype=np.int64)
    base = marginalize(soft_vote(images, ids, models, icfg, backgrounds, seed), icfg.K)
    pred = base.argmax(axis=1)
    correct = int((pred == labels).sum())  # integer count: order-independent
    return EvalResult(correct / len(labels), ids, labels, pred, base.max(axis=1))


# ---------------------------------------------------------------------------
# robustness curves


@dataclass
class CurveRow:
    epsilon: float
    mode: str
    top1_base_accuracy: float
    n_images: int
    seed: int


@dataclass
class RobustnessCurve:
    rows: list[CurveRow] = field(default_factory=list)
    logs: dict[tuple[str, float], EvalResult] = field(default_factory=dict)

    def sorted_rows(self) -> list[CurveRow]:
        return sorted(self.rows, key=lambda r: (r.mode, r.epsilon))

    def accuracy(self, mode: str, epsilon: float) -> float:
        for r in self.rows:
            if r.mode == mode and r.epsilon == epsilon:
                return r.top1_base_accuracy
        raise KeyError((mode, epsilon))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CURVE_HEADER + "\n")
        for r in self.sorted_rows():
            buf.write(f"{r.epsilon:.6f},{r.mode},{r.top1_base_accuracy:.6f},{r.n_images},{r.seed}\n")
        return buf.getvalue()


def parse_curve_csv(text: str) -> list[CurveRow]:
    lines = text.strip().splitlines()
    if not lines or lines[0] != CURVE_HEADER:
        raise ValueError("not a robustness CSV")
    rows = []
    for line in lines[1:]:
        eps, mode, acc, n, seed = line.split(",")
        rows.append(CurveRow(float(eps), mode, float(acc), int(n), int(seed)))
    return rows


def robustness_curve(
    epsilons: Sequence[float],
    modes: Sequence[str],
    images: np.ndarray,
    labels: np.ndarray,
    snapshots: SnapshotSet | None,
    icfg: InterferenceConfig,
    backgrounds: Sequence[Background],
    attack_template: AttackConfig,
    seed: int,
    undefended: SmallConvNet | None = None,
    threads: int = 1,
    adversarial_sink=None,
) -> RobustnessCurve:
    """Attack then evaluate for every (epsilon, mode).

    ``INN1``/``INN2`` attack ``snapshots[attack_snapshot_index]`` and evaluate
    the soft-voted ensemble. ``undefended`` attacks and evaluates the clean
    model directly. ``adversarial_sink(mode, eps, adv)`` receives every set.
    """
    if not len(epsilons):
        raise ConfigError("epsilon grid is empty")
    eps_sorted = sorted(float(e) for e in epsilons)
    if len(set(eps_sorted)) != len(eps_sorted):
        raise ConfigError("epsilon grid has duplicates")
    ids = np.arange(len(images))
    curve = RobustnessCurve()
    for mode in modes:
        if mode == "undefended":
            if undefended is None:
                raise ConfigError("undefended mode needs the clean model")
            target, voters = undefended, [undefended]
            ev_cfg, ev_bgs, atk_mode = InterferenceConfig.identity(icfg.master_seed), None, "INN2"
        elif mode in ("INN1", "INN2"):
            if snapshots is None:
                raise ConfigError(f"{mode} needs a snapshot set")
            idx = attack_template.attack_snapshot_index
            if not 0 <= idx < len(snapshots):
                raise ConfigError(f"attack snapshot index {idx} outside {len(snapshots)} snapshots")
            _check_metadata(snapshots, icfg)
            voters = snapshots.models()
            target = voters[idx]
            ev_cfg, ev_bgs, atk_mode = icfg, backgrounds, mode
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        if ev_bgs is None:
            c, h, w = images.shape[1:]
            ev_bgs = generate_backgrounds(1, c, h, w, icfg.master_seed)
        for eps in eps_sorted:
            cfg = AttackConfig(
                epsilon=eps,
                iterations=attack_template.iterations,
                mode=atk_mode,
                attack_snapshot_index=attack_template.attack_snapshot_index,
                eot_resample=attack_template.eot_resample,
                random_start=attack_template.random_start,
                seed=attack_template.seed,
            )
            adv = attack_dataset(images, labels, target, cfg, icfg, backgrounds, ids, threads)
            if adversarial_sink is not None:
                adv.mode = mode if mode == "undefended" else adv.mode
                adversarial_sink(mode, eps, adv)
            res = evaluate(adv.perturbed, labels, voters, ev_cfg, ev_bgs, seed, ids)
            curve.rows.append(CurveRow(eps, mode, res.accuracy, len(images), seed))
            curve.logs[(mode, eps)] = res
    return curve
