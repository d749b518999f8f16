"""``innlab`` command line: pretrain, finetune, attack, eval, curve, gen-backgrounds, gradcheck.

All file output goes under ``--out DIR``::

    pretrained.innc
    snapshots/epoch{1..E}.innc
    adv/eps{eps}_{mode}.inna
    curves/robustness.csv
    logs/eval_{...}.txt
    backgrounds.innc
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .attacks import AttackConfig, attack_dataset, load_adversarial_set, save_adversarial_set
from .checkpoint import Checkpoint, atomic_write, load_checkpoint, save_checkpoint
from .datasets import DatasetHandle, load_dataset
from .ensemble import evaluate, robustness_curve
from .errors import ConfigError, InnError
from .gradcheck import THRESHOLD, run_suite
from .interference import generate_backgrounds
from .models import SmallConvNet, SnapshotSet, accuracy, finetune_inn, pretrain, transfer_expand

log = logging.getLogger("innlab")

COMMANDS = ("pretrain", "finetune", "attack", "eval", "curve", "gen-backgrounds", "gradcheck")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # surface usage problems to run_command instead of exiting the interpreter
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value experiment file")
    common.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    common.add_argument("--dataset", help="digits | idx:IMAGES,LABELS | cifar:BATCH[,BATCH...]")
    common.add_argument("--test-dataset", help="held-out split, same syntax as --dataset")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed (beats INN_SEED and the config file)")
    common.add_argument("--eps", help="comma list; k/255, bare integers (k/255) or decimals")
    common.add_argument("--modes", help="comma list of INN1, INN2, undefended")
    common.add_argument("--iterations", type=int, help="PGD steps T")
    common.add_argument("--eval-images", type=int, help="seeded evaluation subset size")
    common.add_argument("--epochs", type=int, help="fine-tuning epochs")
    common.add_argument("--threads", type=int, default=1, help="attack worker threads; results do not depend on it")
    common.add_argument("--pretrained", help="clean checkpoint to start from")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="innlab", description="interference-network robustness lab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("pretrain", parents=[common], help="clean training with K=1")
    sub.add_parser("finetune", parents=[common], help="transfer to N*K outputs and fine-tune on interfered inputs")
    sub.add_parser("attack", parents=[common], help="write adversarial sets for every (eps, mode)")
    ev = sub.add_parser("eval", parents=[common], help="soft-voted accuracy on clean or adversarial images")
    ev.add_argument("--adv", help="adversarial set (.inna) to evaluate instead of the clean split")
    sub.add_parser("curve", parents=[common], help="full pipeline ending in curves/robustness.csv")
    bg = sub.add_parser("gen-backgrounds", parents=[common], help="write the background set as a checkpoint")
    bg.add_argument("--shape", help="C,H,W (default: dataset image shape)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    return parser


# ---------------------------------------------------------------------------
# configuration


def _dataset_spec(text: str) -> tuple[str, tuple[str, ...]]:
    fmt, _, rest = text.partition(":")
    return fmt, tuple(p for p in rest.split(",") if p)


def resolve_config(args, environ=None) -> cfgmod.ExperimentConfig:
    """Config file, then preset, then flags; seed precedence is --seed, INN_SEED, file."""
    environ = os.environ if environ is None else environ
    if args.config:
        cfg = cfgmod.parse(Path(args.config).read_text(encoding="utf-8"))
    else:
        cfg = cfgmod.ExperimentConfig()
    if args.preset:
        preset = cfgmod.from_preset(args.preset, cfg.seed)
        cfg = replace(cfg, interference=preset.interference, preset=args.preset)

    top = {}
    if args.dataset:
        top["dataset_format"], top["train_paths"] = _dataset_spec(args.dataset)
    if args.test_dataset:
        fmt, top["test_paths"] = _dataset_spec(args.test_dataset)
        if fmt != top.get("dataset_format", cfg.dataset_format):
            raise ConfigError("--test-dataset format differs from --dataset")
    if args.out:
        top["out_dir"] = args.out
    if args.eps:
        top["epsilons"] = cfgmod.parse_epsilons(args.eps)
    if args.modes:
        top["modes"] = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    if args.eval_images is not None:
        top["eval_images"] = args.eval_images
    cfg = replace(cfg, **top)
    if args.iterations is not None:
        cfg = replace(cfg, attack=replace(cfg.attack, iterations=args.iterations, step_size=None))
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))

    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    elif environ.get("INN_SEED", "").strip():
        try:
            cfg = cfg.with_seed(int(environ["INN_SEED"]))
        except ValueError as exc:
            raise ConfigError(f"INN_SEED must be an integer, got {environ['INN_SEED']!r}") from exc
    for mode in cfg.modes:
        if mode not in ("INN1", "INN2", "undefended"):
            raise ConfigError(f"unknown mode {mode!r}")
    return cfg


class _Run:
    """Lazily loaded datasets and artifacts for one command invocation."""

    def __init__(self, cfg: cfgmod.ExperimentConfig, args):
        self.cfg = cfg
        self.args = args
        self.out = Path(cfg.out_dir)
        self._train: DatasetHandle | None = None
        self._test: DatasetHandle | None = None

    @property
    def train(self) -> DatasetHandle:
        if self._train is None:
            self._train = load_dataset(self.cfg.dataset_format, self.cfg.train_paths, "train", self.cfg.N)
        return self._train

    @property
    def test(self) -> DatasetHandle:
        if self._test is None:
            if self.cfg.dataset_format != "digits" and not self.cfg.test_paths:
                raise ConfigError("a held-out split is required (--test-dataset or dataset.test)")
            self._test = load_dataset(self.cfg.dataset_format, self.cfg.test_paths, "test", self.cfg.N)
        return self._test

    def eval_set(self) -> DatasetHandle:
        return self.test.sample(self.cfg.eval_images, self.cfg.seed)

    def backgrounds(self, shape=None):
        c, h, w = shape or self.train.image_shape
        ic = self.cfg.interference
        return generate_backgrounds(ic.K, c, h, w, ic.master_seed)

    @property
    def pretrained_path(self) -> Path:
        return Path(self.args.pretrained) if self.args.pretrained else self.out / "pretrained.innc"

    def snapshot_path(self, epoch: int) -> Path:
        return self.out / "snapshots" / f"epoch{epoch}.innc"

    # pipeline stages -------------------------------------------------------

    def pretrain(self) -> SmallConvNet:
        model = pretrain(self.train, self.cfg.pretrain, self.cfg.N)
        save_checkpoint(self.out / "pretrained.innc", model.to_checkpoint(seed=str(self.cfg.seed)))
        print(f"pretrained: clean test accuracy {accuracy(model, self.test):.6f}")
        return model

    def load_pretrained(self, train_if_missing: bool) -> SmallConvNet:
        path = self.pretrained_path
        if path.exists():
            return SmallConvNet.from_checkpoint(load_checkpoint(path))
        if self.args.pretrained or not train_if_missing:
            raise FileNotFoundError(f"no pretrained checkpoint at {path}")
        return self.pretrain()

    def finetune(self, pre: SmallConvNet) -> SnapshotSet:
        ic = self.cfg.interference
        model = transfer_expand(pre, self.cfg.N, ic.K, ic.master_seed)
        snaps = finetune_inn(model, self.train, ic, self.cfg.train, self.backgrounds(), self.cfg.dataset_format)
        for epoch, ckpt in enumerate(snaps.snapshots, 1):
            save_checkpoint(self.snapshot_path(epoch), ckpt)
        print(f"fine-tuned: {len(snaps)} snapshots under {self.out / 'snapshots'}")
        return snaps

    def load_snapshots(self) -> SnapshotSet:
        found = sorted(
            (self.out / "snapshots").glob("epoch*.innc"),
            key=lambda p: int(p.stem[5:]) if p.stem[5:].isdigit() else -1,
        )
        if not found:
            raise FileNotFoundError(f"no snapshots under {self.out / 'snapshots'}; run finetune first")
        ckpts = [load_checkpoint(p) for p in found]
        return SnapshotSet(ckpts, dict(ckpts[0].metadata))


def _eps_tag(eps: float) -> str:
    return f"{eps:.6f}"


# ---------------------------------------------------------------------------
# commands


def _cmd_pretrain(run: _Run) -> int:
    run.pretrain()
    return 0


def _cmd_finetune(run: _Run) -> int:
    run.finetune(run.load_pretrained(train_if_missing=True))
    return 0


def _attack_cfg(run: _Run, eps: float, mode: str) -> AttackConfig:
    return replace(run.cfg.attack, epsilon=eps, mode="INN2" if mode == "undefended" else mode, step_size=None)


def _cmd_attack(run: _Run) -> int:
    cfg = run.cfg
    ev = run.eval_set()
    ids = np.arange(len(ev))
    bgs = run.backgrounds()
    snaps = run.load_snapshots() if any(m != "undefended" for m in cfg.modes) else None
    voters = snaps.models() if snaps is not None else []
    pre = run.load_pretrained(train_if_missing=False) if "undefended" in cfg.modes else None
    for mode in cfg.modes:
        for eps in sorted(cfg.epsilons):
            acfg = _attack_cfg(run, eps, mode)
            if mode == "undefended":
                target = pre
            else:
                idx = acfg.attack_snapshot_index
                if not 0 <= idx < len(voters):
                    raise ConfigError(f"attack snapshot index {idx} outside {len(voters)} snapshots")
                target = voters[idx]
            adv = attack_dataset(ev.images, ev.labels, target, acfg, cfg.interference, bgs, ids, run.args.threads)
            path = run.out / "adv" / f"eps{_eps_tag(eps)}_{mode}.inna"
            save_adversarial_set(path, adv, acfg.iterations, acfg.attack_snapshot_index, cfg.seed, mode)
            print(f"{path}: {len(adv.perturbed)} images, mean loss {float(np.mean(adv.achieved_loss)):.6f}")
    return 0


def _cmd_eval(run: _Run) -> int:
    cfg = run.cfg
    ev = run.eval_set()
    images, ids, name, mode = ev.images, np.arange(len(ev)), "clean", None
    if run.args.adv:
        aset = load_adversarial_set(run.args.adv)
        if len(aset.image_ids) and aset.image_ids.max() >= len(ev):
            raise ConfigError(f"{run.args.adv} refers to images outside the {len(ev)}-image evaluation subset")
        images, ids, mode = aset.images, aset.image_ids, aset.mode
        name = f"{mode}_eps{_eps_tag(aset.epsilon)}"
    labels = ev.labels[ids]
    if mode == "undefended":
        voters = run.load_pretrained(train_if_missing=False)
        icfg = type(cfg.interference).identity(cfg.seed)
        bgs = generate_backgrounds(1, *images.shape[1:], cfg.seed)
    else:
        voters, icfg, bgs = run.load_snapshots(), cfg.interference, run.backgrounds()
    res = evaluate(images, labels, voters, icfg, bgs, cfg.seed, ids)
    atomic_write(run.out / "logs" / f"eval_{name}.txt", res.render_log().encode())
    print(f"{name}: top-1 base accuracy {res.accuracy:.6f} on {len(labels)} images")
    return 0


def _cmd_curve(run: _Run) -> int:
    cfg = run.cfg
    pre = run.load_pretrained(train_if_missing=True) if run.args.pretrained else run.pretrain()
    needs_inn = any(m != "undefended" for m in cfg.modes)
    snaps = run.finetune(pre) if needs_inn else None
    ev = run.eval_set()
    bgs = run.backgrounds()

    def sink(mode, eps, adv):
        acfg = _attack_cfg(run, eps, mode)
        path = run.out / "adv" / f"eps{_eps_tag(eps)}_{mode}.inna"
        save_adversarial_set(path, adv, acfg.iterations, acfg.attack_snapshot_index, cfg.seed, mode)

    curve = robustness_curve(
        cfg.epsilons, cfg.modes, ev.images, ev.labels, snaps, cfg.interference, bgs, cfg.attack,
        cfg.seed, undefended=pre, threads=run.args.threads, adversarial_sink=sink,
    )
    for (mode, eps), res in sorted(curve.logs.items()):
        atomic_write(run.out / "logs" / f"eval_{mode}_eps{_eps_tag(eps)}.txt", res.render_log().encode())
    csv = curve.to_csv()
    atomic_write(run.out / "curves" / "robustness.csv", csv.encode())
    sys.stdout.write(csv)
    return 0


def _cmd_gen_backgrounds(run: _Run) -> int:
    if run.args.shape:
        try:
            shape = tuple(int(v) for v in run.args.shape.split(","))
        except ValueError as exc:
            raise ConfigError(f"--shape must be C,H,W, got {run.args.shape!r}") from exc
        if len(shape) != 3:
            raise ConfigError(f"--shape must be C,H,W, got {run.args.shape!r}")
    else:
        shape = run.train.image_shape
    bgs = run.backgrounds(shape)
    tensors = {f"bg{b.index}.{b.generator_name}": b.pixels for b in bgs}
    meta = {"K": str(len(bgs)), "seed": str(run.cfg.seed), "recipes": ",".join(b.generator_name for b in bgs)}
    path = run.out / "backgrounds.innc"
    save_checkpoint(path, Checkpoint(meta, tensors))
    print(f"{path}: {len(bgs)} backgrounds of shape {shape}")
    return 0


def _cmd_gradcheck(run: _Run) -> int:
    worst = run_suite()
    for name, err in worst.items():
        print(f"{name:28s} {err:.3e} {'ok' if err < THRESHOLD else 'FAIL'}")
    return 0 if all(e < THRESHOLD for e in worst.values()) else 1


_HANDLERS = {
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "curve": _cmd_curve,
    "gen-backgrounds": _cmd_gen_backgrounds,
    "gradcheck": _cmd_gradcheck,
}


def run_command(argv=None, environ=None) -> int:
    """Run one subcommand; 0 on success, 1 on operational failure, 2 on usage error."""
    try:
        args = _parser().parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args, environ)
        return _HANDLERS[args.command](_Run(cfg, args))
    except (InnError, OSError) as exc:
        print(f"innlab {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
