"""Command-line interface: train, eval, bench, profile, grad-check.

Flags override a flat key=value config file (# comments allowed). The data
directory defaults to the DATA_DIR environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from tinyvitlab import augment as A
from tinyvitlab import data as D
from tinyvitlab import model as M
from tinyvitlab import train as TR
from tinyvitlab.tensor import Tensor, grad_check, cross_entropy


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; CLI flags override")
    p.add_argument("--data-dir", default=None, help="CIFAR-10 binary dir (default: $DATA_DIR)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--optimizer", choices=["adamw", "lion"], default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--mla", choices=list(M.MLA_VARIANTS), default=None)
    p.add_argument("--dc", type=int, default=None, help="MLA compression dim")
    p.add_argument("--num-cls", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--pos-embed", choices=["learnable", "sin"], default=None)
    p.add_argument("--patch-init", choices=["random", "whiten"], default=None)
    p.add_argument("--drop-path", type=float, default=None)
    p.add_argument("--no-aa", action="store_true")
    p.add_argument("--no-mixup", action="store_true")
    p.add_argument("--no-cutmix", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--subset-per-class", type=int, default=None)
    p.add_argument("--out", default="out")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")


_DEFAULTS = {
    "epochs": 100, "batch_size": 256, "workers": 1, "optimizer": "adamw",
    "lr": 0.002, "weight_decay": 0.05, "mla": "none", "dc": 48, "num_cls": 1,
    "dim": 192, "heads": 12, "depth": 9, "pos_embed": "learnable",
    "patch_init": "random", "drop_path": 0.1, "no_aa": False,
    "no_mixup": False, "no_cutmix": False, "seed": 0, "subset_per_class": None,
}

_CASTS = {
    "epochs": int, "batch_size": int, "workers": int, "lr": float,
    "weight_decay": float, "dc": int, "num_cls": int, "dim": int,
    "heads": int, "depth": int, "drop_path": float, "seed": int,
    "subset_per_class": int,
    "no_aa": lambda s: s.lower() in ("1", "true", "yes"),
    "no_mixup": lambda s: s.lower() in ("1", "true", "yes"),
    "no_cutmix": lambda s: s.lower() in ("1", "true", "yes"),
}


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < CLI flags."""
    merged = dict(_DEFAULTS)
    if args.config:
        for key, raw in parse_config_file(args.config).items():
            if key not in merged:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = _CASTS.get(key, str)(raw)
    for key in merged:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            merged[key] = val
    return merged


def build_configs(opt: dict) -> TR.TrainConfig:
    pos = "sinusoidal" if opt["pos_embed"] == "sin" else opt["pos_embed"]
    patch_init = "whitening" if opt["patch_init"] == "whiten" else opt["patch_init"]
    model = M.ModelConfig(
        embed_dim=opt["dim"], num_heads=opt["heads"], depth=opt["depth"],
        num_cls_tokens=opt["num_cls"], pos_embed=pos, patch_init=patch_init,
        mla=M.MlaConfig(variant=opt["mla"], d_c=opt["dc"]),
        drop_path_rate=opt["drop_path"])
    aug = A.AugmentConfig(use_autoaugment=not opt["no_aa"],
                          use_mixup=not opt["no_mixup"],
                          use_cutmix=not opt["no_cutmix"])
    return TR.TrainConfig(
        epochs=opt["epochs"], batch_size=opt["batch_size"],
        optimizer=opt["optimizer"], lr_peak=opt["lr"],
        weight_decay=opt["weight_decay"], workers=opt["workers"],
        seed=opt["seed"], subset_per_class=opt["subset_per_class"],
        model=model, augment=aug)


def _data_dir(args) -> Path:
    path = args.data_dir or os.environ.get("DATA_DIR")
    if not path:
        raise SystemExit("no data directory: pass --data-dir or set DATA_DIR")
    return Path(path)


def cmd_train(args) -> int:
    cfg = build_configs(resolve_options(args))
    data_dir = _data_dir(args)
    train_ds = D.load_cifar10(data_dir, "train")
    test_ds = D.load_cifar10(data_dir, "test")
    result = TR.train(cfg, train_ds, test_ds, args.out, resume=args.resume)
    print(f"final: {result.final.line()}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    if not args.resume:
        raise SystemExit("eval needs --resume <checkpoint>")
    ckpt = D.load_checkpoint(args.resume)
    mcfg_dict = dict(ckpt.model_config)
    mcfg_dict["mla"] = M.MlaConfig(**mcfg_dict["mla"])
    cfg = M.ModelConfig(**mcfg_dict)
    params = {k: Tensor(v, requires_grad=True) for k, v in sorted(ckpt.params.items())}
    test_ds = D.load_cifar10(_data_dir(args), "test")
    acc = TR.evaluate(cfg, params, test_ds)
    print(f"val_acc={acc:.4f} n={len(test_ds)}")
    return 0


def _model_for_bench(args) -> tuple[M.ModelConfig, dict]:
    opt = resolve_options(args)
    opt["drop_path"] = 0.0
    cfg = build_configs(opt).model
    rng = np.random.default_rng(opt["seed"])
    return cfg, M.init_params(cfg, rng)


def cmd_bench(args) -> int:
    cfg, params = _model_for_bench(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = TR.benchmark_throughput(cfg, params, sizes)
    print(TR.format_bench_table(rows))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.log", "a") as fh:
        for r in rows:
            fh.write(f"bs={r.batch_size} images_per_sec={r.images_per_sec:.2f} "
                     f"activation_bytes={r.activation_bytes} skipped={int(r.skipped)}\n")
    return 0


def cmd_profile(args) -> int:
    cfg, params = _model_for_bench(args)
    opt = resolve_options(args)
    bs = args.profile_batch or min(opt["batch_size"], 32)
    rng = np.random.default_rng(opt["seed"])
    images = rng.standard_normal((bs, 3, cfg.image_size, cfg.image_size)).astype(np.float32)
    targets = np.full((bs, cfg.num_classes), 1.0 / cfg.num_classes, dtype=np.float32)
    profile = TR.profile_step(cfg, params, A.SoftBatch(images, targets))
    print(f"forward_ms={profile.forward_ms:.2f} backward_ms={profile.backward_ms:.2f} "
          f"optim_ms={profile.optim_ms:.2f} other_ms={profile.other_ms:.2f} "
          f"total_ms={profile.total_ms:.2f}")
    return 0


def cmd_grad_check(args) -> int:
    opt = resolve_options(args)
    cfg = M.ModelConfig(
        image_size=16, embed_dim=32, num_heads=4, depth=2,
        num_cls_tokens=opt["num_cls"],
        mla=M.MlaConfig(variant=opt["mla"], d_c=min(opt["dc"], 8)))
    rng = np.random.default_rng(opt["seed"])
    # well-conditioned 64-bit verification point; training-scale init leaves
    # many gradients below finite-difference noise
    params = M.grad_check_point(cfg, rng)
    images = Tensor(rng.standard_normal((2, 3, 16, 16)), dtype=np.float64)
    targets = np.full((2, cfg.num_classes), 0.1, dtype=np.float64)

    def f():
        return cross_entropy(M.forward(cfg, params, images, mode="eval"), targets)

    err = grad_check(f, list(params.values()), h=1e-5, max_coords=5,
                     rng=np.random.default_rng(1))
    print(f"max_relative_error={err:.3e}")
    return 0 if err < 1e-4 else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tinyvitlab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("eval", cmd_eval),
                     ("bench", cmd_bench), ("profile", cmd_profile),
                     ("grad-check", cmd_grad_check)):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)
        if name == "bench":
            p.add_argument("--sizes", default="32,64,128,256")
        if name == "profile":
            p.add_argument("--profile-batch", type=int, default=None)
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
