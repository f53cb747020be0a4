"""Training / evaluation loop, deterministic in-process data parallelism,
step profiler, and forward-throughput benchmark.

Every random stream is derived statelessly from (seed, purpose, epoch,
batch), so a run is bitwise-reproducible and an interrupted run resumed from
a checkpoint reproduces the uninterrupted loss sequence exactly.
"""

from __future__ import annotations

import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from tinyvitlab import augment as A
from tinyvitlab import data as D
from tinyvitlab import model as M
from tinyvitlab import optim as O
from tinyvitlab.tensor import Tensor, Tape, backward, cross_entropy


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    optimizer: str = "adamw"
    lr_peak: float = 0.002
    lr_min: float = 1e-5
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    workers: int = 1
    seed: int = 0
    eval_every: int = 1
    subset_per_class: int | None = None
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    augment: A.AugmentConfig = field(default_factory=A.AugmentConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size % self.workers != 0:
            raise ValueError(f"batch_size {self.batch_size} not divisible by workers {self.workers}")
        self.model.validate()
        self.augment.validate()


@dataclass
class StepProfile:
    forward_ms: float
    backward_ms: float
    optim_ms: float
    other_ms: float
    total_ms: float


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float
    images_per_sec: float
    peak_activation_bytes: int
    wall_seconds: float

    def line(self) -> str:
        return (f"epoch={self.epoch} train_loss={self.train_loss!r} "
                f"val_acc={self.val_acc!r} lr={self.lr!r} "
                f"images_per_sec={self.images_per_sec:.2f} "
                f"peak_activation_bytes={self.peak_activation_bytes} "
                f"wall_seconds={self.wall_seconds:.3f}")


@dataclass
class TrainResult:
    final: MetricsRecord
    records: list[MetricsRecord]
    step_losses: list[float]
    checkpoint_path: Path


def rng_for(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Deterministic per-(seed, purpose, epoch, batch, ...) stream."""
    tag = zlib.crc32(purpose.encode())
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, tag) + tuple(indices))))


def _max_threads() -> int:
    cap = os.environ.get("THREADS")
    return int(cap) if cap else os.cpu_count() or 1


# ---------------------------------------------------------------------------
# batch building

def build_batches(ds: D.Dataset, cfg: TrainConfig, epoch: int,
                  num_classes: int):
    """Yield augmented SoftBatches for one epoch, deterministically."""
    aug = cfg.augment
    order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(ds))
    bs = cfg.batch_size
    if aug.use_repeated_augment and aug.repeated_factor > 1:
        batches = A.repeated_indices(order, bs, aug.repeated_factor)
    else:
        batches = (order[i:i + bs] for i in range(0, len(order) - bs + 1, bs))
    for b, idx in enumerate(batches):
        rng = rng_for(cfg.seed, "augment", epoch, b)
        raws = []
        for i in idx:
            if aug.use_base_augment:
                raws.append(A.base_augment(ds.images[i], aug.use_autoaugment, rng))
            else:
                raws.append(ds.images[i])
        images = D.normalize(np.stack(raws))
        if aug.use_random_erasing:
            images = np.stack([A.random_erase(im, aug.erase_prob,
                                              aug.erase_area_range, rng)
                               for im in images])
        targets = A.label_smooth(A.one_hot(ds.labels[idx], num_classes),
                                 aug.label_smoothing, num_classes)
        batch = A.SoftBatch(images.astype(np.float32), targets)
        mix_rng = rng_for(cfg.seed, "mix", epoch, b)
        use_mix, use_cut = aug.use_mixup, aug.use_cutmix
        if use_mix and use_cut:
            if mix_rng.random() < 0.5:
                use_cut = False
            else:
                use_mix = False
        if use_mix:
            batch = A.mixup(batch, aug.mixup_alpha, mix_rng)
        elif use_cut:
            batch = A.cutmix(batch, aug.cutmix_alpha, mix_rng)
        yield batch


def eval_batches(ds: D.Dataset, batch_size: int):
    for i in range(0, len(ds), batch_size):
        yield D.normalize(ds.images[i:i + batch_size]), ds.labels[i:i + batch_size]


# ---------------------------------------------------------------------------
# gradient computation

def _shard_gradients(cfg: M.ModelConfig, params: dict[str, Tensor],
                     images: np.ndarray, targets: np.ndarray, mode: str,
                     rng: np.random.Generator | None) -> tuple[dict[str, np.ndarray], float]:
    replica = {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}
    with Tape() as tape:
        logits = M.forward(cfg, replica, Tensor(images), mode=mode, rng=rng)
        loss = cross_entropy(logits, targets)
        backward(loss, tape)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in replica.items()}
    return grads, loss.item()


def parallel_train_step(cfg: M.ModelConfig, params: dict[str, Tensor],
                        batch: A.SoftBatch, workers: int, mode: str = "train",
                        seed: int = 0, epoch: int = 0, step_idx: int = 0
                        ) -> tuple[dict[str, np.ndarray], float]:
    """Shard the batch over worker threads, average gradients in ascending
    worker order, and return (averaged grads, mean loss).

    Each worker owns a private parameter replica (shared read-only data,
    private grad buffers) and a private drop-path rng stream, so K=1
    reproduces the serial step bitwise.
    """
    b = len(batch.images)
    if b % workers != 0:
        raise ValueError(f"batch size {b} not divisible by workers {workers}")
    shard = b // workers
    rngs = [rng_for(seed, "droppath", epoch, step_idx, w) for w in range(workers)]

    def work(w: int):
        lo = w * shard
        return _shard_gradients(cfg, params, batch.images[lo:lo + shard],
                                batch.targets[lo:lo + shard], mode, rngs[w])

    if workers == 1:
        results = [work(0)]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, _max_threads())) as pool:
            results = list(pool.map(work, range(workers)))

    grads: dict[str, np.ndarray] = {}
    for path in sorted(params):
        acc = results[0][0][path].copy()
        for w in range(1, workers):
            acc += results[w][0][path]
        grads[path] = acc / workers
    loss = sum(r[1] for r in results) / workers
    return grads, loss


# ---------------------------------------------------------------------------
# evaluation

def evaluate(cfg: M.ModelConfig, params: dict[str, Tensor], ds: D.Dataset,
             batch_size: int = 256) -> float:
    """Argmax-logit accuracy in eval mode (ties go to the lower class index,
    which is numpy argmax behavior)."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for images, labels in eval_batches(ds, batch_size):
        logits = M.forward(cfg, params, Tensor(images.astype(np.float32)), mode="eval")
        correct += int((np.argmax(logits.data, axis=1) == labels).sum())
    return correct / len(ds)


# ---------------------------------------------------------------------------
# training loop

def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                             for g in grads.values())))


def steps_per_epoch(n: int, cfg: TrainConfig) -> int:
    bs = cfg.batch_size
    aug = cfg.augment
    if aug.use_repeated_augment and aug.repeated_factor > 1:
        per = bs // aug.repeated_factor
        return max((n - per) // per + 1, 0)
    return n // bs


def train(cfg: TrainConfig, train_ds: D.Dataset, test_ds: D.Dataset,
          out_dir: str | Path, resume: str | Path | None = None,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Run the full recipe; emits metrics rows and a checkpoint per epoch.

    `stop_after_epoch` ends the run early while keeping the LR schedule of
    the full `cfg.epochs` plan, so a later resume continues seamlessly.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.log"
    ckpt_path = out_dir / "checkpoint.tvlb"

    num_classes = cfg.model.num_classes
    if cfg.subset_per_class is not None:
        train_ds = D.subset_per_class(train_ds, cfg.subset_per_class, num_classes)

    spe = steps_per_epoch(len(train_ds), cfg)
    if spe == 0:
        raise ValueError("dataset smaller than one batch")
    total_steps = cfg.epochs * spe
    warmup_steps = cfg.warmup_epochs * spe
    if warmup_steps >= total_steps:
        warmup_steps = max(total_steps // 10, 1)

    start_epoch = 0
    if resume is not None:
        ckpt = D.load_checkpoint(resume)
        params = {k: Tensor(v, requires_grad=True) for k, v in sorted(ckpt.params.items())}
        state = O.OptimState.from_meta(ckpt.optim_meta, ckpt.optim_arrays)
        start_epoch = ckpt.epoch
    else:
        init_rng = rng_for(cfg.seed, "init")
        patch_sample = None
        if cfg.model.patch_init == "whitening":
            patch_sample = sample_patches(train_ds, cfg.model, rng_for(cfg.seed, "whiten"))
        params = M.init_params(cfg.model, init_rng, patch_sample=patch_sample)
        state = O.init_optim(cfg.optimizer, params, lr_peak=cfg.lr_peak,
                             weight_decay=cfg.weight_decay)

    records: list[MetricsRecord] = []
    step_losses: list[float] = []
    wall_start = time.perf_counter()
    lr = 0.0

    with open(metrics_path, "a") as metrics:
        for epoch in range(start_epoch, cfg.epochs):
            epoch_start = time.perf_counter()
            losses = []
            images_seen = 0
            for step_idx, batch in enumerate(build_batches(train_ds, cfg, epoch, num_classes)):
                global_step = epoch * spe + step_idx
                lr = O.lr_schedule(global_step, total_steps, warmup_steps,
                                   cfg.lr_peak, cfg.lr_min)
                grads, loss = parallel_train_step(cfg.model, params, batch,
                                                  cfg.workers, mode="train",
                                                  seed=cfg.seed, epoch=epoch,
                                                  step_idx=step_idx)
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step_idx}: "
                        f"lr={lr!r} grad_norm={_grad_norm(grads)!r}")
                O.step(params, grads, state, lr)
                losses.append(loss)
                step_losses.append(loss)
                images_seen += len(batch.images)
            epoch_secs = time.perf_counter() - epoch_start

            val_acc = 0.0
            if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
                val_acc = evaluate(cfg.model, params, test_ds)
            record = MetricsRecord(
                epoch=epoch,
                train_loss=float(np.mean(np.asarray(losses, dtype=np.float32))),
                val_acc=val_acc,
                lr=lr,
                images_per_sec=images_seen / max(epoch_secs, 1e-9),
                peak_activation_bytes=activation_estimate_bytes(cfg.model, cfg.batch_size),
                wall_seconds=time.perf_counter() - wall_start,
            )
            records.append(record)
            metrics.write(record.line() + "\n")
            metrics.flush()
            print(record.line())

            D.save_checkpoint(
                ckpt_path, params=params,
                model_config=asdict(cfg.model), train_config=_cfg_dict(cfg),
                optim_meta=state.meta(), optim_arrays=state.to_arrays(),
                rng_state={"seed": cfg.seed, "next_epoch": epoch + 1},
                epoch=epoch + 1)

            if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
                break

    return TrainResult(final=records[-1], records=records,
                       step_losses=step_losses, checkpoint_path=ckpt_path)


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return d


def sample_patches(ds: D.Dataset, cfg: M.ModelConfig,
                   rng: np.random.Generator, max_patches: int = 20000) -> np.ndarray:
    """Normalized raw patch rows for whitening initialization."""
    p = cfg.patch_size
    grid = cfg.image_size // p
    n_img = min(len(ds), max(max_patches // (grid * grid), 1))
    idx = rng.choice(len(ds), size=n_img, replace=False)
    images = D.normalize(ds.images[idx])
    patches = images.reshape(n_img, 3, grid, p, grid, p)
    patches = patches.transpose(0, 2, 4, 1, 3, 5).reshape(-1, 3 * p * p)
    return patches


# ---------------------------------------------------------------------------
# profiling and benchmarking

def profile_step(cfg: M.ModelConfig, params: dict[str, Tensor],
                 batch: A.SoftBatch, state: O.OptimState | None = None,
                 lr: float = 1e-3, warmup: int = 3, steps: int = 10) -> StepProfile:
    """Wall-clock per training phase, averaged over `steps` after `warmup`
    discarded iterations."""
    if state is None:
        state = O.init_optim("adamw", params)
    fwd = bwd = opt = other = total = 0.0
    images = Tensor(batch.images)
    for it in range(warmup + steps):
        t0 = time.perf_counter()
        with Tape() as tape:
            logits = M.forward(cfg, params, images, mode="eval")
            loss = cross_entropy(logits, batch.targets)
            t1 = time.perf_counter()
            backward(loss, tape)
        t2 = time.perf_counter()
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in params.items()}
        O.step(params, grads, state, lr)
        for t in params.values():
            t.zero_grad()
        t3 = time.perf_counter()
        if it >= warmup:
            fwd += t1 - t0
            bwd += t2 - t1
            opt += t3 - t2
            total += t3 - t0
    ms = 1000.0 / steps
    profile = StepProfile(forward_ms=fwd * ms, backward_ms=bwd * ms,
                          optim_ms=opt * ms, other_ms=(total - fwd - bwd - opt) * ms,
                          total_ms=total * ms)
    return profile


def activation_estimate_bytes(cfg: M.ModelConfig, batch_size: int,
                              dtype_bytes: int = 4) -> int:
    """Analytic peak-live-activation estimate for one forward walk.

    Counts the largest working set among the pipeline stages; exactly linear
    in batch size by construction (per-sample shapes only).
    """
    s, c = cfg.seq_len, cfg.embed_dim
    h = cfg.num_heads
    per_proj_latent = cfg.mla.d_c * len(cfg.mla.compressed())
    attn_ws = 3 * s * c + 2 * h * s * s + s * c + s * per_proj_latent
    ffn_ws = s * cfg.ffn_ratio * c + s * c
    tokenize_ws = cfg.num_patches * cfg.patch_dim + s * c
    block_peak = s * c + max(attn_ws, ffn_ws)  # residual stream + branch
    per_sample = max(tokenize_ws, block_peak)
    return per_sample * batch_size * dtype_bytes


@dataclass
class BenchRow:
    batch_size: int
    images_per_sec: float
    activation_bytes: int
    skipped: bool = False


def benchmark_throughput(cfg: M.ModelConfig, params: dict[str, Tensor],
                         batch_sizes: list[int], warmup: int = 3,
                         steps: int = 20, memory_budget_bytes: int | None = None,
                         rng: np.random.Generator | None = None) -> list[BenchRow]:
    """Forward-only steady-state throughput per batch size, one row each."""
    if rng is None:
        rng = np.random.default_rng(0)
    rows = []
    for bs in batch_sizes:
        est = activation_estimate_bytes(cfg, bs)
        if memory_budget_bytes is not None and est > memory_budget_bytes:
            rows.append(BenchRow(bs, 0.0, est, skipped=True))
            continue
        images = Tensor(rng.standard_normal(
            (bs, 3, cfg.image_size, cfg.image_size)).astype(np.float32))
        for _ in range(warmup):
            M.forward(cfg, params, images, mode="eval")
        t0 = time.perf_counter()
        for _ in range(steps):
            M.forward(cfg, params, images, mode="eval")
        elapsed = time.perf_counter() - t0
        rows.append(BenchRow(bs, bs * steps / elapsed, est))
    return rows


def format_bench_table(rows: list[BenchRow]) -> str:
    lines = [f"{'bs':>6} {'images/s':>12} {'act. bytes':>14} {'status':>8}"]
    for r in rows:
        status = "skipped" if r.skipped else "ok"
        lines.append(f"{r.batch_size:>6} {r.images_per_sec:>12.2f} "
                     f"{r.activation_bytes:>14} {status:>8}")
    return "\n".join(lines)
