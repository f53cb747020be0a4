"""Augmentation and regularization stack producing batches with soft labels.

Base augmentation (crop / flip / AutoAugment policy ops) runs in raw uint8
pixel space; MixUp / CutMix / random erasing operate on normalized float
images. All randomness comes from explicit numpy Generators, so a fixed seed
reproduces batches bitwise.

Geometric policy ops use nearest-neighbor resampling with clamp-to-edge
coordinates, keeping outputs bit-exact across platforms.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from scipy import ndimage


@dataclass
class AugmentConfig:
    use_base_augment: bool = True  # pad-reflect crop + horizontal flip
    use_autoaugment: bool = True
    use_mixup: bool = True
    use_cutmix: bool = True
    use_random_erasing: bool = True
    use_repeated_augment: bool = True
    mixup_alpha: float = 0.8
    cutmix_alpha: float = 1.0
    erase_prob: float = 0.25
    erase_area_range: tuple[float, float] = (0.02, 0.33)
    label_smoothing: float = 0.1
    repeated_factor: int = 3

    def validate(self) -> None:
        if not (0.0 <= self.erase_prob <= 1.0):
            raise ValueError("erase_prob must be in [0, 1]")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError("label_smoothing must be in [0, 1)")
        lo, hi = self.erase_area_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError("erase_area_range must lie inside (0, 1)")
        if self.repeated_factor < 1:
            raise ValueError("repeated_factor must be >= 1")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        """Normalize-only pipeline (every toggle off, no smoothing)."""
        return cls(use_base_augment=False, use_autoaugment=False,
                   use_mixup=False, use_cutmix=False,
                   use_random_erasing=False, use_repeated_augment=False,
                   label_smoothing=0.0)


@dataclass
class SoftBatch:
    """Normalized images plus per-sample probability-distribution targets."""

    images: np.ndarray   # float32 [B,3,H,W]
    targets: np.ndarray  # float32 [B,num_classes], rows sum to 1

    def __post_init__(self):
        if len(self.images) != len(self.targets):
            raise ValueError("image/target count mismatch")


# ---------------------------------------------------------------------------
# soft-label ops

def label_smooth(targets: np.ndarray, eps: float, num_classes: int) -> np.ndarray:
    """One-hot rows -> 1-eps+eps/C on the true class, eps/C elsewhere."""
    t = np.asarray(targets, dtype=np.float32)
    if t.ndim != 2 or t.shape[1] != num_classes:
        raise ValueError(f"expected [B,{num_classes}] one-hot rows, got {t.shape}")
    onehot = (np.all((t == 0) | (t == 1), axis=None) and np.all(t.sum(axis=1) == 1))
    if not onehot:
        raise ValueError("label_smooth requires one-hot input rows")
    if eps == 0.0:
        return t.copy()
    return (t * (1.0 - eps) + eps / num_classes).astype(np.float32)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixup(batch: SoftBatch, alpha: float, rng: np.random.Generator) -> SoftBatch:
    """Convex-combine each sample with a permuted partner, lam ~ Beta(a, a)."""
    b = len(batch.images)
    if b < 2:
        warnings.warn("mixup skipped: batch size < 2")
        return batch
    lam = np.float32(rng.beta(alpha, alpha))
    perm = rng.permutation(b)
    images = lam * batch.images + (1.0 - lam) * batch.images[perm]
    targets = lam * batch.targets + (1.0 - lam) * batch.targets[perm]
    return SoftBatch(images.astype(np.float32), targets.astype(np.float32))


def cutmix(batch: SoftBatch, alpha: float, rng: np.random.Generator) -> SoftBatch:
    """Paste a partner rectangle; label weight is the exact kept-area ratio."""
    b = len(batch.images)
    if b < 2:
        warnings.warn("cutmix skipped: batch size < 2")
        return batch
    h, w = batch.images.shape[-2:]
    lam = rng.beta(alpha, alpha)
    perm = rng.permutation(b)
    cut = np.sqrt(1.0 - lam)
    ch, cw = int(np.round(h * cut)), int(np.round(w * cut))
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    y0, y1 = np.clip([cy - ch // 2, cy + (ch + 1) // 2], 0, h)
    x0, x1 = np.clip([cx - cw // 2, cx + (cw + 1) // 2], 0, w)
    area = (y1 - y0) * (x1 - x0)
    images = batch.images.copy()
    images[:, :, y0:y1, x0:x1] = batch.images[perm][:, :, y0:y1, x0:x1]
    lam_adj = np.float32(1.0 - area / (h * w))
    targets = lam_adj * batch.targets + (1.0 - lam_adj) * batch.targets[perm]
    return SoftBatch(images, targets.astype(np.float32))


def random_erase(image: np.ndarray, prob: float, area_range: tuple[float, float],
                 rng: np.random.Generator, max_attempts: int = 10) -> np.ndarray:
    """Fill a random rectangle with standard-normal noise (post-normalization
    space) with probability `prob`; skipped if no rectangle fits."""
    if rng.random() >= prob:
        return image
    h, w = image.shape[-2:]
    for _ in range(max_attempts):
        frac = rng.uniform(*area_range)
        aspect = rng.uniform(0.3, 3.3)
        target = frac * h * w
        eh = int(np.round(np.sqrt(target * aspect)))
        ew = int(np.round(np.sqrt(target / aspect)))
        if eh < 1 or ew < 1 or eh > h or ew > w:
            continue
        y = int(rng.integers(0, h - eh + 1))
        x = int(rng.integers(0, w - ew + 1))
        out = image.copy()
        out[:, y:y + eh, x:x + ew] = rng.standard_normal((image.shape[0], eh, ew)).astype(image.dtype)
        return out
    return image


def repeated_indices(order: np.ndarray, batch_size: int, m: int):
    """Yield batches of indices where B/m distinct sources each appear m times."""
    if batch_size % m != 0:
        raise ValueError(f"repeat factor {m} must divide batch size {batch_size}")
    if m > batch_size:
        raise ValueError("repeat factor exceeds batch size")
    per = batch_size // m
    for start in range(0, len(order) - per + 1, per):
        src = order[start:start + per]
        yield np.repeat(src, m)


# ---------------------------------------------------------------------------
# raw-space base augmentation

_ENHANCE_MAX = 0.9      # enhancement factor range: 1 +- level/9 * 0.9
_SHEAR_MAX = 0.3
_TRANSLATE_MAX = 10     # pixels at level 9
_ROTATE_MAX = 30.0      # degrees at level 9


def load_policy(path=None) -> list[list[tuple[str, float, int]]]:
    """Parse the embedded sub-policy table (one per line, op,p,level;op,p,level)."""
    if path is None:
        text = resources.files("tinyvitlab").joinpath("autoaugment_cifar10.txt").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    policy = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        stages = []
        for stage in line.split(";"):
            op, p, m = stage.split(",")
            stages.append((op, float(p), int(m)))
        policy.append(stages)
    return policy


_POLICY_CACHE: list | None = None


def _policy() -> list:
    global _POLICY_CACHE
    if _POLICY_CACHE is None:
        _POLICY_CACHE = load_policy()
    return _POLICY_CACHE


def _sample_coords(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = image.shape[-2:]
    ys = np.clip(np.rint(ys).astype(int), 0, h - 1)
    xs = np.clip(np.rint(xs).astype(int), 0, w - 1)
    return image[:, ys, xs]


def _affine(image: np.ndarray, inv) -> np.ndarray:
    """Nearest-neighbor resample with clamp-to-edge source coordinates."""
    h, w = image.shape[-2:]
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sy, sx = inv(yy, xx)
    return _sample_coords(image, sy, sx)


def shear_x(image, mag):
    return _affine(image, lambda y, x: (y, x + mag * y))


def shear_y(image, mag):
    return _affine(image, lambda y, x: (y + mag * x, x))


def translate_x(image, px):
    return _affine(image, lambda y, x: (y, x - px))


def translate_y(image, px):
    return _affine(image, lambda y, x: (y - px, x))


def rotate(image, degrees):
    h, w = image.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = np.deg2rad(degrees)
    c, s = np.cos(rad), np.sin(rad)

    def inv(y, x):
        dy, dx = y - cy, x - cx
        return cy + c * dy - s * dx, cx + s * dy + c * dx

    return _affine(image, inv)


def _gray(image: np.ndarray) -> np.ndarray:
    lum = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    return np.broadcast_to(lum, image.shape)


def _blend(base: np.ndarray, image: np.ndarray, factor: float) -> np.ndarray:
    out = base + factor * (image.astype(np.float64) - base)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def color(image, factor):
    return _blend(_gray(image), image, factor)


def contrast(image, factor):
    mean = np.rint(_gray(image).mean())
    return _blend(np.full_like(image, mean, dtype=np.float64), image, factor)


def brightness(image, factor):
    return _blend(np.zeros_like(image, dtype=np.float64), image, factor)


def sharpness(image, factor):
    kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
    smooth = np.stack([ndimage.convolve(ch.astype(np.float64), kernel, mode="nearest")
                       for ch in image])
    return _blend(smooth, image, factor)


def posterize(image, bits):
    mask = np.uint8(0xFF & ~((1 << (8 - bits)) - 1))
    return image & mask


def solarize(image, threshold):
    return np.where(image >= threshold, 255 - image.astype(np.int16), image).astype(np.uint8)


def invert(image):
    return 255 - image


def autocontrast(image):
    out = np.empty_like(image)
    for c in range(image.shape[0]):
        ch = image[c]
        lo, hi = int(ch.min()), int(ch.max())
        if hi <= lo:
            out[c] = ch
        else:
            scale = 255.0 / (hi - lo)
            out[c] = np.clip(np.rint((ch.astype(np.float64) - lo) * scale), 0, 255).astype(np.uint8)
    return out


def equalize(image):
    out = np.empty_like(image)
    for c in range(image.shape[0]):
        ch = image[c]
        hist = np.bincount(ch.reshape(-1), minlength=256)
        nonzero = hist[hist > 0]
        if len(nonzero) <= 1:
            out[c] = ch
            continue
        step = (hist.sum() - nonzero[-1]) // 255
        if step == 0:
            out[c] = ch
            continue
        lut = (np.cumsum(hist) - hist + step // 2) // step
        out[c] = np.clip(lut, 0, 255).astype(np.uint8)[ch]
    return out


def _signed(rng: np.random.Generator, value: float) -> float:
    return -value if rng.random() < 0.5 else value


def apply_policy_op(image: np.ndarray, op: str, level: int,
                    rng: np.random.Generator) -> np.ndarray:
    frac = level / 9.0
    if op == "shear_x":
        return shear_x(image, _signed(rng, frac * _SHEAR_MAX))
    if op == "shear_y":
        return shear_y(image, _signed(rng, frac * _SHEAR_MAX))
    if op == "translate_x":
        return translate_x(image, _signed(rng, frac * _TRANSLATE_MAX))
    if op == "translate_y":
        return translate_y(image, _signed(rng, frac * _TRANSLATE_MAX))
    if op == "rotate":
        return rotate(image, _signed(rng, frac * _ROTATE_MAX))
    if op in ("color", "contrast", "brightness", "sharpness"):
        factor = 1.0 + _signed(rng, frac * _ENHANCE_MAX)
        return {"color": color, "contrast": contrast,
                "brightness": brightness, "sharpness": sharpness}[op](image, factor)
    if op == "posterize":
        return posterize(image, 8 - int(frac * 4))
    if op == "solarize":
        return solarize(image, int(256 - frac * 256))
    if op == "autocontrast":
        return autocontrast(image)
    if op == "equalize":
        return equalize(image)
    if op == "invert":
        return invert(image)
    raise ValueError(f"unknown policy op {op!r}")


def base_augment(image: np.ndarray, use_autoaugment: bool,
                 rng: np.random.Generator) -> np.ndarray:
    """Pad-4-reflect + random crop + horizontal flip, then optionally one
    uniformly drawn sub-policy from the fixed CIFAR-10 table. Raw pixel space."""
    h, w = image.shape[-2:]
    padded = np.pad(image, ((0, 0), (4, 4), (4, 4)), mode="reflect")
    oy, ox = int(rng.integers(0, 9)), int(rng.integers(0, 9))
    out = padded[:, oy:oy + h, ox:ox + w]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    out = np.ascontiguousarray(out)
    if use_autoaugment:
        policy = _policy()
        sub = policy[int(rng.integers(0, len(policy)))]
        for op, p, level in sub:
            if rng.random() < p:
                out = apply_policy_op(out, op, level, rng)
    return out
