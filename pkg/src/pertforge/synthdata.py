"""Procedural dataset generator: seeded value-noise textures in three
styles (A, B, C). Every sample carries a feathered chroma stamp in a random
region; fake samples are tinted in the style's chroma direction, real ones
in a neutral direction. Every sample is a 3x64x64 float image with integer
values in [0, 255], a binary label (0 fake / 1 real) and a 64x64 binary
tamper mask.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractError, DataError

SIZE = 64

# Styles share the same content distribution (near-grayscale octave noise)
# and differ only in the chroma direction a tampered patch is tinted with —
# the stand-in for a camera/codec trace. Real images carry the same kind of
# stamp in a neutral direction distinct from every style tint, so "real" is
# positive evidence rather than mere absence of a trace. Stamp strength is
# drawn from a two-population mixture: a small mass of strong, large stamps
# and a dominant mass of faint, small ones. The strong population is what
# lets plain SGD escape the 50%-accuracy saddle at all; the faint majority
# forces the trained network into a steep response around zero evidence,
# which keeps most decisions close to the boundary and gives small-budget
# raw-gradient pixel attacks traction. Per-pixel chroma noise forces the
# models to key on regionally coherent tint rather than single pixels.
CHROMA_NOISE = 3.0
TINTS = {
    "A": (1.0, 0.0, -1.0),
    "B": (-1.0, 1.0, 0.0),
    "C": (0.0, -1.0, 1.0),
}
STYLES = tuple(sorted(TINTS))
REAL_DIRECTION = (0.0, 1.0, -1.0)
STRONG_FRACTION = 0.08
STRONG_DELTA = (30.0, 60.0)      # uniform
STRONG_AREA = (0.12, 0.30)
WEAK_DELTA = (2.5, 10.0)         # log-uniform
WEAK_AREA = (0.02, 0.09)


@dataclass
class DatasetSpec:
    seed: int = 0
    n_train: int = 600
    n_test: int = 200
    style: str = "A"

    def __post_init__(self):
        if self.style not in STYLES:
            raise ContractError(f"unknown style {self.style!r}")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ContractError("sample counts must be positive")


@dataclass
class Dataset:
    images: np.ndarray   # (N, 3, 64, 64) float32, integer-valued in [0, 255]
    labels: np.ndarray   # (N,) intp, 0 fake / 1 real
    masks: np.ndarray    # (N, 64, 64) uint8
    style: str
    ids: list


@dataclass
class SplitDataset:
    train: Dataset
    test: Dataset
    spec: DatasetSpec


def _upsample_bilinear(grid, size):
    src = grid.shape[0]
    pos = np.linspace(0.0, src - 1.0, size)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    rows = grid[i0] * (1.0 - frac)[:, None] + grid[i1] * frac[:, None]
    cols = rows[:, i0] * (1.0 - frac)[None, :] + rows[:, i1] * frac[None, :]
    return cols


def _content(rng):
    """Style-agnostic 3x64x64 base texture: near-grayscale octave value
    noise in roughly [30, 225], plus independent per-pixel chroma jitter."""
    field = np.zeros((SIZE, SIZE))
    weights = rng.uniform(0.4, 1.0, 3)
    for res, weight in zip((4, 8, 16), weights):
        field += weight * _upsample_bilinear(rng.random((res, res)), SIZE)
    field -= field.min()
    field /= max(field.max(), 1e-9)
    lo = rng.uniform(30, 110)
    hi = rng.uniform(150, 225)
    gray = lo * (1.0 - field) + hi * field
    jitter = rng.uniform(-CHROMA_NOISE, CHROMA_NOISE, (3, SIZE, SIZE))
    return gray[None] + jitter


def _tint(style):
    """Unit chroma direction a tampered patch is tinted with, per style."""
    vec = np.asarray(TINTS[style], dtype=np.float64)
    return vec[:, None, None]


def _fill_triangle(verts, h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    mask = np.ones((h, w), dtype=bool)
    pts = np.asarray(verts, dtype=np.float64)
    e1, e2 = pts[1] - pts[0], pts[2] - pts[0]
    area2 = e1[0] * e2[1] - e1[1] * e2[0]
    if abs(area2) < 1e-6:
        return None
    for i in range(3):
        a, b = pts[i], pts[(i + 1) % 3]
        side = (xs - a[0]) * (b[1] - a[1]) - (ys - a[1]) * (b[0] - a[0])
        mask &= (side * np.sign(area2)) <= 0
    return mask.astype(np.uint8)


def triangle_mask(seed, h=SIZE, w=SIZE):
    """Filled random triangle with area fraction in [0.05, 0.30]."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x791]))
    while True:
        verts = rng.uniform([0, 0], [w - 1, h - 1], size=(3, 2))
        mask = _fill_triangle(verts, h, w)
        if mask is None:
            continue
        frac = mask.mean()
        if 0.05 <= frac <= 0.30:
            return mask


def _ellipse_mask(rng, h, w):
    cy, cx = rng.uniform(12, h - 12), rng.uniform(12, w - 12)
    ry, rx = rng.uniform(6, 22), rng.uniform(6, 22)
    theta = rng.uniform(0, np.pi)
    ys, xs = np.mgrid[0:h, 0:w]
    dy, dx = ys - cy, xs - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.uint8)


def _tamper_region(rng, lo, hi):
    """Random ellipse or triangle with area fraction in [lo, hi]."""
    while True:
        if rng.random() < 0.5:
            mask = _ellipse_mask(rng, SIZE, SIZE)
        else:
            mask = _fill_triangle(
                rng.uniform([0, 0], [SIZE - 1, SIZE - 1], (3, 2)), SIZE, SIZE)
            if mask is None:
                continue
        if lo <= mask.mean() <= hi:
            return mask


def _stamp(rng):
    """(strength, region) from the strong/faint mixture."""
    if rng.random() < STRONG_FRACTION:
        return float(rng.uniform(*STRONG_DELTA)), _tamper_region(rng, *STRONG_AREA)
    lo, hi = np.log(WEAK_DELTA)
    return float(np.exp(rng.uniform(lo, hi))), _tamper_region(rng, *WEAK_AREA)


def _feather(mask):
    """Soft 2-pixel boundary: two passes of a 3x3 box blur over the mask."""
    alpha = mask.astype(np.float64)
    for _ in range(2):
        padded = np.pad(alpha, 1, mode="edge")
        acc = np.zeros_like(alpha)
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                acc += padded[dy:dy + SIZE, dx:dx + SIZE]
        alpha = acc / 9.0
    return alpha


def dilate(mask, steps=2):
    out = mask.astype(bool)
    for _ in range(steps):
        padded = np.pad(out, 1)
        grown = np.zeros_like(out)
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                grown |= padded[dy:dy + SIZE, dx:dx + SIZE]
        out = grown
    return out.astype(np.uint8)


def _real_image(style, rng):
    """Content plus a neutral-direction stamp from the strength mixture."""
    direction = np.asarray(REAL_DIRECTION, dtype=np.float64)[:, None, None]
    content = _content(rng)
    delta, mask = _stamp(rng)
    return np.clip(content + delta * direction * _feather(mask)[None],
                   0.0, 255.0)


def tampered_pair(style, rng):
    """(real image, fake image, mask): both share the content distribution
    and carry a mixture stamp; the fake's stamp is tinted in the style's
    chroma direction, feathered at the boundary."""
    content = _content(rng)
    direction = np.asarray(REAL_DIRECTION, dtype=np.float64)[:, None, None]
    d_real, m_real = _stamp(rng)
    d_fake, mask = _stamp(rng)
    base = np.clip(content + d_real * direction * _feather(m_real)[None],
                   0.0, 255.0)
    fake = np.clip(content + d_fake * _tint(style) * _feather(mask)[None],
                   0.0, 255.0)
    return np.rint(base).astype(np.float32), np.rint(fake).astype(np.float32), mask


def _make_split(spec, count, split_tag):
    images = np.empty((count, 3, SIZE, SIZE), dtype=np.float32)
    labels = np.empty(count, dtype=np.intp)
    masks = np.zeros((count, SIZE, SIZE), dtype=np.uint8)
    ids = []
    n_real = (count + 1) // 2
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, split_tag, i]))
        if i < n_real:
            images[i] = np.rint(_real_image(spec.style, rng)).astype(np.float32)
            labels[i] = 1
        else:
            _, fake, mask = tampered_pair(spec.style, rng)
            images[i] = fake
            labels[i] = 0
            masks[i] = mask
        ids.append(f"{spec.style}_{split_tag}_{i:05d}")
    return Dataset(images, labels, masks, spec.style, ids)


def generate(spec):
    """Deterministic train/test datasets for one style."""
    return SplitDataset(train=_make_split(spec, spec.n_train, 0),
                        test=_make_split(spec, spec.n_test, 1),
                        spec=spec)


# ---------------------------------------------------------------------------
# PNG persistence

def save_dataset(dataset, path):
    img_dir = os.path.join(path, "images")
    mask_dir = os.path.join(path, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    lines = []
    for i, sid in enumerate(dataset.ids):
        arr = dataset.images[i].transpose(1, 2, 0).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(os.path.join(img_dir, sid + ".png"))
        mask_file = f"masks/{sid}.png"
        Image.fromarray((dataset.masks[i] * 255).astype(np.uint8), "L").convert("1") \
            .save(os.path.join(path, mask_file))
        lines.append(f"{sid},{int(dataset.labels[i])},{dataset.style},{mask_file}")
    with open(os.path.join(path, "manifest.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    manifest = os.path.join(path, "manifest.csv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest at {manifest}")
    ids, labels, masks, images, style = [], [], [], [], None
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            sid, label, sty, mask_file = line.split(",")
            img = np.asarray(Image.open(os.path.join(path, "images", sid + ".png")))
            mask = np.asarray(Image.open(os.path.join(path, mask_file))).astype(np.uint8)
            if not np.isin(mask, (0, 1)).all():
                raise DataError(f"{mask_file}: mask is not binary")
            images.append(img.transpose(2, 0, 1).astype(np.float32))
            labels.append(int(label))
            masks.append(mask)
            ids.append(sid)
            style = sty
    return Dataset(np.stack(images), np.asarray(labels, np.intp),
                   np.stack(masks), style, ids)
