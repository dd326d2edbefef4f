"""Procedural labelled scenes, augmentation, and on-disk datasets.

A scene is a flat background with smooth elliptical blobs (class 1), thin
1-2 px curves (class 2, "poles") and tiny 2-4 px discs (class 3, "dots").
Structures are painted in that order; wherever a later structure touches an
earlier one of a different class, the occluded pixel on the seam is marked
with the ignore label.
"""

import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np

from . import pnm
from .autodiff import interp_matrix
from .hlt import FormatError
from .rng import SplitMix64

BACKGROUND, BLOB, POLE, DOT = 0, 1, 2, 3
CLASS_NAMES = ("background", "blob", "pole", "dot")
BASE_COLORS = np.array(
    [
        [0.40, 0.52, 0.38],
        [0.72, 0.38, 0.30],
        [0.30, 0.30, 0.52],
        [0.80, 0.50, 0.30],
    ]
)


@dataclass
class SceneConfig:
    image_size: tuple = (64, 64)
    num_classes: int = 4
    blobs: tuple = (1, 3)
    blob_radius: tuple = (5.0, 14.0)
    poles: tuple = (1, 2)
    pole_width: tuple = (1, 2)
    dots: tuple = (1, 3)
    dot_diameter: tuple = (2, 4)
    noise_sigma: float = 0.08
    color_jitter: float = 0.05
    ignore_index: int = 255
    seed: int = 0

    def validate(self):
        h, w = self.image_size
        if self.num_classes != 4:
            raise ValueError("the scene generator paints exactly 4 classes")
        if min(h, w) < 16:
            raise ValueError(f"image_size {h}x{w} is too small (need at least 16x16)")
        if self.blobs[0] < 0 or self.poles[0] < 1 or self.dots[0] < 1:
            raise ValueError("every scene needs at least one pole and one dot")
        if self.dot_diameter[0] < 2 or self.pole_width[0] < 1:
            raise ValueError("dot diameter must be >= 2 and pole width >= 1")


@dataclass
class SceneSample:
    image: np.ndarray  # float32 [3,H,W] in [0,1]
    labels: np.ndarray  # uint8 [H,W]


# ---------------------------------------------------------------------------
# generation


def _paint(cls_map, ids, mask, cls):
    ids[mask] = ids.max() + 1
    cls_map[mask] = cls


def _ellipse(h, w, rng, rmin, rmax):
    cy, cx = rng.uniform(None, 0, h - 1), rng.uniform(None, 0, w - 1)
    a, b = rng.uniform(None, rmin, rmax), rng.uniform(None, rmin, rmax)
    th = rng.uniform(None, 0, math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(th) + dy * math.sin(th)
    v = -dx * math.sin(th) + dy * math.cos(th)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _curve(h, w, rng, width):
    """Quadratic Bezier between two far-apart points, stamped width x width."""
    m = 2
    while True:
        p0 = np.array([rng.uniform(None, m, h - 1 - m), rng.uniform(None, m, w - 1 - m)])
        p2 = np.array([rng.uniform(None, m, h - 1 - m), rng.uniform(None, m, w - 1 - m)])
        if np.hypot(*(p2 - p0)) >= 0.5 * min(h, w):
            break
    p1 = np.array([rng.uniform(None, m, h - 1 - m), rng.uniform(None, m, w - 1 - m)])
    t = np.linspace(0.0, 1.0, 4 * (h + w))[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
    rows = np.clip(np.round(pts[:, 0]).astype(int), 0, h - width)
    cols = np.clip(np.round(pts[:, 1]).astype(int), 0, w - width)
    mask = np.zeros((h, w), dtype=bool)
    for dy in range(width):
        for dx in range(width):
            mask[rows + dy, cols + dx] = True
    return mask


def _disc(h, w, rng, diameter):
    r = diameter / 2.0
    off = 0.5 if diameter % 2 == 0 else 0.0
    cy = rng.integers(diameter, h - diameter) + off
    cx = rng.integers(diameter, w - diameter) + off
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _seams(ids, cls_map):
    """Pixels of an earlier structure bordering a later one of another class."""
    h, w = ids.shape
    seam = np.zeros((h, w), dtype=bool)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        a = (slice(max(0, -dy), h - max(0, dy)), slice(max(0, -dx), w - max(0, dx)))
        b = (slice(max(0, dy), h - max(0, -dy)), slice(max(0, dx), w - max(0, -dx)))
        hit = (ids[a] > 0) & (ids[b] > ids[a]) & (cls_map[b] != cls_map[a])
        seam[a] |= hit
    return seam


def generate(cfg, index):
    """Deterministic scene number ``index`` for ``cfg.seed``."""
    h, w = cfg.image_size
    rng = SplitMix64(cfg.seed, "scene", index)
    cls_map = np.zeros((h, w), dtype=np.int64)
    ids = np.zeros((h, w), dtype=np.int64)
    for _ in range(rng.integers(cfg.blobs[0], cfg.blobs[1] + 1)):
        _paint(cls_map, ids, _ellipse(h, w, rng, *cfg.blob_radius), BLOB)
    for _ in range(rng.integers(cfg.poles[0], cfg.poles[1] + 1)):
        width = rng.integers(cfg.pole_width[0], cfg.pole_width[1] + 1)
        _paint(cls_map, ids, _curve(h, w, rng, width), POLE)
    for _ in range(rng.integers(cfg.dots[0], cfg.dots[1] + 1)):
        d = rng.integers(cfg.dot_diameter[0], cfg.dot_diameter[1] + 1)
        _paint(cls_map, ids, _disc(h, w, rng, d), DOT)

    colors = BASE_COLORS + cfg.color_jitter * rng.normal((4, 3))
    img = colors[cls_map].transpose(2, 0, 1)
    if cfg.noise_sigma > 0:
        img = img + cfg.noise_sigma * SplitMix64(cfg.seed, "noise", index).normal(img.shape)
    # quantise to the 8-bit grid so that PPM storage is lossless
    img = _from_u8(_to_u8(img))

    labels = cls_map.astype(np.uint8)
    labels[_seams(ids, cls_map)] = cfg.ignore_index
    return SceneSample(img, labels)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugParams:
    scale: float = 1.0
    flip: bool = False
    offset: tuple = (0, 0)  # crop origin in the rescaled image; negative pads
    brightness: float = 0.0
    contrast: float = 1.0


def draw_aug_params(aug_seed, src_size, out_size, jitter=True):
    rng = SplitMix64(aug_seed, "aug")
    scale = rng.uniform(None, 0.5, 2.0)
    flip = rng.uniform() < 0.5
    scaled = [max(1, int(round(s * scale))) for s in src_size]
    offset = []
    for s, o in zip(scaled, out_size):
        lo, hi = min(0, s - o), max(0, s - o)
        offset.append(rng.integers(lo, hi + 1))
    b = rng.uniform(None, -0.1, 0.1)
    c = rng.uniform(None, 0.8, 1.2)
    if not jitter:
        b, c = 0.0, 1.0
    return AugParams(scale, flip, tuple(offset), b, c)


def _nearest_index(n_out, n_in):
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def apply_augment(sample, params, out_size, ignore_index=255):
    img, lab = sample.image, sample.labels
    h, w = lab.shape
    sh, sw = max(1, int(round(h * params.scale))), max(1, int(round(w * params.scale)))
    if (sh, sw) != (h, w):
        ah, aw = interp_matrix(sh, h), interp_matrix(sw, w)
        img = (ah @ img.astype(np.float64) @ aw.T).astype(np.float32)
        lab = lab[_nearest_index(sh, h)][:, _nearest_index(sw, w)]
    if params.flip:
        img, lab = img[:, :, ::-1], lab[:, ::-1]

    oh, ow = out_size
    out_img = np.zeros((3, oh, ow), dtype=np.float32)
    out_lab = np.full((oh, ow), ignore_index, dtype=np.uint8)
    oy, ox = params.offset
    # intersection of the crop window [oy, oy+oh) with the source [0, sh)
    sy0, sy1 = max(oy, 0), min(oy + oh, sh)
    sx0, sx1 = max(ox, 0), min(ox + ow, sw)
    if sy1 > sy0 and sx1 > sx0:
        out_img[:, sy0 - oy : sy1 - oy, sx0 - ox : sx1 - ox] = img[:, sy0:sy1, sx0:sx1]
        out_lab[sy0 - oy : sy1 - oy, sx0 - ox : sx1 - ox] = lab[sy0:sy1, sx0:sx1]

    if params.contrast != 1.0 or params.brightness != 0.0:
        m = out_img.mean()
        out_img = np.clip((out_img - m) * params.contrast + m + params.brightness, 0.0, 1.0).astype(np.float32)
    return SceneSample(np.ascontiguousarray(out_img), np.ascontiguousarray(out_lab))


def augment(sample, aug_seed, out_size=None, jitter=True, ignore_index=255):
    """Random scale in [0.5, 2], flip, crop (padding with ignore) and jitter."""
    out_size = tuple(out_size or sample.labels.shape)
    params = draw_aug_params(aug_seed, sample.labels.shape, out_size, jitter)
    return apply_augment(sample, params, out_size, ignore_index)


# ---------------------------------------------------------------------------
# datasets on disk


def _to_u8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def _from_u8(pixels):
    return np.ascontiguousarray(pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def _digest(*paths):
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def write_dataset(directory, cfg, n, start=0):
    """Write scenes ``start .. start+n-1`` as PPM/PGM pairs plus a manifest."""
    cfg.validate()
    os.makedirs(directory, exist_ok=True)
    h, w = cfg.image_size
    lines = [f"# seed = {cfg.seed}", f"# image_size = {h}x{w}", f"# num_classes = {cfg.num_classes}"]
    for index in range(start, start + n):
        s = generate(cfg, index)
        img_name, lbl_name = f"img_{index:05d}.ppm", f"lbl_{index:05d}.pgm"
        pnm.write(os.path.join(directory, img_name), _to_u8(s.image))
        pnm.write(os.path.join(directory, lbl_name), s.labels)
        digest = _digest(os.path.join(directory, img_name), os.path.join(directory, lbl_name))
        lines.append(f"{index}\t{img_name}\t{lbl_name}\t{digest}")
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(directory):
    path = os.path.join(directory, "manifest.txt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no dataset manifest at {path}")
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}: line {lineno} has {len(parts)} fields, expected 4")
            entries.append((int(parts[0]), parts[1], parts[2], parts[3]))
    return entries


def read_sample(directory, index):
    """Load the scene with generation index ``index`` from ``directory``."""
    for idx, img_name, lbl_name, _ in read_manifest(directory):
        if idx == index:
            return _load_pair(directory, img_name, lbl_name)
    raise KeyError(f"scene {index} is not listed in {directory}/manifest.txt")


def _load_pair(directory, img_name, lbl_name):
    img = pnm.read(os.path.join(directory, img_name))
    lab = pnm.read(os.path.join(directory, lbl_name))
    if img.ndim != 3 or lab.ndim != 2 or img.shape[:2] != lab.shape:
        raise FormatError(f"{directory}: {img_name} {img.shape} and {lbl_name} {lab.shape} disagree")
    return SceneSample(_from_u8(img), lab)


def read_dataset(directory, verify=False):
    samples = []
    for idx, img_name, lbl_name, digest in read_manifest(directory):
        if verify:
            got = _digest(os.path.join(directory, img_name), os.path.join(directory, lbl_name))
            if got != digest:
                raise FormatError(f"{directory}: checksum mismatch for scene {idx}")
        samples.append(_load_pair(directory, img_name, lbl_name))
    return samples
