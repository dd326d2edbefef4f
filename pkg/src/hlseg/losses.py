"""Pixel-weighting objectives for segmentation.

Everything accepts a single image ([K,H,W] logits, [H,W] labels) or a batch
([N,K,H,W], [N,H,W]).  Per-image quantities are normalised per image and
batch losses are the mean over images.

The hardness objective is built from four pieces:

* ``pixel_ce``: per-pixel cross-entropy map L.
* ``hardness_level``: H = (sigmoid(D) + c) / sum_valid(sigmoid(D) + c).
* ``hl_branch_loss``: -sum(H * L^d), with L^d the detached loss map.
* ``weighted_seg_loss``: sum(H^d * L), with H^d the detached hardness map.

``total_loss`` adds them as L_s + alpha * L_h.  The detach calls are made by
the caller (see ``hl_objective``); the two branch losses refuse inputs that
still carry lineage on the side that must be constant.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

VARIANTS = ("ce", "balanced", "ohem", "focal", "hl")


@dataclass
class LossConfig:
    variant: str = "hl"
    c: float = 0.1
    alpha: float = 0.01
    focal_gamma: float = 2.0
    ohem_threshold: float = 0.7
    ohem_min_kept: int = 512  # 1/8 of a 64x64 crop
    ignore_index: int = 255

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"loss variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.c > 0:
            raise ValueError(f"c must be > 0, got {self.c}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.focal_gamma >= 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if not 0 < self.ohem_threshold < 1:
            raise ValueError(f"ohem_threshold must lie in (0, 1), got {self.ohem_threshold}")
        if self.ohem_min_kept < 1:
            raise ValueError(f"ohem_min_kept must be >= 1, got {self.ohem_min_kept}")


@dataclass
class LossMap:
    L: ad.Tensor  # [N,1,H,W]
    valid: np.ndarray  # [N,H,W] bool


@dataclass
class HardnessMap:
    H: ad.Tensor  # [N,1,H,W]
    valid: np.ndarray  # [N,H,W] bool


def _batched(logits, labels):
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits = ad.reshape(logits, (1,) + logits.shape)
        labels = labels[None]
    return logits, labels


def pixel_ce(seg_logits, labels, ignore_index=255):
    logits, labels = _batched(seg_logits, labels)
    L = ad.cross_entropy_map(logits, labels, ignore_index)
    return LossMap(L, labels != ignore_index)


def hardness_level(D, c, valid):
    """Normalised hardness map; invalid pixels get exactly zero weight."""
    D = ad.as_tensor(D)
    valid = np.asarray(valid, dtype=bool)
    if D.ndim == 3:
        D = ad.reshape(D, (1,) + D.shape)
    if valid.ndim == 2:
        valid = valid[None]
    if not c > 0:
        raise ValueError(f"c must be > 0, got {c}")
    if D.shape != (valid.shape[0], 1) + valid.shape[1:]:
        raise ad.ShapeError(f"hardness_level: D {D.shape} vs mask {valid.shape}")
    counts = valid.reshape(valid.shape[0], -1).sum(axis=1)
    if (counts == 0).any():
        raise ValueError(f"hardness_level: image(s) {np.flatnonzero(counts == 0).tolist()} have no valid pixels")
    mask = ad.Tensor(valid[:, None])
    Z = (ad.sigmoid(D) + c) * mask
    return HardnessMap(Z / ad.tsum(Z, (1, 2, 3), keepdims=True), valid)


def _per_image_mean(x):
    return ad.tsum(x, (1, 2, 3)).mean()


def hl_branch_loss(H, L):
    """-sum_i H_i L^d_i per image, averaged over the batch."""
    Lt = L.L if isinstance(L, LossMap) else L
    Ht = H.H if isinstance(H, HardnessMap) else H
    if __debug__ and not ad.is_detached(Lt):
        raise ad.DetachError("hl_branch_loss needs the detached loss map; call autodiff.detach first")
    return -_per_image_mean(Ht * Lt)


def weighted_seg_loss(H, L):
    """sum_i H^d_i L_i per image, averaged over the batch."""
    Lt = L.L if isinstance(L, LossMap) else L
    Ht = H.H if isinstance(H, HardnessMap) else H
    if __debug__ and not ad.is_detached(Ht):
        raise ad.DetachError("weighted_seg_loss needs the detached hardness map; call autodiff.detach first")
    return _per_image_mean(Ht * Lt)


def total_loss(L_s, L_h, alpha):
    if not alpha >= 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return L_s + L_h * alpha


def hl_objective(seg_logits, D, labels, c=0.1, alpha=0.01, ignore_index=255):
    """Build (L_f, L_s, L_h, H, L) with the two-branch detach topology."""
    lm = pixel_ce(seg_logits, labels, ignore_index)
    hm = hardness_level(D, c, lm.valid)
    L_h = hl_branch_loss(hm.H, ad.detach(lm.L))
    L_s = weighted_seg_loss(ad.detach(hm.H), lm.L)
    return total_loss(L_s, L_h, alpha), L_s, L_h, hm, lm


# ---------------------------------------------------------------------------
# baselines


def _valid_counts(valid):
    counts = valid.reshape(valid.shape[0], -1).sum(axis=1)
    if (counts == 0).any():
        raise ValueError("loss needs at least one valid pixel per image")
    return counts


def _weighted_mean(L, weights):
    """Per-image sum(w * L), averaged over images; weights are constants."""
    return _per_image_mean(L * ad.Tensor(weights[:, None]))


def mean_ce(seg_logits, labels, ignore_index=255):
    lm = pixel_ce(seg_logits, labels, ignore_index)
    counts = _valid_counts(lm.valid)
    return _weighted_mean(lm.L, lm.valid / counts[:, None, None])


def balanced_ce(seg_logits, labels, ignore_index=255):
    """CE with per-pixel weight 1/count(class), rescaled to mean 1 per image."""
    lm = pixel_ce(seg_logits, labels, ignore_index)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    counts = _valid_counts(lm.valid)
    w = np.zeros(labels.shape, dtype=np.float64)
    for n in range(labels.shape[0]):
        lab = labels[n][lm.valid[n]]
        classes, freq = np.unique(lab, return_counts=True)
        per_class = np.zeros(int(classes.max()) + 1)
        per_class[classes] = 1.0 / freq
        wn = np.zeros(labels.shape[1:])
        wn[lm.valid[n]] = per_class[lab] * counts[n] / len(classes)
        w[n] = wn / counts[n]
    return _weighted_mean(lm.L, w)


def ohem_ce(seg_logits, labels, threshold=0.7, min_kept=512, ignore_index=255):
    """Mean CE over pixels with true-class probability below ``threshold``.

    When fewer than ``min_kept`` pixels qualify, the ``min_kept``
    highest-loss valid pixels are kept instead, ties going to the lower flat
    index.  Selection is per image.
    """
    if min_kept < 1:
        raise ValueError(f"min_kept must be >= 1, got {min_kept}")
    lm = pixel_ce(seg_logits, labels, ignore_index)
    _valid_counts(lm.valid)
    loss = lm.L.data[:, 0]
    # p < t  <=>  L > -ln t
    cut = -np.log(threshold)
    w = np.zeros(loss.shape, dtype=np.float64)
    for n in range(loss.shape[0]):
        flat_valid = np.flatnonzero(lm.valid[n])
        vals = loss[n].reshape(-1)[flat_valid]
        hard = vals > cut
        if hard.sum() >= min_kept:
            keep = flat_valid[hard]
        else:
            order = np.argsort(-vals, kind="stable")
            keep = flat_valid[order[: min(min_kept, len(flat_valid))]]
        wn = np.zeros(loss[n].size)
        wn[keep] = 1.0 / len(keep)
        w[n] = wn.reshape(loss[n].shape)
    return _weighted_mean(lm.L, w)


def focal(seg_logits, labels, gamma=2.0, ignore_index=255):
    """Mean over valid pixels of (1 - p_t)^gamma * (-log p_t)."""
    if not gamma >= 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    lm = pixel_ce(seg_logits, labels, ignore_index)
    counts = _valid_counts(lm.valid)
    p_t = ad.exp(-lm.L)
    modulated = (1.0 - p_t) ** gamma * lm.L
    return _weighted_mean(modulated, lm.valid / counts[:, None, None])


def segmentation_loss(cfg, seg_logits, labels, D=None):
    """Dispatch on ``cfg.variant``.

    Returns ``(L_f, parts)`` where ``parts`` holds L_s, L_h and, for the
    hardness variant, the hardness and loss maps.
    """
    v = cfg.variant
    if v == "hl":
        if D is None:
            raise ValueError("hl variant needs the hardness head output")
        L_f, L_s, L_h, hm, lm = hl_objective(seg_logits, D, labels, cfg.c, cfg.alpha, cfg.ignore_index)
        return L_f, {"L_s": L_s, "L_h": L_h, "H": hm, "L": lm}
    if v == "ce":
        loss = mean_ce(seg_logits, labels, cfg.ignore_index)
    elif v == "balanced":
        loss = balanced_ce(seg_logits, labels, cfg.ignore_index)
    elif v == "ohem":
        loss = ohem_ce(seg_logits, labels, cfg.ohem_threshold, cfg.ohem_min_kept, cfg.ignore_index)
    elif v == "focal":
        loss = focal(seg_logits, labels, cfg.focal_gamma, cfg.ignore_index)
    else:
        raise ValueError(f"unknown loss variant {v!r}")
    return loss, {"L_s": loss, "L_h": None}
