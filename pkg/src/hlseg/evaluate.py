"""Segmentation metrics, hardness-map analysis and run comparison."""

import math
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import hlt, pnm
from .losses import hardness_level
from .model import forward, load_checkpoint
from .rng import SplitMix64


def confusion_matrix(pred, labels, num_classes, ignore_index=255):
    """Rows are ground truth, columns prediction; ignored pixels are dropped."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction and label sizes differ: {pred.size} vs {labels.size}")
    keep = labels != ignore_index
    if ((labels[keep] < 0) | (labels[keep] >= num_classes)).any():
        raise ValueError(f"labels outside [0, {num_classes})")
    idx = labels[keep] * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def miou(cm):
    """Mean IoU over classes present in truth or prediction.

    Returns ``(mean, per_class)`` with NaN for classes whose union is empty.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    if not (union > 0).any():
        raise ValueError("confusion matrix is empty: no class has a non-empty union")
    per_class = np.full(len(tp), np.nan)
    present = union > 0
    per_class[present] = tp[present] / union[present]
    return float(per_class[present].mean()), per_class


def fw_iou(cm):
    """Frequency-weighted IoU: per-class IoU weighted by the class's share of true pixels.

    Suited to pixel subsets whose class mix is far from the dataset's, where a
    handful of pixels of a rare class would otherwise carry a full class's weight.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    truth = cm.sum(axis=1)
    union = truth + cm.sum(axis=0) - tp
    seen = truth > 0
    return float((truth[seen] / total * tp[seen] / union[seen]).sum())


# ---------------------------------------------------------------------------
# inference


@dataclass
class Inference:
    preds: np.ndarray  # [N,H,W] int
    H: np.ndarray = None  # [N,H,W] hardness maps, or None without a hardness head


def infer(params, samples, c=0.1, ignore_index=255, batch=25):
    preds, maps = [], []
    for start in range(0, len(samples), batch):
        chunk = samples[start : start + batch]
        images = np.stack([s.image for s in chunk])
        out = forward(params, images)
        preds.append(out.seg_logits.data.argmax(axis=1))
        if out.hardness_raw is not None:
            valid = np.stack([s.labels != ignore_index for s in chunk])
            # images without labels still get a map: normalise over all pixels
            valid[~valid.reshape(len(chunk), -1).any(axis=1)] = True
            maps.append(hardness_level(out.hardness_raw, c, valid).H.data[:, 0])
    return Inference(np.concatenate(preds), np.concatenate(maps) if maps else None)


# ---------------------------------------------------------------------------
# hardness-quantile analysis


@dataclass
class QuantileCurve:
    cms: list = field(default_factory=list)  # per-bin confusion matrices, hardest first
    miou: list = field(default_factory=list)
    fwiou: list = field(default_factory=list)
    per_class: list = field(default_factory=list)
    sizes: list = field(default_factory=list)


def hardness_quantile_iou(H_maps, preds, labels, n_bins, num_classes, ignore_index=255):
    """Pool valid pixels, sort by hardness descending, split into equal bins.

    Ties keep pooled pixel order (image order, then flat index).
    """
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    H = np.concatenate([np.asarray(h).reshape(-1) for h in H_maps])
    P = np.concatenate([np.asarray(p).reshape(-1) for p in preds])
    Y = np.concatenate([np.asarray(y).reshape(-1) for y in labels])
    if not H.size == P.size == Y.size:
        raise ValueError(f"inconsistent sizes: H {H.size}, preds {P.size}, labels {Y.size}")
    keep = np.flatnonzero(Y != ignore_index)
    order = keep[np.argsort(-H[keep], kind="stable")]
    curve = QuantileCurve()
    for part in np.array_split(order, n_bins):
        cm = confusion_matrix(P[part], Y[part], num_classes, ignore_index)
        curve.cms.append(cm)
        curve.sizes.append(len(part))
        if cm.sum():
            m, pc = miou(cm)
            fw = fw_iou(cm)
        else:
            m, pc, fw = float("nan"), np.full(num_classes, np.nan), float("nan")
        curve.miou.append(m)
        curve.fwiou.append(fw)
        curve.per_class.append(pc)
    return curve


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _minmax(a):
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full_like(a, 0.5)
    return (a - lo) / (hi - lo)


def _filter(x, g):
    """Separable 'valid' filtering with the 1-D kernel g."""
    k = len(g)
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def ssim(a, b, rescale="shared", window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over all fully-contained Gaussian windows.

    ``rescale`` chooses how the maps reach [0, 1] first: ``"shared"`` applies
    one affine map fitted to the pooled min/max, ``"each"`` min-max scales
    each map separately, ``None`` uses the values as given.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two 2-D maps of equal shape, got {a.shape} and {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"maps of shape {a.shape} are smaller than the {window}x{window} window")
    if rescale == "shared":
        lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
        span = hi - lo if hi > lo else 1.0
        a, b = (a - lo) / span, (b - lo) / span
    elif rescale == "each":
        a, b = _minmax(a), _minmax(b)
    elif rescale is not None:
        raise ValueError(f"unknown rescale mode {rescale!r}")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    saa = _filter(a * a, g) - mu_a**2
    sbb = _filter(b * b, g) - mu_b**2
    sab = _filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# map rendering


def render_map(values, path):
    """Min-max scale to 8-bit PGM; write ``<path>.txt`` with the range used."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        pix = np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
        note = ""
    else:
        pix = np.full(v.shape, 128, dtype=np.uint8)
        note = "degenerate = true\n"
    pnm.write(path, pix)
    with open(path + ".txt", "w") as fh:
        fh.write(f"min = {lo!r}\nmax = {hi!r}\n{note}")


def read_rendered(path):
    """Invert ``render_map`` up to 8-bit quantisation."""
    pix = pnm.read(path).astype(np.float64)
    vals = {}
    with open(path + ".txt") as fh:
        for line in fh:
            k, _, v = line.partition("=")
            vals[k.strip()] = v.strip()
    lo, hi = float(vals["min"]), float(vals["max"])
    if vals.get("degenerate") == "true":
        return np.full(pix.shape, lo)
    return lo + pix / 255.0 * (hi - lo)


def export_maps(run_dir, out_dir):
    """Render every dumped .hlt map of a run (or a bare map directory) to PGM."""
    src = os.path.join(run_dir, "maps")
    if not os.path.isdir(src):
        src = run_dir
    names = sorted(n for n in os.listdir(src) if n.endswith(".hlt")) if os.path.isdir(src) else []
    if not names:
        raise FileNotFoundError(f"no .hlt map dumps under {run_dir}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name in names:
        target = os.path.join(out_dir, name[:-4] + ".pgm")
        render_map(hlt.load(os.path.join(src, name)), target)
        written.append(target)
    return written


@dataclass
class Overlap:
    observed: float  # share of top-hardness pixels on the target classes
    baseline: float  # mean share under the permutation null
    p_value: float  # one-sided, with the +1 correction


def top_hardness_overlap(H_maps, labels, classes, top_frac=0.01, n_perm=200, seed=0, ignore_index=255):
    """Share of each image's top ``top_frac`` hardness pixels on ``classes``.

    The null shuffles hardness values among the valid pixels of each image,
    which makes the top set a uniformly random subset of the same size.
    """
    if n_perm < 1:
        raise ValueError(f"n_perm must be >= 1, got {n_perm}")
    rng = SplitMix64(seed, "overlap")
    hits, total = 0, 0
    null_hits = np.zeros(n_perm, dtype=np.int64)
    for H, y in zip(H_maps, labels):
        H, y = np.asarray(H).reshape(-1), np.asarray(y).reshape(-1)
        valid = np.flatnonzero(y != ignore_index)
        if not len(valid):
            continue
        k = max(1, int(math.ceil(top_frac * len(valid))))
        on_target = np.isin(y[valid], classes)
        top = np.argsort(-H[valid], kind="stable")[:k]
        hits += int(on_target[top].sum())
        total += k
        for p in range(n_perm):
            pick = np.argsort(rng.uniform(len(valid)), kind="stable")[:k]
            null_hits[p] += int(on_target[pick].sum())
    if not total:
        raise ValueError("no valid pixels to rank")
    p_value = (1 + int((null_hits >= hits).sum())) / (n_perm + 1)
    return Overlap(hits / total, float(null_hits.mean() / total), p_value)


# ---------------------------------------------------------------------------
# run comparison


def _read_run_config(run_dir):
    from .trainer import load_config

    return load_config(os.path.join(run_dir, "config.txt"))


@dataclass
class RunResult:
    name: str
    variant: str
    seed: int
    miou: float
    per_class: np.ndarray
    inference: Inference = None
    curve: QuantileCurve = None


def evaluate_run(run_dir, samples):
    cfg = _read_run_config(run_dir)
    params = load_checkpoint(os.path.join(run_dir, "final"))
    inf = infer(params, samples, cfg.loss.c, cfg.loss.ignore_index)
    labels = np.stack([s.labels for s in samples])
    cm = confusion_matrix(inf.preds, labels, cfg.model.num_classes, cfg.loss.ignore_index)
    m, pc = miou(cm)
    name = os.path.basename(os.path.normpath(run_dir))
    return RunResult(name, cfg.loss.variant, cfg.seed, m, pc, inf)


def compare_runs(run_dirs, samples, out_dir=None, n_bins=10, class_names=None):
    """Evaluate runs on ``samples`` and tabulate them.

    Quantile curves bin pixels by the hardness maps of the hl run with the
    same seed, so every variant is scored on identical pixel subsets.
    """
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two runs")
    results = [evaluate_run(d, samples) for d in run_dirs]
    k = len(results[0].per_class)
    if any(len(r.per_class) != k for r in results):
        raise ValueError("runs disagree on the number of classes")
    class_names = list(class_names or [f"class{i}" for i in range(k)])
    labels = [s.labels for s in samples]
    reference = {r.seed: r.inference.H for r in results if r.variant == "hl"}
    for r in results:
        H = reference.get(r.seed)
        if H is not None:
            r.curve = hardness_quantile_iou(H, r.inference.preds, labels, n_bins, k)

    rows = []
    header = ["run", "variant", "seed", "mIoU"] + [f"IoU_{n}" for n in class_names]
    header += ["hardest_bin_fwIoU", "easiest_bin_fwIoU", "hardest_bin_mIoU", "easiest_bin_mIoU"]
    for r in results:
        row = [r.name, r.variant, str(r.seed), f"{r.miou:.6f}"] + [f"{v:.6f}" for v in r.per_class]
        if r.curve is not None:
            c = r.curve
            row += [f"{v:.6f}" for v in (c.fwiou[0], c.fwiou[-1], c.miou[0], c.miou[-1])]
        else:
            row += ["nan"] * 4
        rows.append(row)

    summary = []
    for variant in sorted({r.variant for r in results}):
        vals = np.array([r.miou for r in results if r.variant == variant])
        spread = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        summary.append((variant, len(vals), float(vals.mean()), spread))
    ce = {r.seed: r for r in results if r.variant == "ce"}
    deltas = [
        (r.name, r.seed, r.miou - ce[r.seed].miou)
        for r in results
        if r.variant != "ce" and r.seed in ce
    ]

    report = {"header": header, "rows": rows, "summary": summary, "deltas": deltas, "results": results}
    if out_dir:
        write_report(report, out_dir)
    return report


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.tsv"), "w") as fh:
        fh.write("\t".join(report["header"]) + "\n")
        for row in report["rows"]:
            fh.write("\t".join(row) + "\n")
    lines = ["per-run results", ""]
    width = max(len(r[0]) for r in report["rows"])
    for row in report["rows"]:
        lines.append(f"  {row[0]:<{width}}  {row[1]:<8}  seed {row[2]:>3}  mIoU {float(row[3]):.4f}")
    lines += ["", "by variant (mean +- sample std over seeds)", ""]
    for variant, n, m, s in report["summary"]:
        lines.append(f"  {variant:<8}  n={n}  mIoU {m:.4f} +- {s:.4f}")
    if report["deltas"]:
        lines += ["", "per-seed delta vs ce", ""]
        for name, seed, d in report["deltas"]:
            lines.append(f"  {name:<{width}}  seed {seed:>3}  {d:+.4f}")
    curves = [r for r in report.get("results", []) if r.curve is not None]
    if curves:
        lines += ["", "frequency-weighted IoU by hardness bin, hardest first", ""]
        for r in curves:
            lines.append(f"  {r.name:<{width}}  " + " ".join(f"{v:.3f}" for v in r.curve.fwiou))
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
