"""Fast invariant checks behind the ``gradcheck`` and ``selftest`` commands.

Each check returns ``(ok, detail)``.  They run in seconds on small random
inputs and share nothing with the pytest suite beyond the public API.
"""

import math

import numpy as np

from . import autodiff as ad
from . import losses as ls
from .autodiff import Tensor
from .model import ModelConfig, build_model, forward

TOL = 1e-3


def _rng(seed, *tag):
    return np.random.default_rng([seed, *tag])


def op_cases(seed):
    """(name, f, x) triples covering every differentiable op."""
    r = _rng(seed, 0)
    a = r.normal(size=(2, 8, 8))
    w = Tensor(r.normal(size=(2, 8, 8)))
    pos = np.abs(a) + 0.5
    kinky = np.where(np.abs(a) < 0.05, 0.5, a)
    b = Tensor(r.normal(size=(2, 8, 8)))
    labels = r.integers(0, 3, (1, 8, 8))
    labels[0, 0, 0] = 255
    conv_w = r.normal(size=(3, 2, 3, 3))
    conv_r = Tensor(r.normal(size=(3, 4, 4)))
    up_r = Tensor(r.normal(size=(2, 8, 8)))
    seg = Tensor(r.normal(size=(1, 3, 8, 8)))
    cat_r = Tensor(r.normal(size=(2, 16, 8)))
    return [
        ("add", lambda x: ((x + b) * w).sum(), a),
        ("sub", lambda x: ((b - x) * w).sum(), a),
        ("mul", lambda x: (x * x * w).sum(), a),
        ("div", lambda x: (w / x).sum(), pos),
        ("pow", lambda x: (x**1.5 * w).sum(), pos),
        ("exp", lambda x: (ad.exp(x) * w).sum(), a),
        ("log", lambda x: (ad.log(x) * w).sum(), pos),
        ("sigmoid", lambda x: (ad.sigmoid(x) * w).sum(), a * 3),
        ("relu", lambda x: (ad.relu(x) * w).sum(), kinky),
        ("sum", lambda x: (ad.tsum(x, 2, keepdims=True) ** 2).sum(), a),
        ("mean", lambda x: ad.mean(x * w), a),
        ("concat", lambda x: (ad.concat([x, b], axis=1) * cat_r).sum(), a),
        ("conv2d", lambda x: (ad.conv2d(x, Tensor(conv_w), stride=2, pad=1) * conv_r).sum(), a),
        ("conv2d.weight", lambda x: (ad.conv2d(Tensor(a), x, stride=2, pad=1) * conv_r).sum(), conv_w),
        ("upsample", lambda x: (ad.upsample_bilinear(x, (8, 8)) * up_r).sum(), a[:, :3, :5]),
        ("cross_entropy", lambda x: ad.cross_entropy_map(x, labels).sum(), r.normal(size=(1, 3, 8, 8))),
        (
            "L_f",
            lambda x: ls.hl_objective(x, Tensor(a[:1, None]), labels, 0.1, 0.5)[0],
            r.normal(size=(1, 3, 8, 8)),
        ),
        (
            "L_f.D",
            lambda x: ls.hl_objective(seg, x, labels, 0.1, 0.5)[0],
            a[:1, None],
        ),
    ]


def gradcheck_ops(seed=0):
    """Max relative error per op."""
    return {name: ad.grad_check(f, x) for name, f, x in op_cases(seed)}


def check_gradients(seed):
    errs = {}
    for s in range(seed, seed + 5):
        for name, e in gradcheck_ops(s).items():
            errs[name] = max(errs.get(name, 0.0), e)
    worst = max(errs, key=errs.get)
    return errs[worst] < TOL, f"worst {worst} {errs[worst]:.2e} over 5 seeds"


def check_hardness_bounds(seed):
    r = _rng(seed, 1)
    worst_sum, worst_ratio = 0.0, -math.inf
    for case in range(200):
        c = (0.01, 0.1, 0.5)[case % 3]
        D = r.normal(size=(1, 6, 6)) * r.uniform(0.1, 30)
        valid = r.random((6, 6)) < 0.8
        valid[0, 0] = True
        with ad.precision(np.float64):
            H = ls.hardness_level(D, c, valid).H.data[0, 0][valid]
        worst_sum = max(worst_sum, abs(H.sum() - 1))
        worst_ratio = max(worst_ratio, H.max() / H.min() - (1 + c) / c)
    ok = worst_sum <= 1e-5 and worst_ratio <= 1e-6
    return ok, f"|sum-1| {worst_sum:.1e}, ratio excess {worst_ratio:.1e}"


def check_branch_gradient(seed):
    r = _rng(seed, 2)
    L = r.random((1, 1, 5, 5)).astype(np.float32)
    H = Tensor(r.random((1, 1, 5, 5)), requires_grad=True)
    ls.hl_branch_loss(H, Tensor(L)).backward()
    ok = np.array_equal(H.grad, -L)
    return ok, "dL_h/dH == -L exactly" if ok else "dL_h/dH differs from -L"


def _group_grads(params):
    out = {}
    for n in params.names():
        g = params[n].grad
        out[params.groups[n]] = out.get(params.groups[n], False) or (g is not None and bool(np.any(g)))
    return out


def check_partition(seed):
    cfg = ModelConfig(num_classes=3, base_channels=4, depth=2, head_channels=6, input_size=(16, 16))
    r = _rng(seed, 3)
    for _ in range(3):
        params = build_model(cfg, int(r.integers(2**31)))
        image = r.random((2, 3, 16, 16)).astype(np.float32)
        labels = r.integers(0, 3, (2, 16, 16))
        for path in ("L_h", "L_s"):
            params.zero_grad()
            out = forward(params, image)
            _, L_s, L_h, _, _ = ls.hl_objective(out.seg_logits, out.hardness_raw, labels)
            (L_h if path == "L_h" else L_s).backward()
            live = _group_grads(params)
            expect = {"L_h": {"hl_head"}, "L_s": {"backbone", "seg_head"}}[path]
            if {g for g, on in live.items() if on} != expect:
                return False, f"{path} reached {sorted(g for g, on in live.items() if on)}"
    return True, "L_h reaches only hl_head, L_s never reaches it"


def check_reductions(seed):
    r = _rng(seed, 4)
    logits = r.normal(size=(2, 3, 6, 6)).astype(np.float32)
    labels = r.integers(0, 3, (2, 6, 6))
    labels[r.random(labels.shape) < 0.2] = 255
    labels[:, 0, 0] = 1
    ce = ls.mean_ce(logits, labels).item()
    gaps = {
        "focal": abs(ls.focal(logits, labels, 0.0).item() - ce),
        # a min_kept above the pixel count keeps every valid pixel
        "ohem": abs(ls.ohem_ce(logits, labels, 0.7, 10**9).item() - ce),
        "hl": abs(ls.hl_objective(logits, np.zeros((2, 1, 6, 6)), labels, 0.1, 0.0)[1].item() - ce),
    }
    worst = max(gaps, key=gaps.get)
    return gaps[worst] <= 1e-6, f"worst {worst} {gaps[worst]:.1e}"


def _scalar_objective(logits, D, labels, c, alpha):
    K = len(logits)
    cells = [(i, j) for i in range(len(labels)) for j in range(len(labels[0])) if labels[i][j] != 255]
    L, Z = {}, {}
    for i, j in cells:
        z = [logits[k][i][j] for k in range(K)]
        m = max(z)
        L[i, j] = m + math.log(sum(math.exp(v - m) for v in z)) - z[labels[i][j]]
        Z[i, j] = 1 / (1 + math.exp(-D[i][j])) + c
    total = sum(Z.values())
    L_s = sum(Z[p] / total * L[p] for p in cells)
    return L_s - alpha * L_s


def check_scalar_oracle(seed):
    r = _rng(seed, 5)
    worst = 0.0
    for _ in range(10):
        logits = r.normal(size=(3, 2, 2)) * 2
        D = r.normal(size=(2, 2)) * 2
        labels = r.integers(0, 3, (2, 2))
        got = ls.hl_objective(logits, D[None], labels, 0.1, 0.01)[0].item()
        ref = _scalar_objective(logits.tolist(), D.tolist(), labels.tolist(), 0.1, 0.01)
        worst = max(worst, abs(got - ref))
    return worst < 1e-5, f"max |engine - scalar| {worst:.1e}"


CHECKS = [
    ("gradients", check_gradients),
    ("hardness normalisation and bound", check_hardness_bounds),
    ("hl branch gradient is -L", check_branch_gradient),
    ("gradient partition", check_partition),
    ("baseline reductions", check_reductions),
    ("2x2 scalar oracle", check_scalar_oracle),
]


def run(seed=0, out=print):
    """Run every check, report one line each; True when all pass."""
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
