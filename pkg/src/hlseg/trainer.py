"""Deterministic SGD training loop and run-directory bookkeeping.

A run directory holds::

    config.txt              every config key, one ``key = value`` per line
    log.tsv                 iter, lr, L_s, L_h, L_f for each iteration
    batches.tsv             iter, sample indices, augmentation seeds
    maps/L_<iter>.hlt       probe-image loss map (and H_<iter>.hlt for hl runs)
    checkpoints/iter_<n>/   parameter snapshots
    final/                  last parameters
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import hlt
from .data import augment, read_dataset
from .losses import LossConfig, hardness_level, hl_objective, pixel_ce, segmentation_loss
from .model import ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from .rng import SplitMix64

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, checkpoint):
        super().__init__(f"non-finite loss at iteration {iteration}; last good checkpoint: {checkpoint}")
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train_dir: str = ""
    eval_dir: str = ""
    probe_index: int = 0
    iterations: int = 2000
    batch_size: int = 4
    lr0: float = 0.01
    momentum: float = 0.9
    power: float = 0.9
    weight_decay: float = 0.0
    seed: int = 1
    augment: bool = True
    snapshot_every: int = 500
    log_every: int = 100
    dump_every: int = 100

    def validate(self):
        self.model.validate()
        self.loss.validate()
        if self.iterations <= 0:
            raise ConfigError(f"train.iterations must be > 0, got {self.iterations}")
        if not self.lr0 > 0:
            raise ConfigError(f"train.lr0 must be > 0, got {self.lr0}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"train.momentum must lie in [0, 1), got {self.momentum}")
        if min(self.snapshot_every, self.log_every, self.dump_every) < 1:
            raise ConfigError("snapshot_every, log_every and dump_every must be >= 1")


# ---------------------------------------------------------------------------
# flat key = value config files


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_size(s):
    parts = s.lower().replace(",", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {s!r}")
    return (int(parts[0]), int(parts[1]))


def _format(v):
    if isinstance(v, tuple):
        return "x".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_SECTIONS = {"train_dir": "data", "eval_dir": "data", "probe_index": "data"}


_PARSERS = {int: int, float: float, str: str, bool: _parse_bool, tuple: _parse_size}


def _keys():
    """key -> (attribute path, parser, default) for every config key."""
    out = {}
    for section, obj in (("model", ModelConfig()), ("loss", LossConfig())):
        for f in dataclasses.fields(obj):
            out[f"{section}.{f.name}"] = ((section, f.name), _PARSERS[f.type], getattr(obj, f.name))
    default = TrainConfig()
    for f in dataclasses.fields(default):
        if f.name not in ("model", "loss"):
            key = f"{_SECTIONS.get(f.name, 'train')}.{f.name}"
            out[key] = ((f.name,), _PARSERS[f.type], getattr(default, f.name))
    return out


CONFIG_KEYS = _keys()


def set_key(cfg, key, value):
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    path, parse, _ = CONFIG_KEYS[key]
    try:
        parsed = parse(value) if isinstance(value, str) else value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    target = cfg
    for part in path[:-1]:
        target = getattr(target, part)
    setattr(target, path[-1], parsed)


def get_key(cfg, key):
    path = CONFIG_KEYS[key][0]
    target = cfg
    for part in path:
        target = getattr(target, part)
    return target


def parse_config(text, cfg=None, source="<config>"):
    cfg = cfg or TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        try:
            set_key(cfg, key.strip(), value.strip())
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path, cfg=None):
    with open(path) as fh:
        return parse_config(fh.read(), cfg, path)


def format_config(cfg):
    return "".join(f"{k} = {_format(get_key(cfg, k))}\n" for k in CONFIG_KEYS)


# ---------------------------------------------------------------------------
# training


def poly_lr(lr0, it, iterations, power):
    return lr0 * (1.0 - it / iterations) ** power


def batch_plan(seed, it, n_samples, batch_size):
    """Sample indices and per-sample augmentation seeds for iteration ``it``."""
    rng = SplitMix64(seed, "batch", it)
    idx = rng.integers(0, n_samples, batch_size)
    seeds = [rng.next_seed() for _ in range(batch_size)]
    return [int(i) for i in idx], seeds


def make_batch(samples, indices, aug_seeds, cfg):
    imgs, labs = [], []
    for i, s in zip(indices, aug_seeds):
        sample = samples[i]
        if cfg.augment:
            sample = augment(sample, s, cfg.model.input_size, ignore_index=cfg.loss.ignore_index)
        imgs.append(sample.image)
        labs.append(sample.labels)
    return np.stack(imgs), np.stack(labs)


class SGD:
    """Heavy-ball SGD: v = m*v + g (+ wd*p); p -= lr*v.

    Parameters whose gradient is None (no live loss path) are left alone.
    """

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.momentum = np.float32(momentum)
        self.weight_decay = np.float32(weight_decay)
        self.velocity = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}

    def step(self, lr):
        lr = np.float32(lr)
        for name, p in self.params.tensors.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float32)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= lr * v


def probe_maps(params, sample, loss_cfg, with_hl=True):
    """Loss map and, when asked and the model has a hardness head, hardness map."""
    out = forward(params, sample.image[None], with_hl=with_hl)
    lm = pixel_ce(out.seg_logits, sample.labels[None], loss_cfg.ignore_index)
    H = None
    if out.hardness_raw is not None and lm.valid.any():
        H = hardness_level(out.hardness_raw, loss_cfg.c, lm.valid).H.data[0, 0]
    return lm.L.data[0, 0], H


def _finite(*tensors):
    return all(t is None or np.all(np.isfinite(t.data)) for t in tensors)


def train(cfg, run_dir, samples=None, probe=None):
    """Train per ``cfg`` into a fresh ``run_dir``; return the final params."""
    cfg.validate()
    if os.path.isdir(run_dir) and os.listdir(run_dir):
        raise FileExistsError(f"run directory {run_dir} already exists and is not empty")
    if samples is None:
        samples = read_dataset(cfg.train_dir)
    if not samples:
        raise ValueError("training set is empty")
    if probe is None:
        probe_set = read_dataset(cfg.eval_dir) if cfg.eval_dir else samples
        probe = probe_set[cfg.probe_index]
    os.makedirs(os.path.join(run_dir, "maps"))
    os.makedirs(os.path.join(run_dir, "checkpoints"))
    with open(os.path.join(run_dir, "config.txt"), "w") as fh:
        fh.write(format_config(cfg))

    hl = cfg.loss.variant == "hl"
    params = build_model(cfg.model, cfg.seed)
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    last_ckpt = os.path.join(run_dir, "checkpoints", "iter_000000")
    save_checkpoint(params, last_ckpt)
    _dump(run_dir, 0, params, probe, cfg.loss)

    logf = open(os.path.join(run_dir, "log.tsv"), "w")
    batchf = open(os.path.join(run_dir, "batches.tsv"), "w")
    logf.write("iter\tlr\tL_s\tL_h\tL_f\n")
    batchf.write("iter\tindices\taug_seeds\n")
    try:
        for it in range(cfg.iterations):
            indices, seeds = batch_plan(cfg.seed, it, len(samples), cfg.batch_size)
            images, labels = make_batch(samples, indices, seeds, cfg)
            out = forward(params, images, with_hl=hl)
            L_f, parts = segmentation_loss(cfg.loss, out.seg_logits, labels, out.hardness_raw)
            if not _finite(L_f, parts["L_s"], parts["L_h"]):
                raise TrainingDiverged(it, last_ckpt)
            params.zero_grad()
            L_f.backward()
            lr = poly_lr(cfg.lr0, it, cfg.iterations, cfg.power)
            opt.step(lr)

            L_h = parts["L_h"].item() if parts["L_h"] is not None else float("nan")
            logf.write(f"{it}\t{lr:.9g}\t{parts['L_s'].item():.9g}\t{L_h:.9g}\t{L_f.item():.9g}\n")
            batchf.write(f"{it}\t{','.join(map(str, indices))}\t{','.join(map(str, seeds))}\n")
            done = it + 1
            if done % cfg.log_every == 0:
                log.info("iter %d/%d lr %.5f L_f %.4f", done, cfg.iterations, lr, L_f.item())
            if done % cfg.dump_every == 0 or done == cfg.iterations:
                _dump(run_dir, done, params, probe, cfg.loss)
            if done % cfg.snapshot_every == 0 or done == cfg.iterations:
                last_ckpt = os.path.join(run_dir, "checkpoints", f"iter_{done:06d}")
                save_checkpoint(params, last_ckpt)
    finally:
        logf.close()
        batchf.close()
    save_checkpoint(params, os.path.join(run_dir, "final"))
    return params


def _dump(run_dir, it, params, probe, loss_cfg):
    L, H = probe_maps(params, probe, loss_cfg, with_hl=loss_cfg.variant == "hl")
    hlt.save(os.path.join(run_dir, "maps", f"L_{it:06d}.hlt"), L)
    if H is not None:
        hlt.save(os.path.join(run_dir, "maps", f"H_{it:06d}.hlt"), H)


def read_log(run_dir):
    """Columns of ``log.tsv`` as float arrays keyed by header name."""
    with open(os.path.join(run_dir, "log.tsv")) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    return {h: np.array([float(r[i]) for r in rows]) for i, h in enumerate(header)}


def read_batches(run_dir):
    plan = []
    with open(os.path.join(run_dir, "batches.tsv")) as fh:
        fh.readline()
        for line in fh:
            it, idx, seeds = line.rstrip("\n").split("\t")
            plan.append((int(it), [int(x) for x in idx.split(",")], [int(x) for x in seeds.split(",")]))
    return plan


def continue_train(checkpoint, sample, iters, loss_cfg=None, lr=0.01, momentum=0.9, out_dir=None):
    """Keep training on one labelled image, recording maps after every step.

    Returns ``(L_maps, H_maps)``, each a list of ``iters + 1`` arrays; entry
    k is the state after k steps.  The hardness objective is always used, so
    the checkpoint must carry a hardness head.
    """
    loss_cfg = loss_cfg or LossConfig()
    on_disk = isinstance(checkpoint, (str, os.PathLike))
    params = load_checkpoint(checkpoint) if on_disk else checkpoint.copy()
    if "hl.cls.weight" not in params:
        raise ValueError("continue_train needs a checkpoint with a hardness head")
    opt = SGD(params, momentum)
    image, labels = sample.image[None], sample.labels[None]
    if out_dir:
        os.makedirs(out_dir, exist_ok=False)
    L_maps, H_maps = [], []
    for k in range(iters + 1):
        out = forward(params, image)
        L_f, _, _, hm, lm = hl_objective(
            out.seg_logits, out.hardness_raw, labels, loss_cfg.c, loss_cfg.alpha, loss_cfg.ignore_index
        )
        if not _finite(L_f):
            raise TrainingDiverged(k, os.fspath(checkpoint) if on_disk else "<in-memory>")
        L_maps.append(lm.L.data[0, 0].copy())
        H_maps.append(hm.H.data[0, 0].copy())
        if out_dir:
            hlt.save(os.path.join(out_dir, f"L_{k:06d}.hlt"), L_maps[-1])
            hlt.save(os.path.join(out_dir, f"H_{k:06d}.hlt"), H_maps[-1])
        if k == iters:
            break
        params.zero_grad()
        L_f.backward()
        opt.step(lr)
    return L_maps, H_maps

