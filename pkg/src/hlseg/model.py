"""Tiny fully-convolutional segmentation network with a hardness head.

The backbone is an encoder of stride-2 3x3 conv stages (channels doubling at
each stage) followed by a single 3x3 decoder conv that fuses the deepest
features, bilinearly upsampled, with the previous stage's output
(output stride 2**(depth-1)).  Two heads with identical layer structure sit
on the backbone output: the segmentation head predicts K logits per pixel,
the hardness head one raw value per pixel.  The hardness head reads a
detached copy of the backbone features, so nothing it does can move the
backbone.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import hlt
from .rng import SplitMix64

GROUPS = ("backbone", "seg_head", "hl_head")


@dataclass
class ModelConfig:
    num_classes: int = 4
    base_channels: int = 16
    depth: int = 3
    head_channels: int = 32
    input_size: tuple = (64, 64)
    convs_per_stage: int = 2

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 1 or self.base_channels < 1 or self.head_channels < 1 or self.convs_per_stage < 1:
            raise ValueError("depth, base_channels, head_channels and convs_per_stage must be positive")
        h, w = self.input_size
        step = 2**self.depth
        if h % step or w % step:
            raise ValueError(f"input_size {h}x{w} is not divisible by 2**depth = {step}")

    def stage_channels(self):
        return [self.base_channels * 2**i for i in range(self.depth)]


@dataclass
class ForwardOutput:
    seg_logits: ad.Tensor
    hardness_raw: ad.Tensor = None


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict = field(default_factory=dict)  # name -> Tensor, in build order
    groups: dict = field(default_factory=dict)  # name -> group

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self, group=None):
        return [n for n in self.tensors if group is None or self.groups[n] == group]

    def count(self, group=None):
        return sum(self.tensors[n].size for n in self.names(group))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def without(self, group):
        keep = [n for n in self.tensors if self.groups[n] != group]
        return ModelParams(self.cfg, {n: self.tensors[n] for n in keep}, {n: self.groups[n] for n in keep})

    def copy(self):
        return ModelParams(
            self.cfg,
            {n: ad.Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()},
            dict(self.groups),
        )


def _layer_specs(cfg):
    """(name, group, out_channels, in_channels, kernel) for every conv."""
    specs = []
    cin = 3
    chans = cfg.stage_channels()
    for i, c in enumerate(chans):
        for j in range(cfg.convs_per_stage):
            specs.append((f"enc{i}.conv{j}", "backbone", c, cin, 3))
            cin = c
    if cfg.depth >= 2:
        specs.append(("dec.conv", "backbone", cfg.head_channels, chans[-1] + chans[-2], 3))
        cin = cfg.head_channels
    for prefix, group, out in (("seg", "seg_head", cfg.num_classes), ("hl", "hl_head", 1)):
        specs.append((f"{prefix}.conv", group, cfg.head_channels, cin, 3))
        specs.append((f"{prefix}.cls", group, out, cfg.head_channels, 1))
    return specs


def expected_param_count(cfg):
    """Closed-form parameter count of the architecture."""
    chans = cfg.stage_channels()
    total, cin = 0, 3
    for c in chans:
        total += cin * 9 * c + c
        total += (cfg.convs_per_stage - 1) * (c * 9 * c + c)
        cin = c
    if cfg.depth >= 2:
        total += (chans[-1] + chans[-2]) * 9 * cfg.head_channels + cfg.head_channels
        cin = cfg.head_channels
    for out in (cfg.num_classes, 1):
        total += cin * 9 * cfg.head_channels + cfg.head_channels
        total += cfg.head_channels * out + out
    return total


def build_model(cfg, seed):
    """Kaiming-normal (fan-in) weights and zero biases, fixed per seed."""
    cfg.validate()
    params = ModelParams(cfg)
    for name, group, cout, cin, k in _layer_specs(cfg):
        std = np.sqrt(2.0 / (cin * k * k))
        w = SplitMix64(seed, "init", name).normal((cout, cin, k, k)) * std
        params.tensors[name + ".weight"] = ad.Tensor(w.astype(np.float32), requires_grad=True)
        params.tensors[name + ".bias"] = ad.Tensor(np.zeros(cout, np.float32), requires_grad=True)
        params.groups[name + ".weight"] = group
        params.groups[name + ".bias"] = group
    return params


def _conv(params, name, x, stride=1, pad=1):
    return ad.conv2d(x, params[name + ".weight"], params[name + ".bias"], stride=stride, pad=pad)


def _head(params, prefix, feats, size):
    h = ad.relu(_conv(params, prefix + ".conv", feats))
    return ad.upsample_bilinear(_conv(params, prefix + ".cls", h, pad=0), size)


def backbone(params, image):
    cfg = params.cfg
    x = image
    stages = []
    for i in range(cfg.depth):
        for j in range(cfg.convs_per_stage):
            x = ad.relu(_conv(params, f"enc{i}.conv{j}", x, stride=2 if j == 0 else 1))
        stages.append(x)
    if cfg.depth < 2:
        return x
    skip = stages[-2]
    up = ad.upsample_bilinear(x, skip.shape[-2:])
    return ad.relu(_conv(params, "dec.conv", ad.concat([up, skip], axis=-3)))


def forward(params, image, with_hl=True):
    """Run the backbone once and feed both heads.

    ``image`` is [3,H,W] or [N,3,H,W].  The hardness head is skipped when
    ``with_hl`` is false or when the params carry no hl_head group.
    """
    cfg = params.cfg
    image = ad.as_tensor(image)
    if image.ndim not in (3, 4) or image.shape[-3] != 3 or tuple(image.shape[-2:]) != tuple(cfg.input_size):
        raise ad.ShapeError(f"image shape {image.shape} does not match [3,{cfg.input_size[0]},{cfg.input_size[1]}]")
    size = tuple(cfg.input_size)
    feats = backbone(params, image)
    out = ForwardOutput(_head(params, "seg", feats, size))
    if with_hl and "hl.cls.weight" in params:
        out.hardness_raw = _head(params, "hl", ad.detach(feats), size)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _cfg_lines(cfg):
    h, w = cfg.input_size
    return [
        f"# num_classes = {cfg.num_classes}",
        f"# base_channels = {cfg.base_channels}",
        f"# depth = {cfg.depth}",
        f"# head_channels = {cfg.head_channels}",
        f"# input_size = {h}x{w}",
        f"# convs_per_stage = {cfg.convs_per_stage}",
    ]


def save_checkpoint(params, path):
    """Write one .hlt per tensor plus ``manifest.txt`` (name, file, shape, group)."""
    os.makedirs(path, exist_ok=True)
    lines = _cfg_lines(params.cfg)
    for name, t in params.tensors.items():
        fname = name + ".hlt"
        hlt.save(os.path.join(path, fname), t.data)
        shape = "x".join(str(s) for s in t.shape)
        lines.append(f"{name}\t{fname}\t{shape}\t{params.groups[name]}")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    cfg_vals, entries = {}, []
    with open(manifest) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, val = line[1:].partition("=")
                cfg_vals[key.strip()] = val.strip()
            elif line:
                entries.append(line.split("\t"))
    h, w = (int(v) for v in cfg_vals["input_size"].split("x"))
    cfg = ModelConfig(
        num_classes=int(cfg_vals["num_classes"]),
        base_channels=int(cfg_vals["base_channels"]),
        depth=int(cfg_vals["depth"]),
        head_channels=int(cfg_vals["head_channels"]),
        input_size=(h, w),
        convs_per_stage=int(cfg_vals.get("convs_per_stage", 1)),
    )
    params = ModelParams(cfg)
    for name, fname, shape, group in entries:
        data = hlt.load(os.path.join(path, fname))
        if "x".join(str(s) for s in data.shape) != shape:
            raise hlt.FormatError(f"{fname}: shape {data.shape} disagrees with manifest entry {shape}")
        if group not in GROUPS:
            raise ValueError(f"{manifest}: unknown parameter group {group!r} for {name}")
        params.tensors[name] = ad.Tensor(data, requires_grad=True)
        params.groups[name] = group
    return params
