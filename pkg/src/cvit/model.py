"""Network assembly from a :class:`ModelConfig`, presets and clustered weight sharing."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from . import tensor as T
from .attention import CViTBlock, TokenInteraction
from .ccffn import FFN
from .errors import ConfigError, DimensionError
from .nn.layers import BatchNorm, InvertedResidual, Linear, PatchEmbed, global_avg_pool, subsample_block
from .nn.module import Module, ModuleList
from .rng import RngState


@dataclass
class ModelConfig:
    depths: list
    dims: list
    heads: list
    chunks: int = 2
    expansion: float = 2.5
    cascade: bool = True
    projection: bool = False
    weight_sharing: bool = False
    num_classes: int = 1000
    image_size: int = 224
    ffn: str = "ccffn"
    final_ffn_expansion: float | None = None
    in_channels: int = 3
    name: str = "custom"

    def __post_init__(self):
        self.depths = list(self.depths)
        self.dims = list(self.dims)
        self.heads = list(self.heads)

    def validate(self):
        if not len(self.depths) == len(self.dims) == len(self.heads) == 3:
            raise ConfigError("depths, dims and heads must each have three entries")
        if any(d < 1 for d in self.depths):
            raise ConfigError(f"every stage needs at least one block, got depths {self.depths}")
        if self.ffn not in ("ccffn", "plain"):
            raise ConfigError(f"ffn must be 'ccffn' or 'plain', got {self.ffn!r}")
        bad = []
        for c, h in zip(self.dims, self.heads):
            n = self.chunks if self.ffn == "ccffn" else 1
            if h < 1 or n < 1 or c % n or h > c:
                bad.append((c, n, h))
        if bad:
            raise ConfigError("dims must be divisible by chunks and at least the head count; offending (C, n, h): "
                              + ", ".join(map(str, bad)))
        if self.dims[0] % 8:
            raise ConfigError(f"first embedding dim {self.dims[0]} must be divisible by 8")
        if self.expansion <= 0:
            raise ConfigError(f"expansion must be positive, got {self.expansion}")
        if self.image_size % 16:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 16")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(d)


_PRESETS = {
    "S": ([1, 2, 3], [64, 128, 192], [2, 3, 3]),
    "M": ([1, 2, 3], [128, 192, 224], [4, 3, 2]),
    "L": ([1, 2, 3], [128, 256, 384], [4, 4, 4]),
    "XL": ([1, 3, 4], [192, 288, 384], [3, 3, 4]),
}

# Plain-FFN backbones of the same family.
_BACKBONES = {
    "M0": ([1, 2, 3], [64, 128, 192], [4, 4, 4]),
    "M1": ([1, 2, 3], [128, 144, 192], [2, 3, 3]),
    "M2": ([1, 2, 3], [128, 192, 224], [4, 3, 2]),
    "M3": ([1, 2, 3], [128, 240, 320], [4, 3, 4]),
    "M4": ([1, 2, 3], [128, 256, 384], [4, 4, 4]),
    "M5": ([1, 3, 4], [192, 288, 384], [3, 3, 4]),
}

PRESET_NAMES = tuple(_PRESETS) + tuple(f"backbone-{k}" for k in _BACKBONES)


def preset(name, **overrides):
    if name in _PRESETS:
        depths, dims, heads = _PRESETS[name]
        cfg = ModelConfig(depths, dims, heads, name=name)
    elif name.startswith("backbone-") and name[9:] in _BACKBONES:
        depths, dims, heads = _BACKBONES[name[9:]]
        cfg = ModelConfig(depths, dims, heads, ffn="plain", expansion=2, name=name)
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    return cfg.replace(**overrides) if overrides else cfg


def backbone_of(config):
    """Same dims/heads/depths with plain expansion-2 FFNs in place of CCFFNs."""
    return config.replace(ffn="plain", expansion=2, chunks=1, cascade=True, projection=False,
                          name=f"{config.name}-backbone")


def tiny_config(**overrides):
    """Small network for toy training and numerical checks (64x64 input)."""
    cfg = ModelConfig([1, 1, 1], [8, 16, 16], [2, 2, 2], num_classes=4, image_size=64, name="tiny")
    return cfg.replace(**overrides) if overrides else cfg


def tiny_preset(name, num_classes=2, image_size=64, **overrides):
    """A preset with every embedding dim divided by 8, for toy-scale training."""
    base = preset(name)
    cfg = base.replace(dims=[d // 8 for d in base.dims], num_classes=num_classes,
                       image_size=image_size, name=f"tiny-{name}")
    return cfg.replace(**overrides) if overrides else cfg


# Default teacher for distillation at toy scale, keyed by student preset.
KD_TEACHER = {"S": "L", "M": "L", "L": "XL"}


class Subsample(Module):
    """Stage transition: token interaction and FFN at the old width, inverted-residual
    downsampling, then token interaction and FFN at the new width. FFNs here are
    plain expansion-2 FFNs whatever the block FFN type."""

    def __init__(self, in_dim, out_dim, rng=None):
        super().__init__()
        rng = rng if rng is not None else RngState(0)
        self.dw0 = TokenInteraction(in_dim, rng=rng.child("dw0"))
        self.ffn0 = FFN(in_dim, 2, rng=rng.child("ffn0"))
        self.merge = InvertedResidual(in_dim, out_dim, rng=rng.child("merge"))
        self.dw1 = TokenInteraction(out_dim, rng=rng.child("dw1"))
        self.ffn1 = FFN(out_dim, 2, rng=rng.child("ffn1"))

    def forward(self, x):
        x = x + self.dw0(x)
        x = x + self.ffn0(x)
        x = subsample_block(self.merge, x, strict=False)
        x = x + self.dw1(x)
        return x + self.ffn1(x)


class ClassifierHead(Module):
    """Batch norm over pooled features, then a biased linear layer."""

    def __init__(self, dim, num_classes, rng=None):
        super().__init__()
        self.bn = BatchNorm(dim)
        self.fc = Linear(dim, num_classes, rng=rng)

    def forward(self, x):
        return self.fc(self.bn(x))


class CViTModel(Module):
    def __init__(self, config, rng=None):
        super().__init__()
        config.validate()
        rng = rng if rng is not None else RngState(0)
        self.config = config
        self.patch_embed = PatchEmbed(config.in_channels, config.dims[0], rng=rng.child("patch_embed"))
        n_total = sum(config.depths)
        idx = 0
        for s, (depth, dim, heads) in enumerate(zip(config.depths, config.dims, config.heads)):
            blocks = []
            for b in range(depth):
                idx += 1
                post = config.final_ffn_expansion if idx == n_total else None
                blocks.append(CViTBlock(dim, heads, config.ffn, config.chunks, config.expansion,
                                        config.cascade, config.projection, post_expansion=post,
                                        rng=rng.child(f"stage{s}.{b}")))
            setattr(self, f"stage{s}", ModuleList(blocks))
            if s < 2:
                setattr(self, f"down{s}", Subsample(dim, config.dims[s + 1], rng=rng.child(f"down{s}")))
        self.head = ClassifierHead(config.dims[2], config.num_classes, rng=rng.child("head"))
        self.sharing = None

    def blocks(self):
        return [b for s in range(3) for b in getattr(self, f"stage{s}")]

    def features(self, images):
        x = self.patch_embed(images)
        for s in range(3):
            for block in getattr(self, f"stage{s}"):
                x = block(x)
            if s < 2:
                x = getattr(self, f"down{s}")(x)
        return x

    def forward(self, images):
        if images.ndim != 4 or images.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected images of shape (N, {self.config.in_channels}, H, W), got {images.shape}")
        if images.shape[2] % 16 or images.shape[3] % 16:
            raise DimensionError(f"image height and width must be divisible by 16, got {images.shape[2:]}")
        return self.head(global_avg_pool(self.features(images)))


@dataclass
class SharingReport:
    pairs: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    unpaired_final: int | None = None
    params_before: int = 0
    params_after: int = 0

    @property
    def saved(self):
        return self.params_before - self.params_after


def _param_shapes(module):
    return [p.shape for _, p in module.named_parameters()]


def apply_weight_sharing(model):
    """Tie pre-FFN and post-FFN weights within pairs of successive blocks.

    Blocks are paired greedily in network order across stage boundaries. A
    block whose successor has differently shaped FFNs is skipped (recorded in
    the report) and pairing resumes from the successor. A leftover final
    block stays unshared.
    """
    blocks = model.blocks()
    report = SharingReport(params_before=model.num_parameters(unique=True))
    i = 0
    while i + 1 < len(blocks):
        a, b = blocks[i], blocks[i + 1]
        compatible = (_param_shapes(a.ffn0) == _param_shapes(b.ffn0)
                      and _param_shapes(a.ffn1) == _param_shapes(b.ffn1))
        if compatible:
            b.ffn0 = a.ffn0
            b.ffn1 = a.ffn1
            report.pairs.append((i, i + 1))
            i += 2
        else:
            report.skipped.append((i, i + 1))
            i += 1
    if i == len(blocks) - 1:
        report.unpaired_final = i
    report.params_after = model.num_parameters(unique=True)
    model.sharing = report
    return model


def build(config, rng=None):
    """Construct and initialise a model; applies weight sharing if the config asks for it."""
    if isinstance(rng, int):
        rng = RngState(rng)
    model = CViTModel(config, rng=rng if rng is not None else RngState(0))
    if config.weight_sharing:
        apply_weight_sharing(model)
    return model


def forward(model, images):
    return model(images if isinstance(images, T.Tensor) else T.tensor(images))
