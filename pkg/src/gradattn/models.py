"""ResNet-18-lite baseline and the GradAttn hybrid, as interpretable layer lists.

A :class:`ModelGraph` is a flat list of :class:`LayerSpec` entries plus the
parameter containers they reference. ``forward`` walks the list with a small
interpreter; residual connections appear as explicit ``save`` / ``skip_add``
entries so the presence (or absence) of skips can be asserted structurally.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from . import tensor as T
from .attention import EncoderConfig, EncoderParams, encoder_forward, init_encoder
from .errors import ContractError, DimensionError
from .layers import (
    Conv2dParams,
    LinearParams,
    NormParams,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    linear,
    maxpool2d,
)
from .tensor import Tensor

GROUPS = ("backbone", "projections", "encoder", "head")
RESNET18_STAGES = (64, 128, 256, 512)


@dataclass(frozen=True)
class WidthConfig:
    """Backbone widths and input geometry.

    ``stem`` is ``"imagenet"`` (7x7 stride-2 conv) or ``"small"`` (3x3 stride-1),
    the latter for 28-32 px inputs.
    """

    stem_channels: int = 64
    stage_widths: tuple = RESNET18_STAGES
    in_channels: int = 3
    input_size: int = 64
    num_classes: int = 200
    stem: str = "imagenet"

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if self.stem_channels < 1 or len(self.stage_widths) != 4 or min(self.stage_widths) < 1:
            raise ContractError(f"invalid widths: stem {self.stem_channels}, stages {self.stage_widths}")
        if self.in_channels < 1 or self.input_size < 1 or self.num_classes < 1:
            raise ContractError("in_channels, input_size and num_classes must be positive")
        if self.stem not in ("imagenet", "small"):
            raise ContractError(f"unknown stem {self.stem!r}")

    @classmethod
    def full(cls, num_classes=200, in_channels=3, input_size=64):
        return cls(64, RESNET18_STAGES, in_channels, input_size, num_classes, "imagenet")

    @classmethod
    def desk(cls, scale=0.25, num_classes=10, in_channels=1, input_size=28, stem="small"):
        w = lambda c: max(1, int(round(c * scale)))  # noqa: E731
        return cls(w(64), tuple(w(c) for c in RESNET18_STAGES), in_channels, input_size, num_classes, stem)

    @property
    def tap_channels(self) -> list[int]:
        return [self.stem_channels, *self.stage_widths]


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    attrs: dict = field(default_factory=dict)


@dataclass
class ModelGraph:
    name: str
    layers: list[LayerSpec]
    modules: dict[str, Any]
    tap_points: list[int]
    width: WidthConfig
    encoder_cfg: EncoderConfig | None = None
    training: bool = True

    def __post_init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        for mod_name, mod in self.modules.items():
            group = _group_of(mod_name)
            for pname, t in _walk(mod, mod_name):
                if pname in self.params or pname in self.buffers:
                    raise ContractError(f"duplicate parameter name {pname}")
                t.name = pname
                if t.requires_grad:
                    self.params[pname] = t
                    self.groups[pname] = group
                else:
                    self.buffers[pname] = t
        if any(b <= a for a, b in zip(self.tap_points, self.tap_points[1:])):
            raise ContractError(f"tap points must be strictly increasing: {self.tap_points}")

    @property
    def kind(self) -> str:
        return "gradattn" if self.encoder_cfg is not None else "resnet18"

    def train(self) -> "ModelGraph":
        self.training = True
        return self

    def eval(self) -> "ModelGraph":
        self.training = False
        return self

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in {**self.params, **self.buffers}.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {**self.params, **self.buffers}
        missing = set(own) - set(state)
        if missing:
            raise ContractError(f"state is missing tensors: {sorted(missing)[:5]}")
        for k, t in own.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def count_skip_adds(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == "skip_add")

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor] | None]:
        return forward_classify(self, x)

    __call__ = forward


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if val is None:
                continue
            sub = "pe.table" if f.name == "pe_table" else f.name
            yield from _walk(val, f"{prefix}.{sub}")
    elif isinstance(obj, (list, tuple)):
        for i, val in enumerate(obj):
            yield from _walk(val, f"{prefix}.{i}")


def _group_of(module_name: str) -> str:
    if module_name.startswith("proj"):
        return "projections"
    if module_name.startswith("encoder"):
        return "encoder"
    if module_name.startswith("head"):
        return "head"
    return "backbone"


# -- builders -----------------------------------------------------------------------

def _backbone(cfg: WidthConfig, rng, skips: bool):
    """Stem + 4 stages x 2 basic blocks. Returns (layers, modules, tap indices)."""
    layers: list[LayerSpec] = []
    modules: dict[str, Any] = {}
    taps: list[int] = []

    def conv(name, cin, cout, k, stride, pad):
        modules[name] = Conv2dParams.init(rng, cin, cout, k, stride, pad, name=name)
        layers.append(LayerSpec("conv", name))

    def bn(name, ch):
        modules[name] = NormParams.init(ch, batch_norm=True, name=name)
        layers.append(LayerSpec("bn", name))

    if cfg.stem == "imagenet":
        conv("stem.conv", cfg.in_channels, cfg.stem_channels, 7, 2, 3)
    else:
        conv("stem.conv", cfg.in_channels, cfg.stem_channels, 3, 1, 1)
    bn("stem.bn", cfg.stem_channels)
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("maxpool", attrs={"kernel": 3, "stride": 2, "padding": 1}))
    taps.append(len(layers) - 1)

    cin = cfg.stem_channels
    for s, cout in enumerate(cfg.stage_widths, start=1):
        for b in range(2):
            stride = 2 if (s > 1 and b == 0) else 1
            pre = f"stage{s}.block{b}"
            if skips:
                layers.append(LayerSpec("save"))
            conv(f"{pre}.conv1", cin, cout, 3, stride, 1)
            bn(f"{pre}.bn1", cout)
            layers.append(LayerSpec("relu"))
            conv(f"{pre}.conv2", cout, cout, 3, 1, 1)
            bn(f"{pre}.bn2", cout)
            if skips:
                attrs = {}
                if stride != 1 or cin != cout:
                    proj = f"{pre}.shortcut"
                    modules[f"{proj}.conv"] = Conv2dParams.init(rng, cin, cout, 1, stride, 0, name=f"{proj}.conv")
                    modules[f"{proj}.bn"] = NormParams.init(cout, batch_norm=True, name=f"{proj}.bn")
                    attrs = {"conv": f"{proj}.conv", "bn": f"{proj}.bn"}
                layers.append(LayerSpec("skip_add", pre, attrs))
            layers.append(LayerSpec("relu"))
            cin = cout
        taps.append(len(layers) - 1)
    return layers, modules, taps


def build_resnet18_lite(cfg: WidthConfig, seed: int = 42) -> ModelGraph:
    rng = np.random.default_rng(seed)
    layers, modules, _ = _backbone(cfg, rng, skips=True)
    layers.append(LayerSpec("gap"))
    modules["head.fc"] = LinearParams.init(rng, cfg.stage_widths[-1], cfg.num_classes, name="head.fc")
    layers.append(LayerSpec("linear", "head.fc"))
    return ModelGraph("resnet18_lite", layers, modules, [], cfg)


def build_gradattn(cfg: WidthConfig, enc: EncoderConfig, seed: int = 42) -> ModelGraph:
    """Skipless backbone, five taps, per-tap pool+projection, encoder, mean-token head.

    Shortcut projections belong to the skip path, so they are dropped along
    with the additions.
    """
    if enc.num_tokens != 5:
        raise ContractError(f"GradAttn uses exactly 5 taps, encoder expects {enc.num_tokens}")
    rng = np.random.default_rng(seed)
    layers, modules, taps = _backbone(cfg, rng, skips=False)
    proj_names = []
    for i, c in enumerate(cfg.tap_channels, start=1):
        name = f"proj.tap{i}"
        modules[name] = LinearParams.init(rng, c, enc.dim, name=name)
        proj_names.append(name)
    layers.append(LayerSpec("tap_project", "proj", {"modules": proj_names}))
    modules["encoder"] = init_encoder(rng, enc)
    layers.append(LayerSpec("encoder", "encoder"))
    layers.append(LayerSpec("mean_tokens"))
    modules["head.fc"] = LinearParams.init(rng, enc.dim, cfg.num_classes, name="head.fc")
    layers.append(LayerSpec("linear", "head.fc"))
    return ModelGraph(f"gradattn_{enc.pe_variant}", layers, modules, taps, cfg, enc)


def build_model(kind: str, cfg: WidthConfig, enc: EncoderConfig | None = None, seed: int = 42) -> ModelGraph:
    if kind == "resnet18":
        return build_resnet18_lite(cfg, seed)
    if kind == "gradattn":
        return build_gradattn(cfg, enc or EncoderConfig(), seed)
    raise ContractError(f"unknown model kind {kind!r}")


# -- forward ------------------------------------------------------------------------

def extract_and_project(taps: list[Tensor], projections: list[LinearParams]) -> Tensor:
    """Pool each tap over space and project it to the shared width; stack to [B, 5, d]."""
    if len(taps) != len(projections):
        raise DimensionError(f"{len(taps)} taps but {len(projections)} projections")
    tokens = []
    for i, (f, p) in enumerate(zip(taps, projections)):
        if f.shape[1] != p.weight.shape[1]:
            raise DimensionError(f"tap {i + 1} has {f.shape[1]} channels, projection expects {p.weight.shape[1]}")
        tokens.append(linear(global_avg_pool(f), p.weight, p.bias))
    return T.stack(tokens, axis=1)


def forward_classify(model: ModelGraph, x: Tensor) -> tuple[Tensor, list[Tensor] | None]:
    """Run the layer list. Returns logits and, for GradAttn, the tap activations."""
    x = T.as_tensor(x)
    w = model.width
    if x.ndim != 4 or x.shape[1] != w.in_channels:
        raise DimensionError(f"{model.name} expects [B, {w.in_channels}, H, W], got {x.shape}")
    h = x
    saved: list[Tensor] = []
    taps: list[Tensor] = []
    tap_set = set(model.tap_points)
    mods = model.modules
    for i, layer in enumerate(model.layers):
        k = layer.kind
        if k == "conv":
            h = conv2d(h, mods[layer.name])
        elif k == "bn":
            h = batchnorm2d(h, mods[layer.name], model.training)
        elif k == "relu":
            h = T.relu(h)
        elif k == "maxpool":
            h, _ = maxpool2d(h, **layer.attrs)
        elif k == "save":
            saved.append(h)
        elif k == "skip_add":
            skip = saved.pop()
            if layer.attrs:
                skip = batchnorm2d(conv2d(skip, mods[layer.attrs["conv"]]), mods[layer.attrs["bn"]], model.training)
            h = T.add(h, skip)
        elif k == "gap":
            h = global_avg_pool(h)
        elif k == "linear":
            p = mods[layer.name]
            h = linear(h, p.weight, p.bias)
        elif k == "tap_project":
            h = extract_and_project(taps, [mods[n] for n in layer.attrs["modules"]])
        elif k == "encoder":
            h = encoder_forward(h, model.encoder_cfg, mods[layer.name])
        elif k == "mean_tokens":
            h = T.mean(h, axis=1)
        else:
            raise ContractError(f"unknown layer kind {k!r}")
        if i in tap_set:
            taps.append(h)
    return h, (taps if model.tap_points else None)


def count_params(model: ModelGraph) -> dict[str, int]:
    """Trainable parameter counts per group plus ``total``."""
    counts = {g: 0 for g in GROUPS}
    for name, p in model.params.items():
        counts[model.groups[name]] += p.size
    counts["total"] = sum(counts[g] for g in GROUPS)
    return counts


def layer_of(param_name: str) -> str:
    """Parameterized-module name of a parameter (drop the trailing field)."""
    return param_name.rsplit(".", 1)[0]
