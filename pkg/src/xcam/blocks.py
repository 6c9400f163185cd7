"""Block families and the network builder.

Six reduced-scale families share one skeleton::

    stem (3x3 conv, stride 2) -> stage 1 -> stage 2 -> GAP -> linear head

and differ only in the block used inside the stages:

==============  ===========================================================
family          block
==============  ===========================================================
``vgg``         plain 3x3 conv + BN + ReLU
``xception``    two depthwise-separable convs with a residual shortcut
``resnet``      1x1 / 3x3 / 1x1 bottleneck with a residual shortcut
``resnext``     same bottleneck, middle conv grouped by ``cardinality``
``se_resnet``   ``resnet`` block with a squeeze-and-excitation gate
``se_resnext``  ``resnext`` block with a squeeze-and-excitation gate
==============  ===========================================================

Every layer function returns ``(output, backward)`` where ``backward`` maps
the upstream gradient to the input gradient and accumulates parameter
gradients into the pass context.  Parameters are initialised from a
per-name random stream, so two specs that share a parameter name and shape
(e.g. ``resnext`` at cardinality 1 and ``resnet``) get identical values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ShapeError, ValidationError

FAMILIES = ("vgg", "xception", "resnet", "resnext", "se_resnet", "se_resnext")
BLOCK_KINDS = ("plain_conv", "residual_bottleneck", "resnext_bottleneck", "depthwise_separable", "se_wrapper")

STEM_CHANNELS = 16
STAGE_CHANNELS = (32, 64)
STAGE_STRIDES = (2, 1)
BLOCKS_PER_STAGE = 2

Backward = Callable[[np.ndarray], np.ndarray]


# --------------------------------------------------------------------------
# specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockSpec:
    kind: str
    channels_in: int
    channels_out: int
    stride: int = 1
    cardinality: int = 1
    bottleneck_width: int | None = None
    se_reduction: int | None = None
    inner: "BlockSpec | None" = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.channels_in < 1 or self.channels_out < 1:
            raise ConfigError("block channel counts must be >= 1")
        if self.kind == "se_wrapper":
            if self.inner is None or self.inner.kind == "se_wrapper":
                raise ConfigError("se_wrapper needs a non-SE inner block")
            if (self.inner.channels_in, self.inner.channels_out, self.inner.stride) != (
                self.channels_in,
                self.channels_out,
                self.stride,
            ):
                raise ConfigError("se_wrapper channels/stride must match its inner block")
            r = self.se_reduction
            if r is None or r < 1 or self.channels_out % r:
                raise ConfigError(f"se_reduction={r} does not divide channels_out={self.channels_out}")
        if self.kind in ("residual_bottleneck", "resnext_bottleneck"):
            width = self.width
            if self.cardinality < 1 or width % self.cardinality:
                raise ConfigError(f"cardinality={self.cardinality} does not divide bottleneck width={width}")
            if self.kind == "residual_bottleneck" and self.cardinality != 1:
                raise ConfigError("residual_bottleneck has cardinality 1; use resnext_bottleneck")

    @property
    def width(self) -> int:
        if self.bottleneck_width is not None:
            return self.bottleneck_width
        return max(1, self.channels_out // 2)

    def output_shape(self, in_shape: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
        n, c, h, w = in_shape
        if c != self.channels_in:
            raise ShapeError(f"block expects {self.channels_in} input channels, got shape {in_shape}")
        ho, wo = tc.conv_output_hw(h, w, 3, 3, self.stride, 1)
        return n, self.channels_out, ho, wo

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.inner is not None:
            d["inner"] = self.inner.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BlockSpec":
        d = dict(d)
        if d.get("inner") is not None:
            d["inner"] = cls.from_dict(d["inner"])
        return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    family: str
    stem_channels: int
    stages: tuple[BlockSpec, ...]
    logits: int = 1
    input_size: int = 64
    in_channels: int = 1
    stem_stride: int = 2

    def __post_init__(self):
        if self.logits not in (1, 2):
            raise ConfigError(f"logits must be 1 or 2, got {self.logits}")
        if not self.stages:
            raise ConfigError("a network needs at least one block")
        chans = self.stem_channels
        for i, b in enumerate(self.stages):
            if b.channels_in != chans:
                raise ConfigError(f"block {i} expects {b.channels_in} channels but receives {chans}")
            chans = b.channels_out

    @property
    def features(self) -> int:
        return self.stages[-1].channels_out

    def feature_shape(self, n: int = 1) -> tuple[int, int, int, int]:
        h = w = tc.conv_output_hw(self.input_size, self.input_size, 3, 3, self.stem_stride, 1)[0]
        shape = (n, self.stem_channels, h, w)
        for b in self.stages:
            shape = b.output_shape(shape)
        return shape

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stages"] = [b.to_dict() for b in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        d = dict(d)
        d["stages"] = tuple(BlockSpec.from_dict(b) for b in d["stages"])
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


@dataclass(frozen=True)
class NetworkScale:
    depth_multiplier: float = 1.0
    width_multiplier: float = 1.0
    cardinality: int = 4
    se_reduction: int = 16
    bottleneck_ratio: float = 0.5

    def __post_init__(self):
        if self.depth_multiplier < 1 / 8 or self.width_multiplier < 1 / 8:
            raise ConfigError("depth and width multipliers must be >= 1/8")
        if self.cardinality < 1 or self.se_reduction < 1 or self.bottleneck_ratio <= 0:
            raise ConfigError("cardinality, se_reduction and bottleneck_ratio must be positive")


@dataclass
class Model:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "Model":
        return Model(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


# --------------------------------------------------------------------------
# pass context and primitive layers
# --------------------------------------------------------------------------

class _Ctx:
    """Parameter lookup, gradient sink and running-stat updates for one pass."""

    def __init__(self, params: Mapping, buffers: Mapping, training: bool, record: bool, prefix: str = ""):
        self.params = params
        self.buffers = buffers
        self.training = training
        self.grads: dict[str, np.ndarray] | None = {} if record else None
        self.updates: dict[str, np.ndarray] = {}
        self.prefix = prefix

    def scope(self, name: str) -> "_Ctx":
        sub = object.__new__(_Ctx)
        sub.__dict__.update(self.__dict__)
        sub.prefix = f"{self.prefix}{name}."
        return sub

    def get(self, name: str) -> np.ndarray:
        key = self.prefix + name
        if key in self.params:
            return self.params[key]
        if key in self.buffers:
            return self.buffers[key]
        raise KeyError(f"missing parameter {key!r}")

    def add_grad(self, name: str, g: np.ndarray) -> None:
        if self.grads is None:
            return
        key = self.prefix + name
        if key in self.grads:
            self.grads[key] = self.grads[key] + g
        else:
            self.grads[key] = g

    def update(self, name: str, value: np.ndarray) -> None:
        self.updates[self.prefix + name] = value


def _conv(ctx: _Ctx, x, name, stride=1, padding=None, groups=1, need_input_grad=True):
    k = ctx.get(f"{name}.weight")
    if padding is None:
        padding = k.shape[-1] // 2
    p = tc.ConvParams(kernel=k, bias=None, stride=stride, padding=padding, groups=groups)
    y, cache = tc.conv_fwd_nhwc(x, p)

    def back(dy):
        dx, dk = tc.conv_bwd_nhwc(cache, p, dy, need_input_grad)
        ctx.add_grad(f"{name}.weight", dk)
        return dx

    return y, back


def _bn(ctx: _Ctx, x, name):
    p = tc.BatchNormParams(
        gamma=ctx.get(f"{name}.gamma"),
        beta=ctx.get(f"{name}.beta"),
        running_mean=ctx.get(f"{name}.running_mean"),
        running_var=ctx.get(f"{name}.running_var"),
    )
    y, cache, new_mean, new_var = tc.bn_fwd_nhwc(x, p, ctx.training)
    if ctx.training:
        ctx.update(f"{name}.running_mean", new_mean)
        ctx.update(f"{name}.running_var", new_var)

    def back(dy):
        dx, dg, db = tc.bn_bwd_nhwc(cache, p, dy)
        ctx.add_grad(f"{name}.gamma", dg)
        ctx.add_grad(f"{name}.beta", db)
        return dx

    return y, back


def _relu(x):
    mask = x > 0
    return x * mask, lambda dy: dy * mask


def _chain(x, layers):
    """Run ``layers`` (callables returning (y, back)) in order."""
    backs = []
    for layer in layers:
        x, b = layer(x)
        backs.append(b)

    def back(dy):
        for b in reversed(backs):
            dy = b(dy)
        return dy

    return x, back


def _conv_bn(ctx, name, stride=1, groups=1, relu=True, kernel=None):
    def layer(x):
        steps = [
            lambda t: _conv(ctx, t, f"{name}.conv", stride=stride, groups=groups),
            lambda t: _bn(ctx, t, f"{name}.bn"),
        ]
        if relu:
            steps.append(_relu)
        return _chain(x, steps)

    return layer


def _se(ctx: _Ctx, x, name):
    w1, b1 = ctx.get(f"{name}.fc1.weight"), ctx.get(f"{name}.fc1.bias")
    w2, b2 = ctx.get(f"{name}.fc2.weight"), ctx.get(f"{name}.fc2.bias")
    hw = x.shape[1] * x.shape[2]
    pooled = x.sum(axis=(1, 2)) / hw
    h = tc.linear(pooled, w1, b1)
    a = np.maximum(h, 0)
    z = tc.linear(a, w2, b2)
    s = tc.sigmoid(z)
    y = x * s[:, None, None, :]

    def back(dy):
        ds = np.einsum("nhwc,nhwc->nc", dy, x)
        dz = ds * s * (1.0 - s)
        da, dw2, db2 = tc.linear_grad(a, w2, dz)
        dh = da * (h > 0)
        dpooled, dw1, db1 = tc.linear_grad(pooled, w1, dh)
        ctx.add_grad(f"{name}.fc1.weight", dw1)
        ctx.add_grad(f"{name}.fc1.bias", db1)
        ctx.add_grad(f"{name}.fc2.weight", dw2)
        ctx.add_grad(f"{name}.fc2.bias", db2)
        return dy * s[:, None, None, :] + dpooled[:, None, None, :] / hw

    return y, back


def _sepconv(ctx: _Ctx, x, name, stride):
    return _chain(
        x,
        [
            lambda t: _conv(ctx, t, f"{name}.dw", stride=stride, groups=t.shape[-1]),
            lambda t: _conv(ctx, t, f"{name}.pw", stride=1),
        ],
    )


def _branch(ctx: _Ctx, x, spec: BlockSpec):
    """Residual branch of a block (before the shortcut addition)."""
    if spec.kind in ("residual_bottleneck", "resnext_bottleneck"):
        return _chain(
            x,
            [
                _conv_bn(ctx, "conv1"),
                _conv_bn(ctx, "conv2", stride=spec.stride, groups=spec.cardinality),
                _conv_bn(ctx, "conv3", relu=False),
            ],
        )
    if spec.kind == "depthwise_separable":
        return _chain(
            x,
            [
                lambda t: _sepconv(ctx, t, "sep1", spec.stride),
                lambda t: _bn(ctx, t, "bn1"),
                _relu,
                lambda t: _sepconv(ctx, t, "sep2", 1),
                lambda t: _bn(ctx, t, "bn2"),
            ],
        )
    raise ConfigError(f"block kind {spec.kind!r} has no residual branch")


def _has_projection(spec: BlockSpec) -> bool:
    return spec.channels_in != spec.channels_out or spec.stride != 1


def _block(ctx: _Ctx, x, spec: BlockSpec):
    """Channel-last block forward returning ``(y, backward)``."""
    if x.shape[-1] != spec.channels_in:
        raise ShapeError(
            f"block expects {spec.channels_in} input channels, got input shape {tc._nchw_shape(x.shape)}"
        )
    se = None
    if spec.kind == "se_wrapper":
        se = spec.se_reduction
        spec = spec.inner
    if spec.kind == "plain_conv":
        steps = [_conv_bn(ctx, "conv", stride=spec.stride)]
        if se is not None:
            steps.append(lambda t: _se(ctx, t, "se"))
        return _chain(x, steps)

    y, back_branch = _branch(ctx, x, spec)
    if se is not None:
        y, back_se = _se(ctx, y, "se")
    else:
        back_se = None
    if _has_projection(spec):
        sc, back_sc = _chain(
            x,
            [
                lambda t: _conv(ctx, t, "proj.conv", stride=spec.stride),
                lambda t: _bn(ctx, t, "proj.bn"),
            ],
        )
    else:
        sc, back_sc = x, None
    out, back_relu = _relu(y + sc)

    def back(dy):
        dz = back_relu(dy)
        db = back_se(dz) if back_se is not None else dz
        dx = back_branch(db)
        return dx + (back_sc(dz) if back_sc is not None else dz)

    return out, back


# --------------------------------------------------------------------------
# public block-level operations
# --------------------------------------------------------------------------

def _run_block(x, spec: BlockSpec, params: Mapping, training: bool):
    x = tc.as_tensor4(x)
    ctx = _Ctx(params, {}, training, record=False)
    return tc.to_nchw(_block(ctx, tc.to_nhwc(x), spec)[0])


def se_scales(features: np.ndarray, gate_params: Mapping) -> np.ndarray:
    """Per-(sample, channel) gate values in (0, 1)."""
    pooled = tc.gap(features)
    a = tc.relu(tc.linear(pooled, gate_params["fc1.weight"], gate_params["fc1.bias"]))
    return tc.sigmoid(tc.linear(a, gate_params["fc2.weight"], gate_params["fc2.bias"]))


def se_gate(features: np.ndarray, reduction: int, gate_params: Mapping) -> np.ndarray:
    """Rescale each channel by its squeeze-and-excitation gate."""
    x = tc.as_tensor4(features)
    c = x.shape[1]
    if reduction < 1 or c % reduction:
        raise ConfigError(f"se reduction {reduction} does not divide channel count {c}")
    hidden = c // reduction
    if gate_params["fc1.weight"].shape != (hidden, c) or gate_params["fc2.weight"].shape != (c, hidden):
        raise ShapeError(
            f"gate weights {gate_params['fc1.weight'].shape}, {gate_params['fc2.weight'].shape} "
            f"do not match channels={c}, reduction={reduction}"
        )
    return x * se_scales(x, gate_params)[:, :, None, None]


def residual_block_forward(x, spec: BlockSpec, params: Mapping, training: bool = False) -> np.ndarray:
    """ReLU(branch(x) + shortcut(x)) for a (possibly SE-wrapped) bottleneck."""
    inner = spec.inner if spec.kind == "se_wrapper" else spec
    if inner.kind not in ("residual_bottleneck", "resnext_bottleneck"):
        raise ConfigError(f"expected a bottleneck block, got {spec.kind!r}")
    return _run_block(x, spec, params, training)


def resnext_block_forward(x, spec: BlockSpec, params: Mapping, training: bool = False) -> np.ndarray:
    inner = spec.inner if spec.kind == "se_wrapper" else spec
    if inner.kind != "resnext_bottleneck":
        raise ConfigError(f"expected a resnext_bottleneck block, got {spec.kind!r}")
    return _run_block(x, spec, params, training)


def depthwise_separable_forward(x, spec: BlockSpec, params: Mapping) -> np.ndarray:
    """Depthwise 3x3 conv (groups = channels_in) followed by a 1x1 pointwise conv.

    ``params`` holds ``dw.weight`` (c_in, 1, 3, 3) and ``pw.weight``
    (c_out, c_in, 1, 1).  This is the bare separable unit; the Xception-style
    block used inside networks stacks two of them with BN and a shortcut.
    """
    x = tc.as_tensor4(x)
    if x.shape[1] != spec.channels_in:
        raise ShapeError(f"expected {spec.channels_in} input channels, got input shape {x.shape}")
    ctx = _Ctx(params, {}, training=False, record=False)
    y, _ = _conv(ctx, tc.to_nhwc(x), "dw", stride=spec.stride, groups=x.shape[1])
    return tc.to_nchw(_conv(ctx, y, "pw")[0])


def separable_param_count(c_in: int, c_out: int, k: int = 3) -> int:
    return c_in * k * k + c_in * c_out


def dense_param_count(c_in: int, c_out: int, k: int = 3) -> int:
    return c_in * c_out * k * k


def block_forward(x, spec: BlockSpec, params: Mapping, training: bool = False) -> np.ndarray:
    """Forward any block kind with a flat, block-local parameter mapping."""
    return _run_block(x, spec, params, training)


# --------------------------------------------------------------------------
# parameter shapes and initialisation
# --------------------------------------------------------------------------

def _bn_shapes(name: str, c: int):
    return {f"{name}.gamma": (c,), f"{name}.beta": (c,)}, {
        f"{name}.running_mean": (c,),
        f"{name}.running_var": (c,),
    }


def block_param_shapes(spec: BlockSpec) -> tuple[dict, dict]:
    """Trainable and buffer shapes for one block, keyed by block-local name."""
    params: dict[str, tuple] = {}
    buffers: dict[str, tuple] = {}

    def conv(name, cout, cin_per_group, k):
        params[f"{name}.weight"] = (cout, cin_per_group, k, k)

    def bn(name, c):
        p, b = _bn_shapes(name, c)
        params.update(p)
        buffers.update(b)

    se = None
    if spec.kind == "se_wrapper":
        se = spec.se_reduction
        spec = spec.inner
    cin, cout = spec.channels_in, spec.channels_out
    if spec.kind == "plain_conv":
        conv("conv.conv", cout, cin, 3)
        bn("conv.bn", cout)
    elif spec.kind in ("residual_bottleneck", "resnext_bottleneck"):
        w = spec.width
        conv("conv1.conv", w, cin, 1)
        bn("conv1.bn", w)
        conv("conv2.conv", w, w // spec.cardinality, 3)
        bn("conv2.bn", w)
        conv("conv3.conv", cout, w, 1)
        bn("conv3.bn", cout)
    elif spec.kind == "depthwise_separable":
        conv("sep1.dw", cin, 1, 3)
        conv("sep1.pw", cout, cin, 1)
        bn("bn1", cout)
        conv("sep2.dw", cout, 1, 3)
        conv("sep2.pw", cout, cout, 1)
        bn("bn2", cout)
    if se is not None:
        hidden = cout // se
        params["se.fc1.weight"] = (hidden, cout)
        params["se.fc1.bias"] = (hidden,)
        params["se.fc2.weight"] = (cout, hidden)
        params["se.fc2.bias"] = (cout,)
    if spec.kind != "plain_conv" and _has_projection(spec):
        conv("proj.conv", cout, cin, 1)
        bn("proj.bn", cout)
    return params, buffers


def network_param_shapes(spec: NetworkSpec) -> tuple[dict, dict]:
    params = {"stem.conv.weight": (spec.stem_channels, spec.in_channels, 3, 3)}
    p, b = _bn_shapes("stem.bn", spec.stem_channels)
    params.update(p)
    buffers = dict(b)
    for i, block in enumerate(spec.stages):
        bp, bb = block_param_shapes(block)
        params.update({f"blocks.{i}.{k}": v for k, v in bp.items()})
        buffers.update({f"blocks.{i}.{k}": v for k, v in bb.items()})
    params["head.weight"] = (spec.logits, spec.features)
    params["head.bias"] = (spec.logits,)
    return params, buffers


def _name_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_param(name: str, shape: tuple, seed: int, dtype=np.float64) -> np.ndarray:
    """Kaiming fan-in normal init for weights; gamma=1; biases and beta zero."""
    if name.endswith(".gamma") or name.endswith("running_var"):
        return np.ones(shape, dtype)
    if name.endswith(".beta") or name.endswith(".bias") or name.endswith("running_mean"):
        return np.zeros(shape, dtype)
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return (_name_rng(seed, name).standard_normal(shape) * std).astype(dtype)


def init_model(spec: NetworkSpec, seed: int, dtype=np.float64) -> Model:
    pshapes, bshapes = network_param_shapes(spec)
    params = {k: init_param(k, s, seed, dtype) for k, s in pshapes.items()}
    buffers = {k: init_param(k, s, seed, dtype) for k, s in bshapes.items()}
    return Model(spec, params, buffers)


def _scaled(base: int, mult: float) -> int:
    return max(1, int(round(base * mult)))


def network_spec(family: str, scale: NetworkScale | None = None, input_size: int = 64, logits: int = 1) -> NetworkSpec:
    if family not in FAMILIES:
        raise ConfigError(f"unknown network family {family!r}; expected one of {', '.join(FAMILIES)}")
    scale = scale or NetworkScale()
    stem = _scaled(STEM_CHANNELS, scale.width_multiplier)
    per_stage = _scaled(BLOCKS_PER_STAGE, scale.depth_multiplier)
    blocks = []
    cin = stem
    for base, stage_stride in zip(STAGE_CHANNELS, STAGE_STRIDES):
        cout = _scaled(base, scale.width_multiplier)
        width = _scaled(cout, scale.bottleneck_ratio)
        for j in range(per_stage):
            stride = stage_stride if j == 0 else 1
            if family == "vgg":
                b = BlockSpec("plain_conv", cin, cout, stride)
            elif family == "xception":
                b = BlockSpec("depthwise_separable", cin, cout, stride)
            elif family in ("resnet", "se_resnet"):
                b = BlockSpec("residual_bottleneck", cin, cout, stride, bottleneck_width=width)
            else:
                b = BlockSpec(
                    "resnext_bottleneck", cin, cout, stride, cardinality=scale.cardinality, bottleneck_width=width
                )
            if family.startswith("se_"):
                b = BlockSpec(
                    "se_wrapper", cin, cout, stride, se_reduction=scale.se_reduction, inner=b
                )
            blocks.append(b)
            cin = cout
    spec = NetworkSpec(family, stem, tuple(blocks), logits=logits, input_size=input_size)
    if min(spec.feature_shape()[2:]) < 1:
        raise ConfigError(f"input size {input_size} too small for this network")
    return spec


def build_network(
    family: str,
    scale: NetworkScale | None = None,
    input_size: int = 64,
    logits: int = 1,
    seed: int = 0,
    dtype=np.float64,
) -> Model:
    """Instantiate a reduced-scale network of one of the six families.

    The result is a pure function of the arguments.
    """
    return init_model(network_spec(family, scale, input_size, logits), seed, dtype)


# --------------------------------------------------------------------------
# network forward / backward
# --------------------------------------------------------------------------

def _network(ctx: _Ctx, model: Model, x: np.ndarray):
    spec = model.spec
    if x.shape[1:] != (spec.in_channels, spec.input_size, spec.input_size):
        raise ShapeError(
            f"batch shape {x.shape} does not match model input "
            f"(n, {spec.in_channels}, {spec.input_size}, {spec.input_size})"
        )
    stem = ctx.scope("stem")
    layers = [
        lambda t: _conv(stem, t, "conv", stride=spec.stem_stride, need_input_grad=False),
        lambda t: _bn(stem, t, "bn"),
        _relu,
    ]
    for i, bspec in enumerate(spec.stages):
        bctx = ctx.scope(f"blocks.{i}")
        layers.append(lambda t, c=bctx, s=bspec: _block(c, t, s))
    feats, back_feats = _chain(tc.to_nhwc(x), layers)
    hw = feats.shape[1] * feats.shape[2]
    pooled = feats.sum(axis=(1, 2)) / hw
    w, b = ctx.get("head.weight"), ctx.get("head.bias")
    logits = tc.linear(pooled, w, b)

    def back(dlogits):
        dpooled, dw, db = tc.linear_grad(pooled, w, dlogits)
        ctx.add_grad("head.weight", dw)
        ctx.add_grad("head.bias", db)
        dfeats = np.broadcast_to((dpooled / hw)[:, None, None, :], feats.shape)
        back_feats(np.ascontiguousarray(dfeats))
        return ctx.grads

    return logits, feats, back


def _prepare(model: Model, batch) -> np.ndarray:
    x = tc.as_tensor4(batch)
    return x.astype(model.dtype, copy=False)


def forward(model: Model, batch, training: bool = False):
    """Return ``(logits, last_feature_maps)``.

    ``last_feature_maps`` are the post-activation outputs of the final block,
    i.e. the maps that global average pooling feeds to the linear head.  In
    training mode batch statistics are used and the model's batch-norm
    running statistics are replaced by their updated values.
    """
    x = _prepare(model, batch)
    ctx = _Ctx(model.params, model.buffers, training, record=False)
    logits, feats, _ = _network(ctx, model, x)
    if training:
        model.buffers.update(ctx.updates)
    return logits, tc.to_nchw(feats)


def forward_backward(model: Model, batch, dloss: Callable[[np.ndarray], tuple[float, np.ndarray]], training=True):
    """Forward, then backpropagate ``dloss(logits) -> (loss, dlogits)``.

    Returns ``(loss, grads, logits)`` where ``grads`` maps every trainable
    parameter name to its gradient.
    """
    x = _prepare(model, batch)
    ctx = _Ctx(model.params, model.buffers, training, record=True)
    logits, _, back = _network(ctx, model, x)
    loss, dlogits = dloss(logits)
    grads = back(dlogits.astype(logits.dtype, copy=False))
    if training:
        model.buffers.update(ctx.updates)
    for k, v in model.params.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return loss, {k: grads[k] for k in model.params}, logits


def class_weights(model: Model, class_index: int) -> tuple[np.ndarray, float]:
    """Head weights and bias for ``class_index`` (1 = KD, 0 = non-KD).

    With a single-logit head the logit scores KD, so non-KD uses the negated
    weights and bias.
    """
    w, b = model.params["head.weight"], model.params["head.bias"]
    if model.spec.logits == 2:
        if class_index not in (0, 1):
            raise ConfigError(f"class index must be 0 or 1, got {class_index}")
        return w[class_index], float(b[class_index])
    if class_index == 1:
        return w[0], float(b[0])
    if class_index == 0:
        return -w[0], -float(b[0])
    raise ConfigError(f"class index must be 0 or 1, got {class_index}")


# --------------------------------------------------------------------------
# weight container
# --------------------------------------------------------------------------

MAGIC = b"XCAMW1"


def save_weights(model: Model, path) -> None:
    """Write parameters then buffers in model order.

    Layout: ``XCAMW1`` magic, 32-byte SHA-256 spec digest, then per record
    ``u32 name_len, name (utf-8), u32 ndim, u64 dims[ndim], f64 data``,
    all little-endian.
    """
    chunks = [MAGIC, model.spec.digest()]
    for name, arr in list(model.params.items()) + list(model.buffers.items()):
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_weights(path) -> tuple[bytes, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValidationError(f"{path}: not an XCAMW1 weight file")
    pos = len(MAGIC)
    digest = data[pos : pos + 32]
    pos += 32
    records = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            count = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            records[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ValidationError(f"{path}: truncated or corrupt weight file ({exc})") from None
    return digest, records


def load_weights(path, spec: NetworkSpec, dtype=np.float64) -> Model:
    """Load a weight file, checking it was written for ``spec``."""
    digest, records = read_weights(path)
    if digest != spec.digest():
        raise ValidationError(f"{path}: weight file was written for a different network spec")
    pshapes, bshapes = network_param_shapes(spec)
    out = []
    for shapes in (pshapes, bshapes):
        d = {}
        for name, shape in shapes.items():
            if name not in records:
                raise ValidationError(f"{path}: missing parameter {name!r}")
            if records[name].shape != tuple(shape):
                raise ValidationError(f"{path}: parameter {name!r} has shape {records[name].shape}, expected {shape}")
            d[name] = records[name].astype(dtype)
        out.append(d)
    return Model(spec, out[0], out[1])
