"""Training-state multi-branch blocks and their forward passes."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

from .tensor_core import (
    BNParams,
    ConvSpec,
    Pair,
    ShapeError,
    _pair,
    add,
    avgpool2d,
    batchnorm_forward,
    check_tensor,
    conv2d,
    relu,
)


class BlockVariant(enum.Enum):
    REPVGG = "repvgg"
    VAR_A = "var_a"
    VAR_B = "var_b"
    VAR_C = "var_c"
    VAR_D = "var_d"
    VAR_E = "var_e"
    VAR_F = "var_f"
    RSBA = "rsba"
    RSBB = "rsbb"

    @classmethod
    def parse(cls, name: Union[str, "BlockVariant"]) -> "BlockVariant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        for v in cls:
            if key in (v.value, v.name.lower()):
                return v
        valid = ", ".join(v.value for v in cls)
        raise ValueError(f"unknown block variant {name!r}; valid variants: {valid}")


# RSBA and RSBB are the same branch sets as variants (d) and (f).
_ALIASES = {BlockVariant.RSBA: BlockVariant.VAR_D, BlockVariant.RSBB: BlockVariant.VAR_F}


@dataclass
class ConvBN:
    conv: ConvSpec
    bn: BNParams

    def __post_init__(self):
        if self.conv.bias is not None:
            raise ValueError("ConvBN convolutions carry no bias; BN supplies it")
        if self.bn.channels != self.conv.out_channels:
            raise ShapeError(
                f"BN has {self.bn.channels} channels, conv produces {self.conv.out_channels}", axis="C"
            )

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels


@dataclass
class Sequence:
    stages: List[ConvBN]

    def __post_init__(self):
        if len(self.stages) < 2:
            raise ValueError("a Sequence branch needs at least two stages")
        for i, (a, b) in enumerate(zip(self.stages, self.stages[1:])):
            if a.out_channels != b.in_channels:
                raise ShapeError(
                    f"stage {i} outputs {a.out_channels} channels but stage {i + 1} expects {b.in_channels}",
                    axis="C",
                )

    @property
    def in_channels(self) -> int:
        return self.stages[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.stages[-1].out_channels


@dataclass
class AvgPoolBN:
    bn: BNParams
    k: Pair = (3, 3)
    stride: Pair = (1, 1)
    padding: Pair = (1, 1)
    pre: Optional[ConvBN] = None

    def __post_init__(self):
        self.k, self.stride, self.padding = _pair(self.k), _pair(self.stride), _pair(self.padding)
        if self.pre is not None and self.pre.conv.kernel != (1, 1):
            raise ValueError("the pre-pooling conv of an AvgPoolBN branch must be 1x1")

    @property
    def in_channels(self) -> int:
        return self.pre.in_channels if self.pre is not None else self.bn.channels

    @property
    def out_channels(self) -> int:
        return self.bn.channels


@dataclass
class IdentityBN:
    bn: BNParams

    @property
    def in_channels(self) -> int:
        return self.bn.channels

    @property
    def out_channels(self) -> int:
        return self.bn.channels


Branch = Union[ConvBN, Sequence, AvgPoolBN, IdentityBN]


@dataclass
class RepBlock:
    """Parallel branches summed then passed through ReLU.  ``branches[0]`` is the main k x k ConvBN."""

    in_channels: int
    out_channels: int
    stride: Pair
    branches: List[Branch]
    variant: Optional[BlockVariant] = field(default=None, compare=False)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        if not self.branches:
            raise ValueError("a RepBlock needs at least one branch")
        if not any(isinstance(b, (ConvBN, Sequence)) for b in self.branches):
            raise ValueError("a RepBlock needs at least one ConvBN or Sequence branch")
        for i, b in enumerate(self.branches):
            if b.in_channels != self.in_channels or b.out_channels != self.out_channels:
                raise ShapeError(
                    f"branch {i} maps {b.in_channels}->{b.out_channels}, "
                    f"block is {self.in_channels}->{self.out_channels}",
                    axis="C",
                )
            if isinstance(b, IdentityBN) and self.stride != (1, 1):
                raise ValueError("IdentityBN requires stride 1")

    @property
    def num_params(self) -> int:
        return sum(branch_num_params(b) for b in self.branches)


@dataclass
class InitPolicy:
    """Conv weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    BN starts at gamma=1, beta=0, mu=0, var=1 unless ``random_bn`` is set, in
    which case running statistics and affine terms are drawn at random so that
    fusion is exercised away from the trivial state.  ``zeros`` skips the RNG
    and yields all-zero conv weights, which loaders use as topology templates.
    """

    random_bn: bool = False
    epsilon: float = 1e-5
    zeros: bool = False


def _bn_params(n: int, init: InitPolicy, rng: np.random.Generator, dtype) -> BNParams:
    if not init.random_bn or init.zeros:
        return BNParams.identity(n, dtype=dtype, epsilon=init.epsilon)
    return BNParams(
        gamma=rng.uniform(0.5, 1.5, n).astype(dtype) * rng.choice([-1.0, 1.0], n).astype(dtype),
        beta=rng.normal(0.0, 0.5, n).astype(dtype),
        mu=rng.normal(0.0, 0.5, n).astype(dtype),
        var=rng.uniform(0.25, 2.0, n).astype(dtype),
        epsilon=init.epsilon,
    )


def _conv_bn(
    cin: int,
    cout: int,
    kernel: Pair,
    stride: Pair,
    padding: Pair,
    init: InitPolicy,
    rng: np.random.Generator,
    dtype,
    dilation: Pair = (1, 1),
) -> ConvBN:
    kh, kw = kernel
    if init.zeros:
        weight = np.zeros((cout, cin, kh, kw), dtype=dtype)
    else:
        bound = 1.0 / np.sqrt(cin * kh * kw)
        weight = rng.uniform(-bound, bound, (cout, cin, kh, kw)).astype(dtype)
    conv = ConvSpec(weight, stride=stride, padding=padding, dilation=dilation)
    return ConvBN(conv, _bn_params(cout, init, rng, dtype))


def make_block(
    variant: Union[BlockVariant, str],
    in_ch: int,
    out_ch: int,
    stride=(1, 1),
    init: Optional[InitPolicy] = None,
    rng: Optional[np.random.Generator] = None,
    dtype=np.float64,
) -> RepBlock:
    """Expand ``variant`` into its branch set with padding chosen so all branch outputs align."""
    if in_ch < 1 or out_ch < 1:
        raise ValueError(f"channel counts must be positive, got {in_ch}->{out_ch}")
    variant = BlockVariant.parse(variant)
    init = init or InitPolicy()
    rng = rng if rng is not None else np.random.default_rng(0)
    stride = _pair(stride)
    kind = _ALIASES.get(variant, variant)

    def cb(kernel, padding, dilation=(1, 1), s=stride, cin=in_ch):
        return _conv_bn(cin, out_ch, kernel, s, padding, init, rng, dtype, dilation)

    branches: List[Branch] = [cb((3, 3), (1, 1))]
    if kind is BlockVariant.REPVGG:
        branches.append(cb((1, 1), (0, 0)))
    elif kind is BlockVariant.VAR_A:
        branches.append(cb((3, 3), (1, 1)))
    elif kind is BlockVariant.VAR_B:
        branches.append(cb((1, 3), (0, 1)))
    elif kind is BlockVariant.VAR_C:
        branches.append(cb((3, 1), (1, 0)))
    elif kind is BlockVariant.VAR_D:
        first = _conv_bn(in_ch, out_ch, (1, 1), (1, 1), (0, 0), init, rng, dtype)
        second = _conv_bn(out_ch, out_ch, (3, 3), stride, (1, 1), init, rng, dtype)
        branches.append(Sequence([first, second]))
    elif kind is BlockVariant.VAR_E:
        pre = _conv_bn(in_ch, out_ch, (1, 1), (1, 1), (0, 0), init, rng, dtype)
        branches.append(AvgPoolBN(_bn_params(out_ch, init, rng, dtype), (3, 3), stride, (1, 1), pre))
    elif kind is BlockVariant.VAR_F:
        branches.append(cb((3, 3), (2, 2), dilation=(2, 2)))
    if in_ch == out_ch and stride == (1, 1):
        branches.append(IdentityBN(_bn_params(out_ch, init, rng, dtype)))
    return RepBlock(in_ch, out_ch, stride, branches, variant)


def branch_num_params(branch: Branch) -> int:
    """Weights plus the four BN vectors of every stage."""
    if isinstance(branch, ConvBN):
        return branch.conv.weight.size + 4 * branch.bn.channels
    if isinstance(branch, Sequence):
        return sum(branch_num_params(s) for s in branch.stages)
    if isinstance(branch, AvgPoolBN):
        pre = branch_num_params(branch.pre) if branch.pre is not None else 0
        return pre + 4 * branch.bn.channels
    return 4 * branch.bn.channels


def constant_response(stage: ConvBN, value: np.ndarray) -> np.ndarray:
    """Per-channel output of ``stage`` when every input pixel of channel i equals ``value[i]``."""
    w = stage.conv.weight.astype(np.float64)
    pre_bn = np.einsum("oiuv,i->o", w, np.asarray(value, dtype=np.float64))
    bn = stage.bn
    return bn.gamma * (pre_bn - bn.mu) / np.sqrt(bn.var + bn.epsilon) + bn.beta


def _conv_bn_forward(stage: ConvBN, x: np.ndarray, pad_value=None) -> np.ndarray:
    conv = stage.conv
    if pad_value is not None:
        conv = ConvSpec(
            conv.weight, None, conv.stride, conv.padding, conv.dilation, np.asarray(pad_value, dtype=x.dtype)
        )
    return batchnorm_forward(conv2d(x, conv), stage.bn)


def branch_forward(branch: Branch, x: np.ndarray) -> np.ndarray:
    """Pre-addition output of one branch.

    Intermediate tensors inside a Sequence or after a pre-pooling conv are
    padded with the value that earlier stages emit for a zero input, which is
    exactly what the fused single conv sees at the image border.
    """
    if isinstance(branch, ConvBN):
        return _conv_bn_forward(branch, x)
    if isinstance(branch, Sequence):
        border = np.zeros(branch.in_channels)
        y = x
        for stage in branch.stages:
            y = _conv_bn_forward(stage, y, pad_value=border)
            border = constant_response(stage, border)
        return y
    if isinstance(branch, AvgPoolBN):
        y, border = x, None
        if branch.pre is not None:
            y = _conv_bn_forward(branch.pre, x)
            border = constant_response(branch.pre, np.zeros(branch.pre.in_channels))
        y = avgpool2d(y, branch.k, branch.stride, branch.padding, pad_value=border)
        return batchnorm_forward(y, branch.bn)
    if isinstance(branch, IdentityBN):
        return batchnorm_forward(x, branch.bn)
    raise TypeError(f"unknown branch type {type(branch).__name__}")


def branch_outputs(block: RepBlock, x: np.ndarray) -> List[np.ndarray]:
    check_tensor(x)
    if x.shape[1] != block.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, block expects {block.in_channels}", axis="C")
    outs = [branch_forward(b, x) for b in block.branches]
    for i, o in enumerate(outs[1:], start=1):
        if o.shape != outs[0].shape:
            raise ShapeError(f"branch {i} output {o.shape} does not align with main branch {outs[0].shape}")
    return outs


def forward_train(block: RepBlock, x: np.ndarray) -> np.ndarray:
    return relu(add(branch_outputs(block, x)))


def forward_inference(conv: ConvSpec, x: np.ndarray) -> np.ndarray:
    return relu(conv2d(x, conv))


def block_output_hw(block: RepBlock, h: int, w: int) -> Tuple[int, int]:
    main = block.branches[0]
    conv = main.conv if isinstance(main, ConvBN) else main.stages[-1].conv
    return conv.output_hw(h, w)
