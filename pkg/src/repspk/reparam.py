"""Fold training-state branches into a single convolution.

Every branch is reduced to a dense (weight, bias) pair whose kernel is
centered on the output pixel; the pairs are then zero-padded to a common
kernel size and summed.
"""

from __future__ import annotations

from typing import List, Optional, Sequence as Seq, Tuple, Union

import numpy as np

from .blocks import AvgPoolBN, Branch, ConvBN, IdentityBN, RepBlock, Sequence, block_output_hw
from .tensor_core import BNParams, ConvSpec, Pair, ShapeError, _pair

WeightBias = Tuple[np.ndarray, np.ndarray]


def fuse_conv_bn(weight: np.ndarray, bn: BNParams, bias: Optional[np.ndarray] = None) -> WeightBias:
    """Fold BN into the preceding conv.  ``bias`` is the conv's own bias, if it has one."""
    if bn.channels != weight.shape[0]:
        raise ShapeError(f"BN has {bn.channels} channels, kernel has {weight.shape[0]} outputs", axis="C")
    t = bn.gamma / np.sqrt(bn.var + bn.epsilon)
    fused_w = weight * t[:, None, None, None]
    fused_b = bn.beta - bn.mu * t
    if bias is not None:
        fused_b = fused_b + bias * t
    return fused_w, fused_b


def pad_kernel(weight: np.ndarray, target: Pair) -> np.ndarray:
    th, tw = _pair(target)
    kh, kw = weight.shape[2:]
    if th < kh or tw < kw:
        raise ShapeError(f"kernel {(kh, kw)} does not fit in target {(th, tw)}", axis="kernel")
    if (th - kh) % 2 or (tw - kw) % 2:
        raise ShapeError(f"kernel {(kh, kw)} cannot be centered in {(th, tw)}", axis="kernel")
    if (th, tw) == (kh, kw):
        return weight
    oh, ow = (th - kh) // 2, (tw - kw) // 2
    out = np.zeros(weight.shape[:2] + (th, tw), dtype=weight.dtype)
    out[:, :, oh : oh + kh, ow : ow + kw] = weight
    return out


def dilate_to_dense(weight: np.ndarray, dilation: Pair) -> np.ndarray:
    dh, dw = _pair(dilation)
    if (dh, dw) == (1, 1):
        return weight
    kh, kw = weight.shape[2:]
    out = np.zeros(weight.shape[:2] + (1 + (kh - 1) * dh, 1 + (kw - 1) * dw), dtype=weight.dtype)
    out[:, :, ::dh, ::dw] = weight
    return out


def identity_to_conv(channels: int, k: Pair = (1, 1), dtype=np.float64) -> np.ndarray:
    kh, kw = _pair(k)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"identity kernel needs odd size, got {(kh, kw)}")
    w = np.zeros((channels, channels, kh, kw), dtype=dtype)
    w[np.arange(channels), np.arange(channels), kh // 2, kw // 2] = 1
    return w


def avgpool_to_conv(channels: int, k: Pair, dtype=np.float64) -> np.ndarray:
    kh, kw = _pair(k)
    w = np.zeros((channels, channels, kh, kw), dtype=dtype)
    w[np.arange(channels), np.arange(channels)] = np.asarray(1.0, dtype=dtype) / np.asarray(kh * kw, dtype=dtype)
    return w


def fuse_sequential(first: WeightBias, second: WeightBias) -> WeightBias:
    """Compose a 1x1 conv followed by a k x k conv into one k x k conv.

    Only exact when the second conv padded its input with the first conv's
    bias, which is how :func:`repspk.blocks.branch_forward` runs sequences.
    """
    w1, b1 = first
    w2, b2 = second
    if w1.shape[2:] != (1, 1):
        raise ValueError(f"first kernel must be 1x1, got {w1.shape[2:]}")
    if w1.shape[0] != w2.shape[1]:
        raise ShapeError(
            f"first conv outputs {w1.shape[0]} channels, second expects {w2.shape[1]}", axis="C"
        )
    weight = np.einsum("omuv,mi->oiuv", w2, w1[:, :, 0, 0])
    bias = b2 + np.einsum("omuv,m->o", w2, b1)
    return weight, bias


def merge_parallel(branches: Seq[WeightBias], target_k: Pair) -> WeightBias:
    if not branches:
        raise ValueError("nothing to merge")
    shape = branches[0][0].shape[:2]
    weight = None
    bias = None
    for i, (w, b) in enumerate(branches):
        if w.shape[:2] != shape:
            raise ShapeError(f"branch {i} kernel is {w.shape[:2]}, expected {shape}", axis="C")
        padded = pad_kernel(w, target_k)
        weight = padded.copy() if weight is None else weight + padded
        bias = np.array(b, copy=True) if bias is None else bias + b
    return weight, bias


def _center_offset(conv: ConvSpec) -> Pair:
    """How far the padding is from the centered value (ext - 1) / 2; zero for aligned branches."""
    (eh, ew), (ph, pw) = conv.extent, conv.padding
    return 2 * ph - (eh - 1), 2 * pw - (ew - 1)


def _reduce_conv_bn(stage: ConvBN) -> WeightBias:
    if _center_offset(stage.conv) != (0, 0):
        raise ShapeError(
            f"conv with extent {stage.conv.extent} and padding {stage.conv.padding} is not centered", axis="padding"
        )
    w = dilate_to_dense(stage.conv.weight.astype(np.float64), stage.conv.dilation)
    return fuse_conv_bn(w, stage.bn)


def fuse_branch(branch: Branch) -> WeightBias:
    """Reduce one branch to an equivalent centered (weight, bias) in double precision."""
    if isinstance(branch, ConvBN):
        return _reduce_conv_bn(branch)
    if isinstance(branch, Sequence):
        acc = _reduce_conv_bn(branch.stages[0])
        for i, stage in enumerate(branch.stages[1:], start=1):
            if branch.stages[i - 1].conv.stride != (1, 1):
                raise ValueError("only the last stage of a sequence may be strided")
            acc = fuse_sequential(acc, _reduce_conv_bn(stage))
        return acc
    if isinstance(branch, AvgPoolBN):
        kh, kw = branch.k
        if 2 * branch.padding[0] != kh - 1 or 2 * branch.padding[1] != kw - 1:
            raise ShapeError(f"pooling {branch.k} with padding {branch.padding} is not centered", axis="padding")
        channels = branch.bn.channels
        acc = (avgpool_to_conv(channels, branch.k), np.zeros(channels))
        if branch.pre is not None:
            acc = fuse_sequential(_reduce_conv_bn(branch.pre), acc)
        return fuse_conv_bn(acc[0], branch.bn, bias=acc[1])
    if isinstance(branch, IdentityBN):
        return fuse_conv_bn(identity_to_conv(branch.bn.channels), branch.bn)
    raise TypeError(f"unknown branch type {type(branch).__name__}")


def fuse_block(block: RepBlock, dtype=None) -> ConvSpec:
    """Collapse ``block`` into one conv with bias; the kernel is the largest branch extent.

    Arithmetic is done in double precision and cast to ``dtype`` (default: the
    dtype of the main branch weights).
    """
    if dtype is None:
        main = block.branches[0]
        dtype = (main.conv if isinstance(main, ConvBN) else main.stages[0].conv).weight.dtype
    reduced = [fuse_branch(b) for b in block.branches]
    target = (max(w.shape[2] for w, _ in reduced), max(w.shape[3] for w, _ in reduced))
    weight, bias = merge_parallel(reduced, target)
    return ConvSpec(
        weight.astype(dtype),
        bias.astype(dtype),
        stride=block.stride,
        padding=((target[0] - 1) // 2, (target[1] - 1) // 2),
    )


# ---------------------------------------------------------------------------
# analytic cost


def _conv_flops(conv: ConvSpec, n: int, h: int, w: int) -> Tuple[int, int, int]:
    ho, wo = conv.output_hw(h, w)
    kh, kw = conv.kernel
    flops = 2 * n * conv.out_channels * ho * wo * conv.in_channels * kh * kw
    if conv.bias is not None:
        flops += n * conv.out_channels * ho * wo
    return flops, ho, wo


def _branch_flops(branch: Branch, n: int, h: int, w: int) -> int:
    if isinstance(branch, ConvBN):
        f, ho, wo = _conv_flops(branch.conv, n, h, w)
        return f + n * branch.out_channels * ho * wo
    if isinstance(branch, Sequence):
        total = 0
        for stage in branch.stages:
            f, h, w = _conv_flops(stage.conv, n, h, w)
            total += f + n * stage.out_channels * h * w
        return total
    if isinstance(branch, AvgPoolBN):
        total = 0
        if branch.pre is not None:
            total += _branch_flops(branch.pre, n, h, w)
        (kh, kw), (sh, sw), (ph, pw) = branch.k, branch.stride, branch.padding
        ho, wo = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
        c = branch.out_channels
        # window sum plus one scale per output, then BN
        return total + n * c * ho * wo * (kh * kw) + n * c * ho * wo
    return n * branch.out_channels * h * w


def count_flops(subject: Union[RepBlock, ConvSpec], input_shape) -> int:
    """Analytic flop count: 2 per multiply-accumulate, 1 per element for BN, bias and branch adds."""
    n, _, h, w = input_shape
    if isinstance(subject, ConvSpec):
        return _conv_flops(subject, n, h, w)[0]
    ho, wo = block_output_hw(subject, h, w)
    total = sum(_branch_flops(b, n, h, w) for b in subject.branches)
    return total + (len(subject.branches) - 1) * n * subject.out_channels * ho * wo
