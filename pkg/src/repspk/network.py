"""Backbone assembly, pooling, embedding head, AM-Softmax and branch diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .blocks import (
    BlockVariant,
    IdentityBN,
    InitPolicy,
    RepBlock,
    branch_outputs,
    forward_inference,
    forward_train,
    make_block,
)
from .reparam import fuse_block
from .tensor_core import ConvSpec, ShapeError, check_tensor, dtype_for

# (width_a, width_b, stage depths incl. stem, freq bins, embedding dim)
ARCHS: Dict[str, Tuple[float, float, Tuple[int, ...], int, int]] = {
    "A0": (0.75, 2.5, (1, 2, 4, 14, 1), 81, 512),
    "A1": (1.0, 2.5, (1, 2, 4, 14, 1), 81, 512),
    "A2": (1.5, 2.75, (1, 2, 4, 14, 1), 81, 512),
    # a = b = 1/8 gives widths [8, 8, 16, 32, 64]
    "TOY": (0.125, 0.125, (1, 1, 1, 2, 1), 16, 32),
}

STAGE_STRIDES = (1, 1, 2, 2, 2)
MIN_FRAMES = 8


def stage_widths(a: float, b: float) -> List[int]:
    return [
        int(round(min(64.0, 64 * a))),
        int(round(64 * a)),
        int(round(128 * a)),
        int(round(256 * a)),
        int(round(512 * b)),
    ]


def parse_arch(arch: str) -> str:
    key = str(arch).strip().upper()
    if key not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; valid archs: {', '.join(a.lower() for a in ARCHS)}")
    return key


@dataclass
class ModelSpec:
    arch: str
    variant: BlockVariant
    width_a: float
    width_b: float
    stage_depths: List[int]
    stage_widths: List[int]
    input_freq_bins: int
    embedding_dim: int
    block_strides: List[Tuple[int, int]]
    embed_weight: np.ndarray
    embed_bias: np.ndarray
    blocks: List[RepBlock] = field(default_factory=list)
    fused: Optional[List[ConvSpec]] = None
    precision: str = "double"
    seed: Optional[int] = None

    @property
    def state(self) -> str:
        return "train" if self.blocks else "fused"

    @property
    def block_channels(self) -> List[Tuple[int, int]]:
        chans, cin = [], 1
        for width, depth in zip(self.stage_widths, self.stage_depths):
            for _ in range(depth):
                chans.append((cin, width))
                cin = width
        return chans

    @property
    def num_blocks(self) -> int:
        return sum(self.stage_depths)

    def output_freq_bins(self) -> int:
        f = self.input_freq_bins
        for s, _ in self.block_strides:
            f = (f + 2 - 3) // s + 1
        return f

    @property
    def pooled_dim(self) -> int:
        return 2 * self.stage_widths[-1] * self.output_freq_bins()

    def backbone_params(self, state: str) -> int:
        if state == "train":
            return sum(b.num_params for b in self.blocks)
        return sum(c.num_params for c in self._fused_convs())

    def num_params(self, state: Optional[str] = None) -> int:
        head = self.embed_weight.size + self.embed_bias.size
        return self.backbone_params(state or self.state) + head

    def _fused_convs(self) -> List[ConvSpec]:
        if self.fused is None:
            if not self.blocks:
                raise ValueError("model has neither training blocks nor fused convs")
            self.fused = [fuse_block(b) for b in self.blocks]
        return self.fused


def build_model(
    arch: str,
    variant: Union[BlockVariant, str],
    seed: int = 0,
    precision: str = "double",
    init: Optional[InitPolicy] = None,
    materialize: bool = True,
) -> ModelSpec:
    """Deterministically build a training-state model from ``(arch, variant, seed)``.

    With ``materialize=False`` only the topology is filled in: no blocks and an
    empty embedding head.
    """
    arch = parse_arch(arch)
    variant = BlockVariant.parse(variant)
    a, b, depths, freq_bins, emb_dim = ARCHS[arch]
    widths = stage_widths(a, b)
    dtype = dtype_for(precision)
    init = init or InitPolicy()

    strides = [
        (s, s) if i == 0 else (1, 1) for s, depth in zip(STAGE_STRIDES, depths) for i in range(depth)
    ]
    model = ModelSpec(
        arch=arch,
        variant=variant,
        width_a=a,
        width_b=b,
        stage_depths=list(depths),
        stage_widths=widths,
        input_freq_bins=freq_bins,
        embedding_dim=emb_dim,
        block_strides=strides,
        embed_weight=np.zeros((emb_dim, 0), dtype=dtype),
        embed_bias=np.zeros(emb_dim, dtype=dtype),
        precision=precision,
        seed=seed,
    )
    if not materialize:
        return model

    rng = np.random.default_rng(seed)
    model.blocks = [
        make_block(variant, cin, cout, s, init, rng, dtype)
        for (cin, cout), s in zip(model.block_channels, strides)
    ]
    shape = (emb_dim, model.pooled_dim)
    if init.zeros:
        model.embed_weight = np.zeros(shape, dtype=dtype)
    else:
        bound = 1.0 / math.sqrt(model.pooled_dim)
        model.embed_weight = rng.uniform(-bound, bound, shape).astype(dtype)
        model.embed_bias = rng.uniform(-bound, bound, emb_dim).astype(dtype)
    return model


def fuse_model(model: ModelSpec) -> ModelSpec:
    """Inference-state copy of ``model``: one conv per block, same embedding head."""
    return replace(model, blocks=[], fused=[fuse_block(b) for b in model.blocks] if model.blocks else model.fused)


def _check_features(model: ModelSpec, features: np.ndarray) -> None:
    check_tensor(features, "features")
    n, c, f, t = features.shape
    if c != 1:
        raise ShapeError(f"features must have 1 channel, got {c}", axis="C")
    if f != model.input_freq_bins:
        raise ShapeError(f"features have {f} frequency bins, model expects {model.input_freq_bins}", axis="H")
    if t < MIN_FRAMES:
        raise ShapeError(f"{t} frames is too short for three stride-2 stages (need >= {MIN_FRAMES})", axis="W")


def forward_backbone(model: ModelSpec, features: np.ndarray, state: str = "train") -> np.ndarray:
    """Run the block stack; returns frames reshaped to [N, C * F_out, T_out]."""
    _check_features(model, features)
    x = features.astype(dtype_for(model.precision), copy=False)
    if state == "train":
        if not model.blocks:
            raise ValueError("model has no training-state blocks (it was loaded fused)")
        for block in model.blocks:
            x = forward_train(block, x)
    elif state == "fused":
        for conv in model._fused_convs():
            x = forward_inference(conv, x)
    else:
        raise ValueError(f"state must be 'train' or 'fused', got {state!r}")
    n, c, f, t = x.shape
    return x.reshape(n, c * f, t)


def statistical_pooling(frames: np.ndarray) -> np.ndarray:
    """[N, D, T] -> [N, 2D] as mean followed by standard deviation over time.

    Frames are sorted along time first so the result does not depend on frame
    order, not even in the last bit.
    """
    if frames.ndim != 3 or frames.shape[2] < 1:
        raise ShapeError(f"expected [N, D, T] with T >= 1, got {frames.shape}")
    x = np.ascontiguousarray(np.sort(frames, axis=2))
    mean = x.mean(axis=2)
    var = ((x - mean[:, :, None]) ** 2).mean(axis=2)
    std = np.sqrt(var + x.dtype.type(1e-10))
    return np.concatenate([mean, std], axis=1)


def embed(model: ModelSpec, features: np.ndarray, state: str = "train") -> np.ndarray:
    """Speaker embeddings, one row of length ``embedding_dim`` per utterance in the batch."""
    pooled = statistical_pooling(forward_backbone(model, features, state))
    if pooled.shape[1] != model.embed_weight.shape[1]:
        raise ShapeError(
            f"pooled dim {pooled.shape[1]} does not match embedding layer input {model.embed_weight.shape[1]}"
        )
    out = pooled @ model.embed_weight.T + model.embed_bias
    if not np.isfinite(out).all():
        raise FloatingPointError("embedding contains non-finite values")
    return out


def am_softmax_loss(cosines, labels, s: float = 36.0, m: float = 0.2) -> float:
    """Mean additive-margin softmax loss over precomputed cosine logits [N, C]."""
    cos = np.asarray(cosines, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if cos.ndim != 2:
        raise ShapeError(f"cosines must be [N, C], got {cos.shape}")
    n, c = cos.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}", axis="N")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    rows = np.arange(n)
    logits = s * cos
    logits[rows, labels] = s * (cos[rows, labels] - m)
    # loss_i = log sum_j exp(z_j - z_y); log1p keeps tiny losses accurate
    d = logits - logits[rows, labels][:, None]
    top = d.max(axis=1)
    rest = np.exp(d - top[:, None])
    rest[rows, labels] = 0.0
    tail = rest.sum(axis=1)
    target_term = np.exp(-top)
    loss = np.where(top <= 0, np.log1p(tail), top + np.log(tail + target_term))
    return float(loss.mean())


def branch_similarity(block: RepBlock, x: np.ndarray) -> Dict[int, Optional[float]]:
    """Cosine similarity between the main branch output and each auxiliary branch.

    Keys are branch indices (identity branches skipped).  A branch whose output
    or the main output has zero norm for any sample maps to ``None``.
    """
    outs = branch_outputs(block, x)
    main = outs[0].reshape(outs[0].shape[0], -1).astype(np.float64)
    main_norm = np.linalg.norm(main, axis=1)
    result: Dict[int, Optional[float]] = {}
    for i, (branch, out) in enumerate(zip(block.branches[1:], outs[1:]), start=1):
        if isinstance(branch, IdentityBN):
            continue
        other = out.reshape(out.shape[0], -1).astype(np.float64)
        other_norm = np.linalg.norm(other, axis=1)
        if np.any(main_norm == 0) or np.any(other_norm == 0):
            result[i] = None
            continue
        cos = np.sum(main * other, axis=1) / (main_norm * other_norm)
        result[i] = float(np.clip(cos, -1.0, 1.0).mean())
    return result


def model_branch_similarity(model: ModelSpec, features: np.ndarray) -> List[Dict[int, Optional[float]]]:
    """Per-block similarities along a training-state forward pass; row 0 is the stem."""
    _check_features(model, features)
    if not model.blocks:
        raise ValueError("branch similarity needs a training-state model")
    x = features.astype(dtype_for(model.precision), copy=False)
    rows = []
    for block in model.blocks:
        rows.append(branch_similarity(block, x))
        x = forward_train(block, x)
    return rows
