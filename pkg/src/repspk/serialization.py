"""On-disk formats: RSPK weight files, FEAT feature files and JSON model manifests.

All binary data is little-endian.

RSPK::

    b"RSPK" | u32 version=1 | u32 count
    count x ( u16 name_len | name (utf-8) | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u32 dims | values )

FEAT::

    b"FEAT" | u32 version=1 | u32 T | u32 F | T*F f32, frame after frame
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import replace
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .blocks import AvgPoolBN, Branch, ConvBN, IdentityBN, InitPolicy, RepBlock, Sequence, make_block
from .network import ModelSpec, build_model
from .tensor_core import BNParams, ConvSpec, dtype_for

PathLike = Union[str, Path]

WEIGHT_MAGIC = b"RSPK"
FEATURE_MAGIC = b"FEAT"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1

_FUSED_NAME = re.compile(r"block\d+\.fused\.(weight|bias)|embed\.(weight|bias)")

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    """A file does not follow its declared binary or manifest layout."""


# ---------------------------------------------------------------------------
# weight files


def encode_weights(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [WEIGHT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r}: name or rank too large")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_weights(data: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated weight file: need {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != WEIGHT_MAGIC:
        raise FormatError("not an RSPK weight file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _CODE_DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(size * dt.itemsize), dtype=dt).reshape(dims)
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return tensors


def write_weights(path: PathLike, tensors: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_weights(tensors))


def read_weights(path: PathLike) -> Dict[str, np.ndarray]:
    return decode_weights(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# feature files


def write_features(path: PathLike, frames: np.ndarray) -> None:
    """``frames`` is [T, F] (time-major)."""
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise FormatError(f"features must be [T, F], got {frames.shape}")
    t, f = frames.shape
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<III", FORMAT_VERSION, t, f) + frames.tobytes())


def read_features(path: PathLike) -> np.ndarray:
    """Returns the [T, F] float32 frames of a FEAT file."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a FEAT feature file")
    version, t, f = struct.unpack("<III", data[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}")
    if t == 0 or f == 0:
        raise FormatError(f"{path}: empty feature file (T={t}, F={f})")
    expected = 16 + 4 * t * f
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for T={t}, F={f}, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(t, f).astype(np.float32)


def features_to_tensor(frames: np.ndarray) -> np.ndarray:
    """[T, F] frames -> [1, 1, F, T] network input."""
    return np.ascontiguousarray(frames.T)[None, None]


# ---------------------------------------------------------------------------
# model <-> named tensors


def _bn_tensors(prefix: str, bn: BNParams) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}.gamma": bn.gamma,
        f"{prefix}.beta": bn.beta,
        f"{prefix}.mean": bn.mu,
        f"{prefix}.var": bn.var,
    }


def _branch_tensors(prefix: str, branch: Branch) -> Dict[str, np.ndarray]:
    if isinstance(branch, ConvBN):
        return {f"{prefix}.conv.weight": branch.conv.weight, **_bn_tensors(f"{prefix}.bn", branch.bn)}
    if isinstance(branch, Sequence):
        out = {}
        for i, stage in enumerate(branch.stages):
            out.update(_branch_tensors(f"{prefix}.s{i}", stage))
        return out
    if isinstance(branch, AvgPoolBN):
        out = _branch_tensors(f"{prefix}.pre", branch.pre) if branch.pre is not None else {}
        out.update(_bn_tensors(f"{prefix}.bn", branch.bn))
        return out
    return _bn_tensors(f"{prefix}.bn", branch.bn)


def model_tensors(model: ModelSpec) -> Dict[str, np.ndarray]:
    tensors: Dict[str, np.ndarray] = {}
    if model.state == "train":
        for n, block in enumerate(model.blocks):
            for j, branch in enumerate(block.branches):
                tensors.update(_branch_tensors(f"block{n}.branch{j}", branch))
    else:
        for n, conv in enumerate(model.fused):
            tensors[f"block{n}.fused.weight"] = conv.weight
            tensors[f"block{n}.fused.bias"] = conv.bias
    tensors["embed.weight"] = model.embed_weight
    tensors["embed.bias"] = model.embed_bias
    return tensors


def _take(tensors: Dict[str, np.ndarray], name: str, like: np.ndarray) -> np.ndarray:
    if name not in tensors:
        raise FormatError(f"weight file is missing tensor {name!r}")
    arr = tensors[name]
    if arr.shape != like.shape:
        raise FormatError(f"tensor {name!r} has shape {arr.shape}, expected {like.shape}")
    return arr


def _load_bn(prefix: str, bn: BNParams, tensors) -> BNParams:
    return BNParams(
        _take(tensors, f"{prefix}.gamma", bn.gamma),
        _take(tensors, f"{prefix}.beta", bn.beta),
        _take(tensors, f"{prefix}.mean", bn.mu),
        _take(tensors, f"{prefix}.var", bn.var),
        bn.epsilon,
    )


def _load_branch(prefix: str, branch: Branch, tensors) -> Branch:
    if isinstance(branch, ConvBN):
        conv = replace(branch.conv, weight=_take(tensors, f"{prefix}.conv.weight", branch.conv.weight))
        return ConvBN(conv, _load_bn(f"{prefix}.bn", branch.bn, tensors))
    if isinstance(branch, Sequence):
        return Sequence([_load_branch(f"{prefix}.s{i}", s, tensors) for i, s in enumerate(branch.stages)])
    if isinstance(branch, AvgPoolBN):
        pre = _load_branch(f"{prefix}.pre", branch.pre, tensors) if branch.pre is not None else None
        return replace(branch, bn=_load_bn(f"{prefix}.bn", branch.bn, tensors), pre=pre)
    return IdentityBN(_load_bn(f"{prefix}.bn", branch.bn, tensors))


# ---------------------------------------------------------------------------
# manifests


def manifest_for(model: ModelSpec, weight_file: str, tensors: Dict[str, np.ndarray], bn_epsilon: float) -> dict:
    manifest = {
        "format_version": MANIFEST_VERSION,
        "arch": model.arch,
        "variant": model.variant.value,
        "state": model.state,
        "width_a": model.width_a,
        "width_b": model.width_b,
        "stage_depths": list(model.stage_depths),
        "stage_widths": list(model.stage_widths),
        "input_freq_bins": model.input_freq_bins,
        "embedding_dim": model.embedding_dim,
        "precision": model.precision,
        "seed": model.seed,
        "bn_epsilon": bn_epsilon,
        "blocks": [
            {"index": i, "in_channels": cin, "out_channels": cout, "stride": list(s)}
            for i, ((cin, cout), s) in enumerate(zip(model.block_channels, model.block_strides))
        ],
        "param_count": int(sum(t.size for t in tensors.values())),
        "weight_file": weight_file,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    return manifest


def save_model(model: ModelSpec, out_dir: PathLike, name: str = "model", extra: Optional[dict] = None) -> Path:
    """Write ``<name>.json`` and ``<name>.rspk`` into ``out_dir``; returns the manifest path.

    ``extra`` entries are merged into the manifest last.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = model_tensors(model)
    weight_file = f"{name}.rspk"
    eps = model.blocks[0].branches[0].bn.epsilon if model.blocks else InitPolicy().epsilon
    manifest = manifest_for(model, weight_file, tensors, float(eps))
    manifest.update(extra or {})
    write_weights(out_dir / weight_file, tensors)
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path: PathLike) -> dict:
    try:
        manifest = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON manifest ({exc})") from None
    required = ("format_version", "arch", "variant", "state", "precision", "weight_file", "tensors")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise FormatError(f"{path}: manifest missing fields {missing}")
    if manifest["format_version"] != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {manifest['format_version']}")
    if manifest["state"] not in ("train", "fused"):
        raise FormatError(f"{path}: state must be 'train' or 'fused'")
    return manifest


def load_model(manifest_path: PathLike, precision: Optional[str] = None) -> ModelSpec:
    """Rebuild a model from its manifest and weight file, checking the tensor index against the file.

    ``precision`` casts every tensor to another precision after the checks.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    tensors = read_weights(manifest_path.parent / manifest["weight_file"])
    index = {t["name"]: tuple(t["shape"]) for t in manifest["tensors"]}
    if set(index) != set(tensors):
        raise FormatError(
            f"manifest index and weight file disagree on tensor names: "
            f"{sorted(set(index) ^ set(tensors))[:5]}"
        )
    dtype = dtype_for(manifest["precision"])
    for name, shape in index.items():
        if tensors[name].shape != shape:
            raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, manifest says {shape}")
        if tensors[name].dtype != dtype:
            raise FormatError(f"tensor {name!r} is {tensors[name].dtype}, manifest precision is {manifest['precision']}")
    if manifest["state"] == "fused":
        stray = [n for n in tensors if not _FUSED_NAME.fullmatch(n)]
        if stray:
            raise FormatError(f"fused weight file holds non-fused tensors, e.g. {stray[0]!r}")
    if precision is not None and precision != manifest["precision"]:
        dtype = dtype_for(precision)
        tensors = {k: v.astype(dtype) for k, v in tensors.items()}
        manifest = dict(manifest, precision=precision)

    template = build_model(manifest["arch"], manifest["variant"], precision=manifest["precision"], materialize=False)
    template.seed = manifest.get("seed")
    for key in ("stage_depths", "stage_widths"):
        if key in manifest and list(manifest[key]) != list(getattr(template, key)):
            raise FormatError(f"manifest {key} {manifest[key]} do not match arch {template.arch}")

    if manifest["state"] == "train":
        init = InitPolicy(epsilon=float(manifest.get("bn_epsilon", InitPolicy().epsilon)), zeros=True)
        blocks = []
        for n, ((cin, cout), s) in enumerate(zip(template.block_channels, template.block_strides)):
            block = make_block(template.variant, cin, cout, s, init, dtype=dtype)
            branches = [_load_branch(f"block{n}.branch{j}", b, tensors) for j, b in enumerate(block.branches)]
            blocks.append(RepBlock(cin, cout, s, branches, block.variant))
        model = replace(template, blocks=blocks, fused=None)
    else:
        fused = []
        for n, s in enumerate(template.block_strides):
            w = tensors.get(f"block{n}.fused.weight")
            b = tensors.get(f"block{n}.fused.bias")
            if w is None or b is None:
                raise FormatError(f"fused weight file is missing block{n}.fused.weight/bias")
            kh, kw = w.shape[2:]
            fused.append(ConvSpec(w, b, stride=s, padding=((kh - 1) // 2, (kw - 1) // 2)))
        model = replace(template, blocks=[], fused=fused)
    emb = model.embedding_dim
    model.embed_weight = _take(tensors, "embed.weight", np.empty((emb, model.pooled_dim)))
    model.embed_bias = _take(tensors, "embed.bias", np.empty(emb))
    return model


# ---------------------------------------------------------------------------
# text tables


def write_embeddings(stream, rows) -> None:
    """One line per utterance: ``id`` followed by the values at 9 significant digits."""
    for utt_id, vec in rows:
        stream.write(utt_id + " " + " ".join(f"{v:.9g}" for v in np.asarray(vec).ravel()) + "\n")


def read_embeddings(path: PathLike) -> Dict[str, np.ndarray]:
    table: Dict[str, np.ndarray] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise FormatError(f"{path}:{lineno}: embedding line has no values")
            try:
                table[parts[0]] = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric embedding value") from None
    return table


def read_trial_list(path: PathLike):
    """``label<TAB>enroll_id<TAB>test_id`` lines; label is 1/0 or target/nontarget."""
    trials = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected label<TAB>enroll<TAB>test")
            label = parts[0].lower()
            if label not in ("1", "0", "target", "nontarget"):
                raise FormatError(f"{path}:{lineno}: bad label {parts[0]!r}")
            trials.append((label in ("1", "target"), parts[1], parts[2]))
    return trials
