"""Command-line entry point: ``repspk <command>``.

Exit codes: 0 success, 1 validation error (including a failed verification),
2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from .blocks import BlockVariant, forward_inference, forward_train
from .metrics import DcfParams, ScoredTrial, compute_eer, compute_mindcf, cosine_score, read_scores, write_scores
from .network import (
    ARCHS,
    ModelSpec,
    build_model,
    embed,
    forward_backbone,
    fuse_model,
    model_branch_similarity,
)
from .reparam import count_flops
from .serialization import (
    features_to_tensor,
    load_model,
    read_embeddings,
    read_features,
    read_manifest,
    read_trial_list,
    save_model,
    write_embeddings,
)
from .tensor_core import max_rel_error

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

DEFAULT_TOLERANCE = {"single": 1e-4, "double": 1e-9}


class CommandError(ValueError):
    """A user-facing validation failure; the message goes to stderr."""


# ---------------------------------------------------------------------------
# commands


def cmd_build(args) -> int:
    precision = args.precision or "double"
    model = build_model(args.arch, args.variant, args.seed, precision)
    path = save_model(model, args.out_dir, args.name)
    print(f"wrote {path} ({model.num_blocks} blocks, {model.num_params():,} parameters)")
    return EXIT_OK


def cmd_fuse(args) -> int:
    manifest = read_manifest(args.manifest)
    if manifest["state"] != "train":
        raise CommandError(f"{args.manifest} is already fused")
    model = load_model(args.manifest, args.precision)
    fused = fuse_model(model)
    train_params, fused_params = model.num_params("train"), fused.num_params("fused")
    # A dense 5x5 (25 taps) outweighs 3x3 + dilated 3x3 (18 taps), so only 3x3 targets must shrink.
    if fused_params >= train_params and all(c.kernel == (3, 3) for c in fused.fused):
        raise CommandError(f"fusion did not reduce parameters ({fused_params} >= {train_params})")
    path = save_model(
        fused,
        args.out_dir,
        args.name,
        extra={"bn_epsilon": manifest.get("bn_epsilon"), "train_param_count": train_params},
    )
    kernels = sorted({tuple(c.kernel) for c in fused.fused})
    print(
        f"wrote {path}: {len(fused.fused)} fused convs, kernels {kernels}, "
        f"parameters {train_params:,} -> {fused_params:,}"
    )
    return EXIT_OK


def _check_same_arch(a: ModelSpec, b: ModelSpec) -> None:
    for key in ("arch", "variant", "stage_depths", "stage_widths", "input_freq_bins", "embedding_dim"):
        if getattr(a, key) != getattr(b, key):
            raise CommandError(f"architecture mismatch on {key}: {getattr(a, key)} vs {getattr(b, key)}")


def cmd_verify(args) -> int:
    if args.trials < 1:
        raise CommandError("--trials must be at least 1")
    train = load_model(args.train_manifest, args.precision)
    fused = load_model(args.fused_manifest, args.precision)
    if train.state != "train" or fused.state != "fused":
        raise CommandError("verify needs a train-state manifest followed by a fused-state manifest")
    _check_same_arch(train, fused)
    if train.precision != fused.precision:
        raise CommandError(f"precision mismatch: {train.precision} vs {fused.precision}")
    tol = args.tolerance if args.tolerance is not None else DEFAULT_TOLERANCE[train.precision]
    dtype = train.embed_weight.dtype
    rng = np.random.default_rng(args.seed)

    worst = 0.0
    for n, (block, conv) in enumerate(zip(train.blocks, fused.fused)):
        err = 0.0
        for _ in range(args.trials):
            x = rng.normal(size=(2, block.in_channels, 9, 11)).astype(dtype)
            err = max(err, max_rel_error(forward_train(block, x), forward_inference(conv, x)))
        worst = max(worst, err)
        print(f"block{n}\t{err:.3e}\t{'ok' if err <= tol else 'FAIL'}")
    err = 0.0
    for _ in range(args.trials):
        frames = int(rng.integers(args.min_frames, args.max_frames + 1))
        feats = rng.normal(size=(1, 1, train.input_freq_bins, frames)).astype(dtype)
        err = max(err, max_rel_error(embed(train, feats, "train"), embed(fused, feats, "fused")))
    worst = max(worst, err)
    print(f"end-to-end\t{err:.3e}\t{'ok' if err <= tol else 'FAIL'}")
    passed = worst <= tol
    print(f"{'PASS' if passed else 'FAIL'}: max relative error {worst:.3e} (tolerance {tol:g})")
    return EXIT_OK if passed else EXIT_INVALID


def bench_report(model: ModelSpec, frames: int, repeats: int, seed: int = 0) -> dict:
    """Median wall time and analytic flops of the train and fused backbones on one utterance."""
    if model.state != "train":
        raise CommandError("bench needs a train-state manifest (the fused form is derived from it)")
    if repeats < 1 or frames < 1:
        raise CommandError("--repeats and --frames must be positive")
    fused = fuse_model(model)
    dtype = model.embed_weight.dtype
    feats = np.random.default_rng(seed).normal(size=(1, 1, model.input_freq_bins, frames)).astype(dtype)

    blocks = []
    shape = feats.shape
    for n, (block, conv) in enumerate(zip(model.blocks, fused.fused)):
        tf, ff = count_flops(block, shape), count_flops(conv, shape)
        blocks.append({"index": n, "train_flops": tf, "fused_flops": ff})
        ho, wo = conv.output_hw(shape[2], shape[3])
        shape = (shape[0], conv.out_channels, ho, wo)

    def timed(state: str, m: ModelSpec) -> float:
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            forward_backbone(m, feats, state)
            times.append(time.perf_counter() - t0)
        return statistics.median(times)

    train_flops = sum(b["train_flops"] for b in blocks)
    fused_flops = sum(b["fused_flops"] for b in blocks)
    return {
        "arch": model.arch,
        "variant": model.variant.value,
        "frames": frames,
        "repeats": repeats,
        "train": {"median_seconds": timed("train", model), "flops": train_flops},
        "fused": {"median_seconds": timed("fused", fused), "flops": fused_flops},
        "flop_ratio": fused_flops / train_flops,
        "blocks": blocks,
    }


def cmd_bench(args) -> int:
    report = bench_report(load_model(args.manifest, args.precision), args.frames, args.repeats)
    if args.json:
        print(json.dumps(report, indent=2))
        return EXIT_OK
    print(f"{report['arch']}/{report['variant']}  {report['frames']} frames, median of {report['repeats']}")
    for state in ("train", "fused"):
        r = report[state]
        print(f"  {state:<6} {r['median_seconds'] * 1e3:10.2f} ms  {r['flops']:>16,} flops")
    print(f"  flop ratio (fused/train): {report['flop_ratio']:.4f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    model = load_model(args.manifest, args.precision)
    state = model.state
    rows = []
    for path in args.features:
        frames = read_features(path)
        if frames.shape[1] != model.input_freq_bins:
            raise CommandError(
                f"{path}: features have F={frames.shape[1]}, model expects F={model.input_freq_bins}"
            )
        x = features_to_tensor(frames).astype(model.embed_weight.dtype)
        rows.append((Path(path).stem, embed(model, x, state)[0]))
    if args.out in (None, "-"):
        write_embeddings(sys.stdout, rows)
    else:
        with open(args.out, "w") as f:
            write_embeddings(f, rows)
    return EXIT_OK


def cmd_score(args) -> int:
    params = DcfParams(args.p_target, args.c_fa, args.c_miss)
    if args.scores:
        trials = read_scores(args.scores)
    else:
        if not (args.embeddings and args.trials):
            raise CommandError("score needs --embeddings and --trials, or --scores")
        table = read_embeddings(args.embeddings)
        trials = []
        for label, enroll, test in read_trial_list(args.trials):
            for utt in (enroll, test):
                if utt not in table:
                    raise CommandError(f"unknown id {utt!r} in trial list")
            trials.append(ScoredTrial(cosine_score(table[enroll], table[test]), label))
        if args.out in (None, "-"):
            for t in trials:
                print(f"{t.score:.9g}\t{int(t.label)}")
        else:
            write_scores(args.out, trials)
    eer, eer_thr = compute_eer(trials)
    mindcf, dcf_thr = compute_mindcf(trials, params=params)
    print(f"EER: {100 * eer:.4f}% (threshold {eer_thr:.6g})")
    print(f"minDCF(p_target={params.p_target:g}): {mindcf:.4f} (threshold {dcf_thr:.6g})")
    if args.verbose:
        raw, _ = compute_mindcf(trials, params=params, normalized=False)
        print(f"raw minDCF: {raw:.6f}  normalizer: {params.c_default:g}  trials: {len(trials)}")
    return EXIT_OK


def cmd_branch_sim(args) -> int:
    if read_manifest(args.manifest)["state"] != "train":
        raise CommandError("branch similarity needs a train-state manifest")
    model = load_model(args.manifest, args.precision)
    frames = read_features(args.feature_file)
    if frames.shape[1] != model.input_freq_bins:
        raise CommandError(
            f"{args.feature_file}: features have F={frames.shape[1]}, model expects F={model.input_freq_bins}"
        )
    rows = model_branch_similarity(model, features_to_tensor(frames).astype(model.embed_weight.dtype))
    print("layer\t" + "\t".join(f"branch{i}" for i in rows[0]))
    for layer, row in enumerate(rows):
        cells = ["undef" if v is None else f"{v:.6f}" for v in row.values()]
        print(f"{layer}\t" + "\t".join(cells))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _variant(name: str) -> str:
    try:
        return BlockVariant.parse(name).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _arch(name: str) -> str:
    key = name.upper()
    if key not in ARCHS:
        raise argparse.ArgumentTypeError(f"unknown arch {name!r}; valid archs: {', '.join(a.lower() for a in ARCHS)}")
    return key


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repspk", description=__doc__.splitlines()[0])
    parser.add_argument("--precision", choices=["single", "double"], default=None,
                        help="numeric precision (build default: double; others: the manifest's)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a training-state model")
    p.add_argument("--arch", type=_arch, required=True)
    p.add_argument("--variant", type=_variant, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--name", default="model")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("fuse", help="re-parameterize a training-state model")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--name", default="fused")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("verify", help="check train and fused outputs agree")
    p.add_argument("train_manifest")
    p.add_argument("fused_manifest")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-frames", type=int, default=16)
    p.add_argument("--max-frames", type=int, default=200)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time and count flops of both states")
    p.add_argument("manifest")
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--json", action="store_true", help="machine-readable report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("embed", help="extract embeddings from FEAT files")
    p.add_argument("manifest")
    p.add_argument("features", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("score", help="cosine-score trials and report EER / minDCF")
    p.add_argument("--embeddings")
    p.add_argument("--trials")
    p.add_argument("--scores", help="score file (score<TAB>label) instead of embeddings + trials")
    p.add_argument("--out", default=None, help="where to write per-trial scores (default stdout)")
    p.add_argument("--p-target", type=float, default=0.01)
    p.add_argument("--c-fa", type=float, default=1.0)
    p.add_argument("--c-miss", type=float, default=1.0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("branch-sim", help="per-layer branch cosine similarity")
    p.add_argument("manifest")
    p.add_argument("feature_file")
    p.set_defaults(func=cmd_branch_sim)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
