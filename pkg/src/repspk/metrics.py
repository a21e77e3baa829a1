"""Cosine scoring, EER and minDCF for speaker-verification trials.

A trial is accepted iff ``score >= threshold``.  Both metrics are evaluated
at every distinct score (plus sentinels), so they depend only on the ranking
of the scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, NamedTuple, Tuple, Union

import numpy as np


class ScoredTrial(NamedTuple):
    score: float
    label: bool  # True = target


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_fa: float = 1.0
    c_miss: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ValueError(f"p_target must lie in (0, 1), got {self.p_target}")
        if self.c_fa <= 0 or self.c_miss <= 0:
            raise ValueError("detection costs must be positive")

    @property
    def c_default(self) -> float:
        return min(self.c_miss * self.p_target, self.c_fa * (1.0 - self.p_target))


def cosine_score(e1, e2) -> float:
    a = np.asarray(e1, dtype=np.float64).ravel()
    b = np.asarray(e2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"embedding lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cannot score a zero-norm embedding")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _as_arrays(scores, labels=None) -> Tuple[np.ndarray, np.ndarray]:
    if labels is None:
        trials = list(scores)
        scores = [t[0] for t in trials]
        labels = [t[1] for t in trials]
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if labels.all() or not labels.any():
        raise ValueError("need at least one target and one nontarget trial")
    return scores, labels


def error_rates(scores, labels, thresholds) -> Tuple[np.ndarray, np.ndarray]:
    """(P_fa, P_miss) at each threshold, accepting scores >= threshold."""
    tar = np.sort(scores[labels])
    non = np.sort(scores[~labels])
    thresholds = np.asarray(thresholds, dtype=np.float64)
    n_fa = non.size - np.searchsorted(non, thresholds, side="left")
    n_miss = np.searchsorted(tar, thresholds, side="left")
    return n_fa / non.size, n_miss / tar.size


def eer_from_rates(thresholds: np.ndarray, far: np.ndarray, frr: np.ndarray) -> Tuple[float, float]:
    """Locate the FAR/FRR crossing along thresholds sorted ascending.

    ``far - frr`` starts positive (accept all) and ends negative (reject
    all).  An exact zero is returned as is; otherwise the two ROC points
    bracketing the sign change are linearly interpolated.
    """
    diff = far - frr
    k = int(np.flatnonzero(diff <= 0)[0])
    if diff[k] == 0:
        return float(far[k]), float(thresholds[k])
    alpha = diff[k - 1] / (diff[k - 1] - diff[k])
    eer = far[k - 1] + alpha * (far[k] - far[k - 1])
    lo, hi = thresholds[k - 1], thresholds[k]
    thr = lo + alpha * (hi - lo) if math.isfinite(hi) else lo
    return float(eer), float(thr)


def compute_eer(scores, labels=None) -> Tuple[float, float]:
    """Equal error rate (as a fraction) and the threshold where it occurs.

    Accepts either parallel ``scores``/``labels`` arrays or a list of
    :class:`ScoredTrial`.
    """
    scores, labels = _as_arrays(scores, labels)
    thresholds = np.append(np.unique(scores), np.inf)
    far, frr = error_rates(scores, labels, thresholds)
    return eer_from_rates(thresholds, far, frr)


def dcf_curve(far: np.ndarray, frr: np.ndarray, params: DcfParams) -> np.ndarray:
    """Raw detection cost at each operating point."""
    return params.c_miss * params.p_target * frr + params.c_fa * (1.0 - params.p_target) * far


def compute_mindcf(scores, labels=None, params: DcfParams = DcfParams(), normalized: bool = True):
    """Minimum detection cost (normalized by default) and its threshold."""
    if isinstance(labels, DcfParams):
        labels, params = None, labels
    scores, labels = _as_arrays(scores, labels)
    thresholds = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    far, frr = error_rates(scores, labels, thresholds)
    cost = dcf_curve(far, frr, params)
    if normalized:
        cost = cost / params.c_default
    k = int(np.argmin(cost))
    return float(cost[k]), float(thresholds[k])


# ---------------------------------------------------------------------------
# score files: one ``score<TAB>label`` per line, label 1 = target


def write_scores(path: Union[str, Path], trials: Iterable[ScoredTrial]) -> None:
    with open(path, "w") as f:
        for score, label in trials:
            f.write(f"{score:.9g}\t{int(bool(label))}\n")


def read_scores(path: Union[str, Path]) -> List[ScoredTrial]:
    trials = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected 'score<TAB>label' with label 0 or 1")
            trials.append(ScoredTrial(float(parts[0]), parts[1] == "1"))
    return trials
