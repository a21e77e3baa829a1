"""Independent reference computations used by the test-suite.

None of these import the package's kernels; they are deliberately naive.
"""

import itertools

import mpmath
import numpy as np


def naive_conv2d(x, weight, bias=None, stride=(1, 1), padding=(0, 0), dilation=(1, 1), pad_value=None):
    """Element-by-element cross-correlation with explicit bounds checks."""
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    assert ci == c
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((n, co, ho, wo))
    for b, o, i, j in itertools.product(range(n), range(co), range(ho), range(wo)):
        acc = 0.0
        for m, u, v in itertools.product(range(c), range(kh), range(kw)):
            r = i * sh - ph + u * dh
            s = j * sw - pw + v * dw
            if 0 <= r < h and 0 <= s < w:
                val = x[b, m, r, s]
            else:
                val = 0.0 if pad_value is None else pad_value[m]
            acc += weight[o, m, u, v] * val
        out[b, o, i, j] = acc + (0.0 if bias is None else bias[o])
    return out


def naive_avgpool(x, k, stride, padding):
    n, c, h, w = x.shape
    kh, kw = k
    ho = (h + 2 * padding[0] - kh) // stride[0] + 1
    wo = (w + 2 * padding[1] - kw) // stride[1] + 1
    out = np.zeros((n, c, ho, wo))
    for b, m, i, j in itertools.product(range(n), range(c), range(ho), range(wo)):
        total = 0.0
        for u, v in itertools.product(range(kh), range(kw)):
            r, s = i * stride[0] - padding[0] + u, j * stride[1] - padding[1] + v
            if 0 <= r < h and 0 <= s < w:
                total += x[b, m, r, s]
        out[b, m, i, j] = total / (kh * kw)
    return out


def brute_rates(scores, labels, t):
    """(P_fa, P_miss) at one threshold by direct counting."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_fa = int(np.count_nonzero((scores >= t) & ~labels))
    n_miss = int(np.count_nonzero((scores < t) & labels))
    return n_fa / int(np.count_nonzero(~labels)), n_miss / int(np.count_nonzero(labels))


def _brute_rates_all(scores, labels, thresholds):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_non, n_tar = int((~labels).sum()), int(labels.sum())
    far, frr = [], []
    # chunked full comparison matrix: every threshold against every score
    for chunk in np.array_split(np.asarray(thresholds), max(1, len(thresholds) // 512)):
        accept = scores[None, :] >= chunk[:, None]
        far.append(np.count_nonzero(accept & ~labels[None, :], axis=1) / n_non)
        frr.append(np.count_nonzero(~accept & labels[None, :], axis=1) / n_tar)
    return np.concatenate(far), np.concatenate(frr)


def brute_eer(scores, labels):
    """Sweep every cut point; interpolate linearly at the first sign change of FAR - FRR."""
    thresholds = sorted(set(float(s) for s in scores)) + [float("inf")]
    far, frr = _brute_rates_all(scores, labels, thresholds)
    for k in range(len(thresholds)):
        d = far[k] - frr[k]
        if d == 0:
            return float(far[k])
        if d < 0:
            d0 = far[k - 1] - frr[k - 1]
            alpha = d0 / (d0 - d)
            return float(far[k - 1] + alpha * (far[k] - far[k - 1]))
    raise AssertionError("no crossing")


def brute_mindcf(scores, labels, p_target=0.01, c_fa=1.0, c_miss=1.0):
    thresholds = [float("-inf")] + sorted(set(float(s) for s in scores)) + [float("inf")]
    far, frr = _brute_rates_all(scores, labels, thresholds)
    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    costs = (c_miss * p_target * frr + c_fa * (1 - p_target) * far) / norm
    return float(min(costs))


def mp_am_softmax(cosines, labels, s, m, dps=50):
    """AM-Softmax loss in extended precision, straight from the definition."""
    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        for row, y in zip(np.asarray(cosines), labels):
            target = mpmath.e ** (mpmath.mpf(s) * (mpmath.mpf(float(row[y])) - mpmath.mpf(m)))
            others = mpmath.fsum(
                mpmath.e ** (mpmath.mpf(s) * mpmath.mpf(float(c))) for j, c in enumerate(row) if j != y
            )
            total += -mpmath.log(target / (target + others))
        return total / len(labels)
