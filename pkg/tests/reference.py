"""Straight-line pure-Python reference implementations used as test oracles.

Nothing here imports the package's numerical kernels; they share only the
documented semantics (lowest-index tie-breaking, temperature -> top-k ->
top-p -> min-p order).
"""

import math

import mpmath


def ref_softmax_mp(logits, dps=50):
    with mpmath.workdps(dps):
        m = max(mpmath.mpf(x) for x in logits)
        e = [mpmath.exp(mpmath.mpf(x) - m) for x in logits]
        s = mpmath.fsum(e)
        return [float(v / s) for v in e]


def ref_softmax(logits):
    m = max(logits)
    e = [math.exp(x - m) for x in logits]
    s = math.fsum(e)
    return [v / s for v in e]


def _renorm(p, keep):
    kept = [v if k else 0.0 for v, k in zip(p, keep)]
    s = math.fsum(kept)
    return [v / s for v in kept]


def _rank(p):
    return sorted(range(len(p)), key=lambda i: (-p[i], i))


def ref_top_k(p, k):
    keep = [False] * len(p)
    for i in _rank(p)[:k]:
        keep[i] = True
    return _renorm(p, keep)


def ref_top_p(p, top_p, slack=1e-12):
    keep = [False] * len(p)
    total = 0.0
    for i in _rank(p):
        keep[i] = True
        total += p[i]
        if total >= top_p - slack:
            break
    return _renorm(p, keep)


def ref_min_p(p, m, slack=1e-12):
    thr = m * (1 - slack) * max(p)
    return _renorm(p, [v >= thr for v in p])


def ref_apply(logits, greedy=False, temperature=None, top_k=None, top_p=None, min_p=None):
    if greedy:
        best = max(range(len(logits)), key=lambda i: (logits[i], -i))
        return [1.0 if i == best else 0.0 for i in range(len(logits))]
    p = ref_softmax([x / temperature for x in logits])
    if top_k is not None:
        p = ref_top_k(p, top_k)
    if top_p is not None:
        p = ref_top_p(p, top_p)
    if min_p is not None:
        p = ref_min_p(p, min_p)
    return p
