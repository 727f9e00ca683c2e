"""Closed-form Fisher information matrices and CIF tailoring.

For the natural chart the metric is the covariance of the sufficient
statistics, g_IJ = eta_{I u J} - eta_I eta_J. For the expectation chart
it is the inverse matrix, whose entries collapse to signed subset sums
of reciprocal cell probabilities:

    g^IJ = (-1)^(|I|+|J|) * sum_{K subseteq I n J} 1 / p_K

(the empty set contributes 1/p of the all-zero state). The mixed chart
is block diagonal: the expectation block is the inverse of the low-low
natural sub-block, the natural block the inverse of the high-high
expectation sub-block.

A brute-force score-covariance oracle (finite differences through the
actual reconstruction routines) is included for validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularSubblock
from .simplex import (
    Distribution,
    MixedCoords,
    distribution_from_mixed,
    eta_from_p,
    mixed_from_distribution,
    mixed_split,
    p_from_eta,
    p_from_theta,
    popcounts,
    solve_eta_targets,
    subset_zeta,
    superset_zeta,
    theta_from_p,
    EtaCoords,
    ThetaCoords,
)

COND_CAP = 1e12


@dataclass(frozen=True)
class FisherMatrix:
    """Symmetric metric matrix with its coordinate-system tag.

    labels[i] is the subset mask of row/column i. For the mixed system
    the labels run through the expectation block first (order <= l,
    sorted by cardinality then mask), then the natural block.
    """

    system: str
    labels: np.ndarray
    m: np.ndarray
    l: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        mm = np.ascontiguousarray(self.m, dtype=float)
        mm.flags.writeable = False
        object.__setattr__(self, "m", mm)


def _sym_inv(block: np.ndarray, what: str) -> np.ndarray:
    w = np.linalg.eigvalsh(block)
    if w[0] <= 0.0 or w[-1] / w[0] > COND_CAP:
        cond = float("inf") if w[0] <= 0 else float(w[-1] / w[0])
        raise SingularSubblock(f"{what} is numerically singular", cond=cond)
    try:
        c = np.linalg.cholesky(block)
        inv = np.linalg.solve(block, np.eye(len(block)))
        del c
    except np.linalg.LinAlgError:
        v = np.linalg.eigh(block)[1]
        inv = (v / w) @ v.T
    return (inv + inv.T) / 2.0


def fisher_theta(d: Distribution) -> FisherMatrix:
    """Metric in the natural chart: covariance of the subset indicators."""
    masks = np.arange(1, 1 << d.n)
    full = superset_zeta(d.p, d.n)
    eta = full[masks]
    m = full[masks[:, None] | masks[None, :]] - np.outer(eta, eta)
    return FisherMatrix("theta", masks, m)


def fisher_eta(d: Distribution) -> FisherMatrix:
    """Metric in the expectation chart, the inverse of fisher_theta's."""
    masks = np.arange(1, 1 << d.n)
    t = subset_zeta(1.0 / d.p, d.n)
    sign = np.where(popcounts(masks) % 2 == 0, 1.0, -1.0)
    m = np.outer(sign, sign) * t[masks[:, None] & masks[None, :]]
    return FisherMatrix("eta", masks, m)


def fisher_mixed(d: Distribution, l: int) -> FisherMatrix:
    """Block-diagonal metric of the l-mixed chart.

    The off-diagonal blocks vanish identically (the low expectation
    directions are orthogonal to the high natural ones), so only the
    two diagonal blocks are computed; each is the inverse of the
    corresponding principal sub-block of the opposite chart's metric.
    Raises SingularSubblock if either inversion is ill-conditioned.
    """
    low, high = mixed_split(d.n, l)
    gt = fisher_theta(d).m
    a = _sym_inv(gt[np.ix_(low - 1, low - 1)], "low-order natural sub-block")
    k = len(low)
    m = np.zeros((k + len(high), k + len(high)))
    m[:k, :k] = a
    if len(high):
        ge = fisher_eta(d).m
        m[k:, k:] = _sym_inv(ge[np.ix_(high - 1, high - 1)],
                             "high-order expectation sub-block")
    return FisherMatrix("mixed", np.concatenate([low, high]), m, l=l)


def cif_tailor(d: Distribution, l: int) -> Distribution:
    """Zero the natural parameters above order l, keep expectations below.

    This is the parametric reduction step: project onto the submanifold
    where all interactions above order l vanish while every moment of
    order <= l is preserved.
    """
    mx = mixed_from_distribution(d, l)
    tailored = MixedCoords(d.n, l, mx.eta_low, np.zeros_like(mx.theta_high))
    return distribution_from_mixed(tailored)


def _diag_and_orders(d: Distribution, system: str, l: int):
    if system == "theta":
        fm = fisher_theta(d)
    elif system == "eta":
        fm = fisher_eta(d)
    elif system == "mixed":
        fm = fisher_mixed(d, l)
    else:
        raise ValueError(f"unknown coordinate system {system!r}")
    return np.diag(fm.m).copy(), popcounts(fm.labels)


def information_ratios(d: Distribution, system: str, l: int) -> tuple[float, float]:
    """Confidence ratios for tailoring, both in percent.

    Per-parameter confidence is the diagonal of the Fisher matrix in
    the named system. The tailored set is the k least confident
    parameters, where k counts the coordinates of order above l; in the
    mixed chart these are exactly the high-order natural parameters
    (their diagonal is bounded by 1 from above, the kept block's from
    below). Returns

    * loss_ratio: confidence mass of the tailored set over the total,
    * tail_to_min_kept: largest tailored confidence over smallest kept.
    """
    diag, orders = _diag_and_orders(d, system, l)
    k = int(np.sum(orders > l))
    if k == 0 or k == len(diag):
        return 0.0, 0.0
    sel = np.argsort(diag, kind="stable")
    tail, kept = sel[:k], sel[k:]
    loss = diag[tail].sum() / diag.sum()
    ratio = diag[tail].max() / diag[kept].min()
    return 100.0 * loss, 100.0 * ratio


def max_trace_check(d: Distribution, l: int, trials: int,
                    rng: np.random.Generator) -> bool:
    """Does the CIF-kept block maximize the trace among sampled subsets?

    Draws `trials` random coordinate subsets of the same size as the
    kept block (plus the complement subset) and checks none of their
    principal-submatrix traces exceeds the kept block's.
    """
    fm = fisher_mixed(d, l)
    diag = np.diag(fm.m)
    k = len(mixed_split(d.n, l)[0])
    # sum each subset in sorted order, so a subset with the same
    # members as the kept block produces the same float exactly
    kept_trace = float(np.sort(diag[:k]).sum())
    if float(np.sort(diag[k:]).sum()) > kept_trace + 1e-12:
        return False
    dim = len(diag)
    for _ in range(trials):
        sub = rng.choice(dim, size=k, replace=False)
        if float(np.sort(diag[sub]).sum()) > kept_trace + 1e-12:
            return False
    return True


def fisher_score_oracle(d: Distribution, system: str, l: int | None = None,
                        step: float = 1e-6) -> FisherMatrix:
    """Brute-force score covariance via central finite differences.

    Each coordinate is nudged by +-step, the distribution is rebuilt
    through the real conversion routines, and the score vectors are
    averaged under d. Slow by design; meant to validate the closed
    forms on small n. The default step keeps truncation error near
    1e-8 relative on tables floored away from the boundary while
    staying two orders above the rounding floor.
    """
    if d.n > 8:
        raise ValueError("oracle is O(4^n) work; use n <= 8")
    masks = np.arange(1, 1 << d.n)

    if system == "theta":
        base = theta_from_p(d).theta

        def rebuild(vec):
            return p_from_theta(ThetaCoords(d.n, vec, 0.0))

        coords, labels = base, masks
    elif system == "eta":
        base = eta_from_p(d).eta

        def rebuild(vec):
            return p_from_eta(EtaCoords(d.n, vec))

        coords, labels = base, masks
    elif system == "mixed":
        low, high = mixed_split(d.n, l)
        eta = eta_from_p(d).eta
        theta = theta_from_p(d).theta
        coords = np.concatenate([eta[low - 1], theta[high - 1]])
        labels = np.concatenate([low, high])
        theta_full = np.concatenate(([0.0], theta))

        def rebuild(vec):
            fixed = np.zeros(1 << d.n)
            fixed[high] = vec[len(low):]
            return solve_eta_targets(d.n, low, fixed, vec[:len(low)],
                                     tol=1e-13, max_iter=200,
                                     theta0=theta_full)
    else:
        raise ValueError(f"unknown coordinate system {system!r}")

    scores = np.empty((len(coords), 1 << d.n))
    for i in range(len(coords)):
        plus, minus = coords.copy(), coords.copy()
        plus[i] += step
        minus[i] -= step
        lp = np.log(rebuild(plus).p)
        lm = np.log(rebuild(minus).p)
        scores[i] = (lp - lm) / (2.0 * step)
    m = (scores * d.p) @ scores.T
    return FisherMatrix(system, labels, (m + m.T) / 2.0, l=l)


def fisher_to_json(fm: FisherMatrix) -> dict:
    out = {"system": fm.system, "labels": fm.labels.tolist(),
           "m": fm.m.tolist()}
    if fm.l is not None:
        out["l"] = fm.l
    return out
