"""Exact coordinate systems for distributions of n binary variables.

A distribution lives on the open simplex over the 2^n joint states.
States and variable subsets share one bitmask convention: bit i-1 of a
mask corresponds to variable x_i, so state mask m has x_i = 1 iff bit
i-1 of m is set. Probability vectors are laid out in increasing-mask
order. Everything here is a pure function over immutable values.

Three equivalent charts are provided besides the raw table p:

* eta:   expectation parameters, eta_I = E[prod_{i in I} x_i]
* theta: natural (log-linear) parameters with log normalizer psi
* mixed: eta up to order l combined with theta above order l

All conversions are O(n 2^n) lattice transforms except the mixed
reconstruction, which is a damped Newton solve on the free low-order
natural parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadLength,
    BadOrder,
    CapExceeded,
    DimensionMismatch,
    NoConvergence,
    NonPositiveEntry,
    NonPositiveReconstruction,
    NonRealizable,
    ThetaOverflow,
)

N_CAP = 20


# ---------------------------------------------------------------------------
# bitmask lattice transforms
# ---------------------------------------------------------------------------

def _sweep(v: np.ndarray, n: int, src: int, dst: int, sign: float) -> np.ndarray:
    """One in-place pass per axis over the [2]*n hypercube view."""
    a = np.array(v, dtype=float).reshape([2] * n)
    for ax in range(n):
        lo = [slice(None)] * n
        hi = [slice(None)] * n
        lo[ax], hi[ax] = src, dst
        a[tuple(hi)] += sign * a[tuple(lo)]
    return a.reshape(-1)


def subset_zeta(v, n):
    """out[m] = sum over k subseteq m of v[k]."""
    return _sweep(v, n, 0, 1, +1.0)


def subset_moebius(v, n):
    """Inverse of subset_zeta."""
    return _sweep(v, n, 0, 1, -1.0)


def superset_zeta(v, n):
    """out[m] = sum over k superseteq m of v[k]."""
    return _sweep(v, n, 1, 0, +1.0)


def superset_moebius(v, n):
    """Inverse of superset_zeta."""
    return _sweep(v, n, 1, 0, -1.0)


def popcounts(masks) -> np.ndarray:
    return np.bitwise_count(np.asarray(masks, dtype=np.uint32)).astype(np.int64)


def state_matrix(n: int) -> np.ndarray:
    """All 2^n states as a (2^n, n) 0/1 matrix; column j is variable x_{j+1}."""
    return ((np.arange(1 << n)[:, None] >> np.arange(n)) & 1).astype(np.uint8)


def mixed_split(n: int, l: int) -> tuple[np.ndarray, np.ndarray]:
    """Partition the nonempty masks into (order <= l, order > l).

    Both halves are sorted by cardinality first, mask second, which is
    the layout every mixed-coordinate vector in this package uses.
    """
    if not 1 <= l <= n:
        raise BadOrder(f"order threshold l={l} outside 1..{n}")
    masks = np.arange(1, 1 << n)
    order = popcounts(masks)
    key = np.lexsort((masks, order))
    masks, order = masks[key], order[key]
    return masks[order <= l], masks[order > l]


# ---------------------------------------------------------------------------
# coordinate containers
# ---------------------------------------------------------------------------

def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Distribution:
    """Strictly positive probability table over 2^n states."""

    n: int
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _freeze(self.p))

    def prob(self, state_mask: int) -> float:
        return float(self.p[state_mask])


@dataclass(frozen=True)
class EtaCoords:
    """Expectation parameters; eta[m-1] is the coordinate of mask m."""

    n: int
    eta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eta", _freeze(self.eta))

    def value(self, mask: int) -> float:
        return float(self.eta[mask - 1])


@dataclass(frozen=True)
class ThetaCoords:
    """Natural parameters plus log normalizer; theta[m-1] for mask m."""

    n: int
    theta: np.ndarray
    psi: float

    def __post_init__(self):
        object.__setattr__(self, "theta", _freeze(self.theta))

    def value(self, mask: int) -> float:
        return float(self.theta[mask - 1])


@dataclass(frozen=True)
class MixedCoords:
    """Order threshold l, expectation block below it, natural block above.

    eta_low and theta_high are aligned with the two halves returned by
    mixed_split(n, l).
    """

    n: int
    l: int
    eta_low: np.ndarray
    theta_high: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        low, high = mixed_split(self.n, self.l)
        if len(self.eta_low) != len(low) or len(self.theta_high) != len(high):
            raise DimensionMismatch(
                f"mixed blocks must have sizes {len(low)}/{len(high)}, "
                f"got {len(self.eta_low)}/{len(self.theta_high)}"
            )
        object.__setattr__(self, "eta_low", _freeze(self.eta_low))
        object.__setattr__(self, "theta_high", _freeze(self.theta_high))


# ---------------------------------------------------------------------------
# constructors and conversions
# ---------------------------------------------------------------------------

def distribution_from_p(table) -> Distribution:
    """Validate and normalize a raw probability table.

    The table length must be a power of two (n is inferred from it) and
    every entry must be strictly positive: the geometry only exists on
    the open simplex.
    """
    p = np.asarray(table, dtype=float).reshape(-1)
    if len(p) < 2 or (len(p) & (len(p) - 1)) != 0:
        raise BadLength(f"table length {len(p)} is not a power of two >= 2")
    n = int(len(p)).bit_length() - 1
    if n > N_CAP:
        raise CapExceeded(f"n={n} exceeds the exact-enumeration cap {N_CAP}")
    if not np.all(np.isfinite(p)) or np.any(p <= 0.0):
        raise NonPositiveEntry("every probability must be finite and > 0")
    return Distribution(n, p / p.sum())


def eta_from_p(d: Distribution) -> EtaCoords:
    """eta_I = sum of p over all states containing I."""
    full = superset_zeta(d.p, d.n)
    return EtaCoords(d.n, full[1:])


def p_from_eta(e: EtaCoords) -> Distribution:
    """Invert the expectation chart by inclusion-exclusion."""
    full = np.concatenate(([1.0], np.asarray(e.eta, dtype=float)))
    p = superset_moebius(full, e.n)
    if np.any(p <= 0.0):
        raise NonPositiveReconstruction(
            f"eta values imply a cell <= 0 (min {p.min():.3e})"
        )
    return Distribution(e.n, p / p.sum())


def theta_from_p(d: Distribution) -> ThetaCoords:
    """Natural parameters via the alternating subset sum over log p."""
    logp = np.log(d.p)
    full = subset_moebius(logp, d.n)
    return ThetaCoords(d.n, full[1:], psi=float(-logp[0]))


def p_from_theta(t: ThetaCoords) -> Distribution:
    """Exponentiate and normalize; the stored psi is ignored and recomputed.

    The log-sum-exp shift keeps the arithmetic finite for any input, but
    if the spread of the state log-weights is so large that a normalized
    cell underflows to exact zero the result would leave the open
    simplex, which is reported as ThetaOverflow.
    """
    full = np.concatenate(([0.0], np.asarray(t.theta, dtype=float)))
    s = subset_zeta(full, t.n)
    s -= s.max()
    p = np.exp(s)
    p /= p.sum()
    if np.any(p == 0.0):
        raise ThetaOverflow(
            "theta spread exceeds the floating-point range of the simplex"
        )
    return Distribution(t.n, p)


def psi_of(t: ThetaCoords) -> float:
    """Log normalizer recomputed from theta."""
    full = np.concatenate(([0.0], np.asarray(t.theta, dtype=float)))
    s = subset_zeta(full, t.n)
    m = s.max()
    return float(m + np.log(np.exp(s - m).sum()))


def phi_of(d: Distribution) -> float:
    """Negative entropy, the dual potential of psi."""
    return float(np.sum(d.p * np.log(d.p)))


def kl_divergence(q: Distribution, p: Distribution) -> float:
    """KL(q || p) in nats."""
    if q.n != p.n:
        raise DimensionMismatch(f"q has n={q.n}, p has n={p.n}")
    return float(np.sum(q.p * (np.log(q.p) - np.log(p.p))))


def mixed_from_distribution(d: Distribution, l: int) -> MixedCoords:
    low, high = mixed_split(d.n, l)
    eta = eta_from_p(d).eta
    theta = theta_from_p(d).theta
    return MixedCoords(d.n, l, eta[low - 1], theta[high - 1])


def distribution_from_mixed(m: MixedCoords, tol: float = 1e-8,
                            max_iter: int = 500) -> Distribution:
    """Reconstruct the unique distribution with the given mixed coordinates.

    The high-order natural parameters are held fixed while the free
    low-order ones are solved so the low-order expectations hit their
    targets. See solve_eta_targets for the solver contract.
    """
    low, high = mixed_split(m.n, m.l)
    eta_low = np.asarray(m.eta_low, dtype=float)
    if np.any(eta_low <= 0.0) or np.any(eta_low >= 1.0):
        raise NonRealizable("every expectation parameter must lie in (0,1)")
    # monotonicity under subset inclusion, checked pairwise within the block
    pos = {int(mask): i for i, mask in enumerate(low)}
    for mask, i in pos.items():
        for j_mask, j in pos.items():
            if j_mask != mask and (mask & j_mask) == mask:
                if eta_low[i] < eta_low[j] - 1e-12:
                    raise NonRealizable(
                        f"eta of mask {mask} below eta of superset {j_mask}"
                    )
    if len(high) == 0:
        # pure expectation chart: invert in closed form
        return p_from_eta(EtaCoords(m.n, eta_low_in_mask_order(m)))
    fixed_theta = np.zeros(1 << m.n)
    fixed_theta[high] = m.theta_high
    return solve_eta_targets(m.n, low, fixed_theta, eta_low, tol=tol,
                             max_iter=max_iter)


def eta_low_in_mask_order(m: MixedCoords) -> np.ndarray:
    """Rearrange a full eta_low block (l = n) into increasing-mask layout."""
    low, _ = mixed_split(m.n, m.l)
    out = np.empty(len(low))
    out[low - 1] = m.eta_low
    return out


def solve_eta_targets(n: int, free_masks: np.ndarray, fixed_theta: np.ndarray,
                      eta_targets: np.ndarray, tol: float = 1e-8,
                      max_iter: int = 500,
                      theta0: np.ndarray | None = None) -> Distribution:
    """Damped Newton solve for natural parameters meeting expectation targets.

    Parameters
    ----------
    n : variable count.
    free_masks : masks whose theta is free; their eta must hit eta_targets.
    fixed_theta : length-2^n vector giving theta for every other mask
        (entries at free masks and mask 0 are ignored).
    eta_targets : target expectations aligned with free_masks.
    tol : convergence threshold on the max absolute eta residual.
    max_iter : Newton iteration cap.
    theta0 : optional warm start; free entries are taken from this
        length-2^n vector instead of zero.

    The residual is the gradient of the strictly concave dual objective
    sum_free theta^I eta_I - psi(theta), so the Newton direction is an
    ascent direction and a halving line search on that objective makes
    the iteration globally convergent on realizable targets; near the
    solution it is quadratic. Raises NoConvergence (with the final
    residual attached) if the cap or a stall is hit.
    """
    free_masks = np.asarray(free_masks, dtype=np.int64)
    targets = np.asarray(eta_targets, dtype=float)
    theta = np.array(fixed_theta, dtype=float)
    theta[0] = 0.0
    theta[free_masks] = 0.0 if theta0 is None else theta0[free_masks]

    def state_of(th):
        s = subset_zeta(th, n)
        shift = s.max()
        p = np.exp(s - shift)
        z = p.sum()
        p /= z
        psi = shift + np.log(z)
        gain = float(th[free_masks] @ targets) - psi
        return superset_zeta(p, n), p, gain

    eta_full, p, gain = state_of(theta)
    res = targets - eta_full[free_masks]
    union = free_masks[:, None] | free_masks[None, :]
    lam = 0.0
    eye = np.eye(len(free_masks))
    for _ in range(max_iter):
        worst = np.abs(res).max()
        if worst < tol:
            return Distribution(n, p)
        eta_free = eta_full[free_masks]
        jac = eta_full[union] - np.outer(eta_free, eta_free)
        # absolute floor matters: at a near point mass the whole block
        # underflows to zero and a relative floor would never regularize
        scale = max(np.trace(jac) / len(jac), 1e-8)
        accepted = False
        while not accepted:
            try:
                step = np.linalg.solve(jac + (lam * scale) * eye, res)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(jac, res, rcond=None)[0]
            # keep single jumps inside the numerically sane region
            t = min(1.0, 20.0 / max(np.abs(step).max(), 1e-300))
            plateau = 1e-12 * (1.0 + abs(gain))
            while t >= 1e-10:
                trial = theta.copy()
                trial[free_masks] += t * step
                eta_trial, p_trial, gain_trial = state_of(trial)
                r_trial = np.abs(targets - eta_trial[free_masks]).max()
                better_gain = gain_trial > gain
                # residual progress alone only counts once the gain has
                # saturated at float resolution, else wild steps that
                # happen to shrink the residual would be kept
                endgame = r_trial < worst and gain_trial >= gain - plateau
                if np.isfinite(gain_trial) and (better_gain or endgame):
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                # direction was numerically useless; blend toward plain
                # gradient ascent and try again
                lam = max(lam * 100.0, 1e-10)
                if lam > 1e18:
                    raise NoConvergence(
                        "expectation-target solve stalled at residual "
                        f"{worst:.3e}", residual=worst)
        lam *= 0.1
        theta, eta_full, p, gain = trial, eta_trial, p_trial, gain_trial
        res = targets - eta_full[free_masks]
    worst = np.abs(res).max()
    if worst < tol:
        return Distribution(n, p)
    raise NoConvergence(
        f"expectation-target solve hit the {max_iter}-iteration cap "
        f"at residual {worst:.3e}",
        residual=worst,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def distribution_to_json(d: Distribution) -> dict:
    return {"n": d.n, "p": d.p.tolist()}


def distribution_from_json(obj) -> Distribution:
    if not isinstance(obj, dict) or "p" not in obj:
        raise BadLength("distribution JSON must be an object with a 'p' list")
    d = distribution_from_p(obj["p"])
    if "n" in obj and int(obj["n"]) != d.n:
        raise DimensionMismatch(
            f"declared n={obj['n']} but table implies n={d.n}"
        )
    return d
