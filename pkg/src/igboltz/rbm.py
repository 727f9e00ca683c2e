"""Bipartite Boltzmann machine with hidden units and its trainers.

Joint states over n_x visible and n_h hidden units share one bitmask:
bit i (i < n_x) is visible unit x_{i+1}, bit n_x + j is hidden unit
h_{j+1}. The joint law is proportional to exp(x'Wh + b'x + d'h), so in
natural coordinates the only nonzero entries are the singleton thetas
(b and d) and the visible-hidden pair thetas (W); within-layer pairs
and every order above two vanish identically.

Besides exact maximum likelihood and CD-1, the module implements the
alternating-projection trainer: project the current model onto the set
of joints whose visible marginal is the data distribution (an analytic
step), then project that joint back onto the machine's manifold by
exact-gradient divergence minimization. The first projection can also
be sampled per data row instead of computed analytically, which
reproduces the fluctuation behaviour of the two-phase description.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BadLength,
    CapExceeded,
    DimensionMismatch,
    Diverged,
    NoConvergence,
)
from .sbm import TrainConfig, _sigmoid
from .simplex import (
    Distribution,
    N_CAP,
    ThetaCoords,
    kl_divergence,
    p_from_theta,
    popcounts,
    solve_eta_targets,
    state_matrix,
    superset_zeta,
    theta_from_p,
)


@dataclass(frozen=True)
class RbmParams:
    """Cross couplings W (n_x by n_h), visible biases b, hidden biases d."""

    n_x: int
    n_h: int
    W: np.ndarray
    b: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.W, dtype=float)
        b = np.ascontiguousarray(self.b, dtype=float)
        d = np.ascontiguousarray(self.d, dtype=float)
        if w.shape != (self.n_x, self.n_h) or b.shape != (self.n_x,) \
                or d.shape != (self.n_h,):
            raise DimensionMismatch(
                f"expected W ({self.n_x},{self.n_h}), b ({self.n_x},), "
                f"d ({self.n_h},); got {w.shape}, {b.shape}, {d.shape}")
        for arr in (w, b, d):
            if not np.all(np.isfinite(arr)):
                raise DimensionMismatch("parameters must be finite")
            arr.flags.writeable = False
        object.__setattr__(self, "W", w)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "d", d)


@dataclass(frozen=True)
class JointDistribution:
    """Positive normalized table over the concatenated (x, h) states."""

    n_x: int
    n_h: int
    p: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.p, dtype=float)
        if len(p) != 1 << (self.n_x + self.n_h):
            raise BadLength(
                f"joint table must have 2^{self.n_x + self.n_h} entries")
        if np.any(p <= 0.0) or not np.all(np.isfinite(p)):
            raise DimensionMismatch("joint table must be strictly positive")
        p = p / p.sum()
        p.flags.writeable = False
        object.__setattr__(self, "p", p)

    @property
    def n(self):
        return self.n_x + self.n_h


@dataclass(frozen=True)
class RbmTrainResult:
    """Parameters plus trace; iterates are kept by the projection trainer.

    For ml/cd1 the trace columns are (epoch, kl_to_empirical,
    kl_to_target). For ip they are (iteration, d_q_to_prev_p,
    d_q_to_new_p, kl_marginal_to_empirical, kl_marginal_to_target).
    """

    params: RbmParams
    trace: np.ndarray
    iterates: tuple = ()


def rbm_params_to_json(p: RbmParams) -> dict:
    return {"n_x": p.n_x, "n_h": p.n_h, "W": p.W.tolist(),
            "b": p.b.tolist(), "d": p.d.tolist()}


def rbm_params_from_json(obj) -> RbmParams:
    if not isinstance(obj, dict) or not {"n_x", "n_h", "W", "b", "d"} <= set(obj):
        raise BadLength("params JSON must carry n_x, n_h, W, b, d")
    return RbmParams(int(obj["n_x"]), int(obj["n_h"]),
                     np.asarray(obj["W"], dtype=float),
                     np.asarray(obj["b"], dtype=float),
                     np.asarray(obj["d"], dtype=float))


def _as_dist(j: JointDistribution) -> Distribution:
    return Distribution(j.n, j.p)


# ---------------------------------------------------------------------------
# exact distributions
# ---------------------------------------------------------------------------

def embed_joint_theta(p: RbmParams) -> np.ndarray:
    """Scatter (W, b, d) into a full theta vector over joint masks."""
    n = p.n_x + p.n_h
    if n > N_CAP:
        raise CapExceeded(f"n_x+n_h={n} exceeds the enumeration cap {N_CAP}")
    th = np.zeros(1 << n)
    for i in range(p.n_x):
        th[1 << i] = p.b[i]
    for j in range(p.n_h):
        th[1 << (p.n_x + j)] = p.d[j]
    for i in range(p.n_x):
        for j in range(p.n_h):
            th[(1 << i) | (1 << (p.n_x + j))] = p.W[i, j]
    return th


def rbm_joint(p: RbmParams) -> JointDistribution:
    th = embed_joint_theta(p)
    dist = p_from_theta(ThetaCoords(p.n_x + p.n_h, th[1:], 0.0))
    return JointDistribution(p.n_x, p.n_h, dist.p)


def rbm_marginal_x(j: JointDistribution) -> Distribution:
    # h occupies the high bits, so the joint reshapes to (h, x) blocks
    return Distribution(j.n_x, j.p.reshape(1 << j.n_h, 1 << j.n_x).sum(axis=0))


def rbm_cond_h_given_x(p: RbmParams, x) -> np.ndarray:
    """Per-unit firing probabilities of the hidden layer given x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n_x,):
        raise DimensionMismatch(f"state must have length {p.n_x}")
    return _sigmoid(x @ p.W + p.d)


def _hidden_table(fire: np.ndarray) -> np.ndarray:
    """Product Bernoulli tables: (rows, n_h) firing probs -> (rows, 2^n_h).

    Column k is the probability of the hidden configuration with mask k,
    built by doubling: bit j splits the table into its off and on halves.
    """
    out = np.ones((fire.shape[0], 1))
    for j in range(fire.shape[1]):
        pj = fire[:, [j]]
        out = np.concatenate([out * (1.0 - pj), out * pj], axis=1)
    return out


# ---------------------------------------------------------------------------
# the two projections
# ---------------------------------------------------------------------------

def gamma_h(p: RbmParams, q_x: Distribution) -> JointDistribution:
    """Data-side projection: paste the model's h|x conditional onto q_x.

    The result is the divergence minimizer over all joints whose
    visible marginal is q_x, and that marginal holds exactly by
    construction.
    """
    if q_x.n != p.n_x:
        raise DimensionMismatch(f"q_x has n={q_x.n}, machine has n_x={p.n_x}")
    states = state_matrix(p.n_x).astype(float)
    fire = _sigmoid(states @ p.W + p.d)
    cond = _hidden_table(fire)                      # (2^n_x, 2^n_h)
    # extreme weights can underflow a sigmoid product to exact zero;
    # patch only the affected rows so ordinary machines keep bit-equal
    # output, and renormalize to preserve the visible marginal
    bad = cond.min(axis=1) <= 0.0
    if bad.any():
        patched = np.maximum(cond[bad], np.finfo(float).tiny)
        cond[bad] = patched / patched.sum(axis=1, keepdims=True)
    joint = (cond * q_x.p[:, None]).T.ravel()       # h-major, x within
    return JointDistribution(p.n_x, p.n_h, joint)


def gamma_h_sampled(p: RbmParams, data, rng: np.random.Generator
                    ) -> JointDistribution:
    """Sampled variant: one hidden vector drawn per data row.

    Returns the smoothed empirical joint of the (x, h) pairs; noisier
    than the analytic projection but matches the two-phase procedure.
    """
    from .evaluate import SampleSet, empirical_distribution
    rows = np.asarray(data.rows, dtype=np.int8)
    fire = _sigmoid(rows.astype(float) @ p.W + p.d)
    hidden = (rng.random(fire.shape) < fire).astype(np.int8)
    pairs = SampleSet(p.n_x + p.n_h, np.hstack([rows, hidden]))
    emp = empirical_distribution(pairs)
    return JointDistribution(p.n_x, p.n_h, emp.p)


def _free_masks(n_x: int, n_h: int):
    singles_x = [1 << i for i in range(n_x)]
    singles_h = [1 << (n_x + j) for j in range(n_h)]
    cross = [(1 << i) | (1 << (n_x + j))
             for i in range(n_x) for j in range(n_h)]
    return np.array(singles_x + singles_h + cross, dtype=np.int64)


def _unpack_params(n_x, n_h, xi):
    b = xi[:n_x]
    d = xi[n_x:n_x + n_h]
    w = xi[n_x + n_h:].reshape(n_x, n_h)
    return RbmParams(n_x, n_h, w, b, d)


def gamma_b(q: JointDistribution, cfg: TrainConfig,
            init: RbmParams | None = None) -> RbmParams:
    """Manifold-side projection: fit the machine to a given joint.

    Plain gradient descent on KL(q || model) with the exact moment-gap
    gradient; the step is halved whenever the divergence would rise,
    so the objective never increases. Stops at gradient max-norm below
    1e-5 or after cfg.ip_sub_epochs steps, whichever is first. A stall
    (step underflow while the gradient is still large) raises
    NoConvergence.
    """
    n_x, n_h = q.n_x, q.n_h
    free = _free_masks(n_x, n_h)
    eta_q = superset_zeta(q.p, q.n)[free]
    if init is None:
        marginal_means = eta_q[:n_x + n_h]
        init = RbmParams(n_x, n_h, np.zeros((n_x, n_h)),
                         _logit_clip(marginal_means[:n_x]),
                         _logit_clip(marginal_means[n_x:]))
    xi = np.concatenate([init.b, init.d, init.W.ravel()])
    params = _unpack_params(n_x, n_h, xi)
    model = rbm_joint(params)
    div = kl_divergence(_as_dist(q), _as_dist(model))
    rate = cfg.learning_rate
    for _ in range(cfg.ip_sub_epochs):
        grad = superset_zeta(model.p, q.n)[free] - eta_q
        gnorm = np.abs(grad).max()
        if gnorm < 1e-5:
            break
        while True:
            trial_xi = xi - rate * grad
            trial_params = _unpack_params(n_x, n_h, trial_xi)
            trial_model = rbm_joint(trial_params)
            trial_div = kl_divergence(_as_dist(q), _as_dist(trial_model))
            if trial_div <= div:
                break
            rate *= 0.5
            if rate < 1e-15:
                raise NoConvergence(
                    f"projection stalled at gradient norm {gnorm:.3e}",
                    residual=float(gnorm))
        xi, params, model, div = trial_xi, trial_params, trial_model, trial_div
        rate = min(rate * 1.1, cfg.learning_rate)
    return params


def _logit_clip(q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.clip(np.log(q) - np.log1p(-q), -4.0, 4.0)


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------

def _rbm_init(rows: np.ndarray, n_h: int,
              rng: np.random.Generator) -> RbmParams:
    n_x = rows.shape[1]
    w = rng.uniform(-0.01, 0.01, size=(n_x, n_h))
    b = _logit_clip(rows.mean(axis=0))
    return RbmParams(n_x, n_h, w, b, np.zeros(n_h))


def _collapse(rows: np.ndarray):
    """Unique visible states with weights; positive phases need no more."""
    masks = rows.astype(np.int64) @ (1 << np.arange(rows.shape[1],
                                                    dtype=np.int64))
    unique, counts = np.unique(masks, return_counts=True)
    states = ((unique[:, None] >> np.arange(rows.shape[1])) & 1).astype(float)
    return states, counts / counts.sum()


def _trace_kls(params, emp_x, target):
    if emp_x is None:
        return np.nan, np.nan
    marg = rbm_marginal_x(rbm_joint(params))
    kl_emp = kl_divergence(emp_x, marg)
    kl_tgt = kl_divergence(target, marg) if target is not None else np.nan
    return kl_emp, kl_tgt


def _exact_model_stats(params: RbmParams):
    model = rbm_joint(params)
    free = _free_masks(params.n_x, params.n_h)
    return superset_zeta(model.p, params.n_x + params.n_h)[free]


def rbm_train_ml(data, cfg: TrainConfig,
                 target: Distribution | None = None) -> RbmTrainResult:
    """Likelihood ascent with analytic positive statistics.

    The positive phase marginalizes h exactly per visible state; the
    negative phase enumerates the joint when n_x + n_h <= 14 and falls
    back to blocked Gibbs chains beyond that.
    """
    from .evaluate import empirical_distribution
    rows = np.asarray(data.rows, dtype=np.int8)
    n_x, n_h = rows.shape[1], cfg.n_hidden
    rng = np.random.default_rng(cfg.seed)
    params = _rbm_init(rows, n_h, rng)
    emp_x = empirical_distribution(data) if n_x <= N_CAP else None
    states, weights = _collapse(rows)
    exact = cfg.negative_phase == "exact" and n_x + n_h <= 14
    eps = cfg.learning_rate
    trace = np.full((cfg.max_epochs, 3), np.nan)
    last, streak = np.inf, 0
    for epoch in range(cfg.max_epochs):
        fire = _sigmoid(states @ params.W + params.d)
        pos_b = weights @ states
        pos_d = weights @ fire
        pos_w = states.T @ (fire * weights[:, None])
        if exact:
            stats = _exact_model_stats(params)
            neg_b = stats[:n_x]
            neg_d = stats[n_x:n_x + n_h]
            neg_w = stats[n_x + n_h:].reshape(n_x, n_h)
        else:
            x = (rng.random((cfg.gibbs_chains, n_x)) < 0.5).astype(float)
            for _ in range(cfg.gibbs_steps):
                h = (rng.random((len(x), n_h))
                     < _sigmoid(x @ params.W + params.d)).astype(float)
                x = (rng.random((len(x), n_x))
                     < _sigmoid(h @ params.W.T + params.b)).astype(float)
            hf = _sigmoid(x @ params.W + params.d)
            neg_b, neg_d = x.mean(axis=0), hf.mean(axis=0)
            neg_w = x.T @ hf / len(x)
        params = RbmParams(n_x, n_h, params.W + eps * (pos_w - neg_w),
                           params.b + eps * (pos_b - neg_b),
                           params.d + eps * (pos_d - neg_d))
        kl_emp, kl_tgt = _trace_kls(params, emp_x, target)
        trace[epoch] = (epoch, kl_emp, kl_tgt)
        streak = streak + 1 if kl_emp > last else 0
        if streak >= 50:
            raise Diverged(
                f"KL to data rose for {streak} consecutive epochs",
                result=RbmTrainResult(params, trace[:epoch + 1]))
        last = kl_emp
    return RbmTrainResult(params, trace)


def rbm_train_cd1(data, cfg: TrainConfig,
                  target: Distribution | None = None) -> RbmTrainResult:
    """One blocked Gibbs transition per data row, full-batch updates.

    The chain is h0 ~ p(h|x0), x1 ~ p(x|h0), h1 ~ p(h|x1); statistics
    are the (x0, h0) moments minus the (x1, h1) moments, averaged over
    the epoch and applied once.
    """
    from .evaluate import empirical_distribution
    rows = np.asarray(data.rows, dtype=np.int8).astype(float)
    n_x, n_h = rows.shape[1], cfg.n_hidden
    rng = np.random.default_rng(cfg.seed)
    params = _rbm_init(rows, n_h, rng)
    emp_x = empirical_distribution(data) if n_x <= N_CAP else None
    eps = cfg.learning_rate
    inv_n = 1.0 / len(rows)
    trace = np.full((cfg.max_epochs, 3), np.nan)
    for epoch in range(cfg.max_epochs):
        h0 = (rng.random((len(rows), n_h))
              < _sigmoid(rows @ params.W + params.d)).astype(float)
        x1 = (rng.random((len(rows), n_x))
              < _sigmoid(h0 @ params.W.T + params.b)).astype(float)
        h1 = (rng.random((len(rows), n_h))
              < _sigmoid(x1 @ params.W + params.d)).astype(float)
        dw = (rows.T @ h0 - x1.T @ h1) * inv_n
        db = (rows.sum(axis=0) - x1.sum(axis=0)) * inv_n
        dd = (h0.sum(axis=0) - h1.sum(axis=0)) * inv_n
        params = RbmParams(n_x, n_h, params.W + eps * dw,
                           params.b + eps * db, params.d + eps * dd)
        kl_emp, kl_tgt = _trace_kls(params, emp_x, target)
        trace[epoch] = (epoch, kl_emp, kl_tgt)
    return RbmTrainResult(params, trace)


def rbm_train_ip(data, cfg: TrainConfig, p0: RbmParams | None = None,
                 target: Distribution | None = None) -> RbmTrainResult:
    """Alternate the two projections from the empirical distribution.

    Every iteration records the divergence of the projected joint to
    the machine before and after refitting; with the analytic data-side
    projection the whole chain of divergences is non-increasing. All
    intermediate parameters are retained so the best iterate can be
    selected afterwards.
    """
    from .evaluate import empirical_distribution
    rows = np.asarray(data.rows, dtype=np.int8)
    rng = np.random.default_rng(cfg.seed)
    params = p0 if p0 is not None else _rbm_init(rows, cfg.n_hidden, rng)
    emp_x = empirical_distribution(data)
    trace = np.full((cfg.ip_iterations, 5), np.nan)
    iterates = []
    for it in range(cfg.ip_iterations):
        if cfg.sampled_h:
            q = gamma_h_sampled(params, data, rng)
        else:
            q = gamma_h(params, emp_x)
        d_prev = kl_divergence(_as_dist(q), _as_dist(rbm_joint(params)))
        params = gamma_b(q, cfg, init=params)
        d_new = kl_divergence(_as_dist(q), _as_dist(rbm_joint(params)))
        kl_emp, kl_tgt = _trace_kls(params, emp_x, target)
        trace[it] = (it, d_prev, d_new, kl_emp, kl_tgt)
        iterates.append(params)
    return RbmTrainResult(params, trace, tuple(iterates))


def best_ip_select(result: RbmTrainResult, data=None) -> RbmParams:
    """Iterate with the lowest divergence from the data distribution.

    Uses the trace's recorded KL(empirical || marginal) column; if the
    trace lacks it, the column is recomputed from the supplied data.
    """
    if not result.iterates:
        raise BadLength("result carries no per-iteration parameters")
    kls = result.trace[:, 3]
    if np.any(np.isnan(kls)):
        from .evaluate import empirical_distribution
        emp = empirical_distribution(data)
        kls = np.array([kl_divergence(emp, rbm_marginal_x(rbm_joint(p)))
                        for p in result.iterates])
    return result.iterates[int(np.argmin(kls))]


def rbm_sample_x(p: RbmParams, count: int, rng: np.random.Generator,
                 sweeps: int = 50) -> np.ndarray:
    """Visible samples from blocked Gibbs chains, one per requested row."""
    x = (rng.random((count, p.n_x)) < 0.5).astype(float)
    for _ in range(sweeps):
        h = (rng.random((count, p.n_h))
             < _sigmoid(x @ p.W + p.d)).astype(float)
        x = (rng.random((count, p.n_x))
             < _sigmoid(h @ p.W.T + p.b)).astype(float)
    return x.astype(np.int8)


# ---------------------------------------------------------------------------
# the fractional chart
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FractionalMixed:
    """Mixed chart whose second order splits across the bipartition.

    Cross visible-hidden pairs are expectation coordinates while
    within-layer pairs stay natural, exactly matching the machine's
    parameter layout. Field layouts: eta1_x by visible index, eta1_h by
    hidden index, theta_xx / theta_hh by lexicographic pair, eta_xh by
    (visible, hidden), theta_high over masks of order three and up in
    (cardinality, mask) order.
    """

    n_x: int
    n_h: int
    eta1_x: np.ndarray
    eta1_h: np.ndarray
    theta_xx: np.ndarray
    theta_hh: np.ndarray
    eta_xh: np.ndarray
    theta_high: np.ndarray

    def __post_init__(self):
        n_x, n_h = self.n_x, self.n_h
        n = n_x + n_h
        high_count = (1 << n) - 1 - n - n * (n - 1) // 2
        want = {
            "eta1_x": n_x, "eta1_h": n_h,
            "theta_xx": n_x * (n_x - 1) // 2,
            "theta_hh": n_h * (n_h - 1) // 2,
            "eta_xh": n_x * n_h, "theta_high": high_count,
        }
        for name, size in want.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            if arr.shape != (size,):
                raise DimensionMismatch(
                    f"{name} must have length {size}, got {arr.shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def _fractional_masks(n_x: int, n_h: int):
    xx = [(1 << i) | (1 << k)
          for i in range(n_x) for k in range(i + 1, n_x)]
    hh = [(1 << (n_x + j)) | (1 << (n_x + m))
          for j in range(n_h) for m in range(j + 1, n_h)]
    n = n_x + n_h
    masks = np.arange(1, 1 << n)
    high = masks[popcounts(masks) > 2]
    order = np.lexsort((high, popcounts(high)))
    return np.array(xx, np.int64), np.array(hh, np.int64), high[order]


def fractional_from_joint(j: JointDistribution) -> FractionalMixed:
    n_x, n_h = j.n_x, j.n_h
    eta = superset_zeta(j.p, j.n)
    theta = np.concatenate(([0.0], theta_from_p(_as_dist(j)).theta))
    xx, hh, high = _fractional_masks(n_x, n_h)
    cross = _free_masks(n_x, n_h)[n_x + n_h:]
    return FractionalMixed(
        n_x, n_h,
        eta[[1 << i for i in range(n_x)]],
        eta[[1 << (n_x + jj) for jj in range(n_h)]],
        theta[xx], theta[hh], eta[cross], theta[high])


def joint_from_fractional(fm: FractionalMixed, tol: float = 1e-10,
                          max_iter: int = 500) -> JointDistribution:
    """Invert the fractional chart by the constrained moment solve."""
    n = fm.n_x + fm.n_h
    xx, hh, high = _fractional_masks(fm.n_x, fm.n_h)
    fixed = np.zeros(1 << n)
    fixed[xx] = fm.theta_xx
    fixed[hh] = fm.theta_hh
    fixed[high] = fm.theta_high
    free = _free_masks(fm.n_x, fm.n_h)
    targets = np.concatenate([fm.eta1_x, fm.eta1_h, fm.eta_xh])
    out = solve_eta_targets(n, free, fixed, targets, tol=tol,
                            max_iter=max_iter)
    return JointDistribution(fm.n_x, fm.n_h, out.p)
