"""Fully visible Boltzmann machine: exact stationary law, Gibbs dynamics,
and three trainers (exact maximum likelihood, CD-1, and the confidence-
filtered CD variant that masks weak pairwise couplings before training).

Parameters are a symmetric zero-diagonal coupling matrix U and a bias
vector b over n binary units, giving the energy -x'Ux/2 - b'x. The
stationary distribution is the Gibbs law exp(-E)/Z, which in natural
coordinates means theta at singleton masks equals b, theta at pair
masks equals the corresponding U entry, and everything above order two
vanishes. That embedding is how the stationary table is computed here:
scatter (b, U) into a theta vector and exponentiate through the subset
transform, so the structural zero pattern holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadLength, CapExceeded, DimensionMismatch, Diverged
from .simplex import (
    Distribution,
    ThetaCoords,
    kl_divergence,
    N_CAP,
    p_from_theta,
    state_matrix,
)


@dataclass(frozen=True)
class SbmParams:
    """Couplings U (symmetric, zero diagonal) and biases b for n units."""

    n: int
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(self.U, dtype=float)
        b = np.ascontiguousarray(self.b, dtype=float)
        if u.shape != (self.n, self.n) or b.shape != (self.n,):
            raise DimensionMismatch(
                f"expected U ({self.n},{self.n}) and b ({self.n},), "
                f"got {u.shape} and {b.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(b))):
            raise DimensionMismatch("parameters must be finite")
        if not np.array_equal(u, u.T) or np.any(np.diag(u) != 0.0):
            raise DimensionMismatch("U must be exactly symmetric with zero diagonal")
        u.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "U", u)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class TrainConfig:
    """Shared trainer knobs for both machine families.

    negative_phase selects how model statistics are estimated for ML
    ("exact" enumerates all states, "gibbs" averages over sampled
    chains). cif_r is the CD-CIF threshold fraction: a number in
    [0, 1), or "auto" for the sample-size rule r = max(0, 1 - alpha/N).
    The learning rate is applied to full-batch mean statistics once per
    epoch. The n_hidden/ip_* fields only matter for the hidden-layer
    machine: ip_iterations outer projection rounds, each running the
    manifold-side sub-learning for at most ip_sub_epochs gradient
    steps; sampled_h switches the data-side projection from the
    analytic conditional to per-row sampled hidden states.
    """

    learning_rate: float = 0.1
    max_epochs: int = 1000
    seed: int = 0
    negative_phase: str = "exact"
    gibbs_steps: int = 1
    gibbs_chains: int = 100
    cif_r: float | str = "auto"
    cif_alpha: float = 35.0
    n_hidden: int = 5
    ip_iterations: int = 40
    ip_sub_epochs: int = 200
    sampled_h: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DimensionMismatch("learning_rate must be >= 0")
        if self.negative_phase not in ("exact", "gibbs"):
            raise DimensionMismatch(
                f"negative_phase must be 'exact' or 'gibbs', "
                f"got {self.negative_phase!r}")
        if isinstance(self.cif_r, str):
            if self.cif_r != "auto":
                raise DimensionMismatch("cif_r must be a number or 'auto'")
        elif not 0.0 <= float(self.cif_r) < 1.0:
            raise DimensionMismatch("cif_r must lie in [0, 1)")
        if self.n_hidden < 0 or self.ip_iterations < 1 or self.ip_sub_epochs < 1:
            raise DimensionMismatch("hidden/iteration counts out of range")


@dataclass(frozen=True)
class SbmTrainResult:
    """Final parameters plus the per-epoch trace.

    trace columns: epoch, KL(empirical || model), KL(target || model);
    the KL entries are NaN when the model is too large to enumerate or
    no target was supplied. kept/r are only set by the CIF trainer.
    """

    params: SbmParams
    trace: np.ndarray
    kept: np.ndarray | None = None
    r: float | None = None


def sbm_params_to_json(p: SbmParams) -> dict:
    return {"n": p.n, "U": p.U.tolist(), "b": p.b.tolist()}


def sbm_params_from_json(obj) -> SbmParams:
    if not isinstance(obj, dict) or not {"n", "U", "b"} <= set(obj):
        raise BadLength("params JSON must carry n, U and b")
    return SbmParams(int(obj["n"]), np.asarray(obj["U"], dtype=float),
                     np.asarray(obj["b"], dtype=float))


# ---------------------------------------------------------------------------
# energy and exact distribution
# ---------------------------------------------------------------------------

def sbm_energy(p: SbmParams, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n,):
        raise DimensionMismatch(f"state must have length {p.n}")
    return float(-0.5 * x @ p.U @ x - p.b @ x)


def embed_theta(p: SbmParams) -> np.ndarray:
    """Natural parameters of the stationary law, one entry per mask."""
    if p.n > N_CAP:
        raise CapExceeded(f"n={p.n} exceeds the exact-enumeration cap {N_CAP}")
    th = np.zeros(1 << p.n)
    for i in range(p.n):
        th[1 << i] = p.b[i]
        for j in range(i + 1, p.n):
            th[(1 << i) | (1 << j)] = p.U[i, j]
    return th


def sbm_stationary(p: SbmParams) -> Distribution:
    """Exact Gibbs law by enumeration; raises CapExceeded past n=20."""
    th = embed_theta(p)
    return p_from_theta(ThetaCoords(p.n, th[1:], 0.0))


# ---------------------------------------------------------------------------
# Gibbs dynamics
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sweep_chains(p: SbmParams, states: np.ndarray,
                  rng: np.random.Generator) -> None:
    """One sequential sweep, in place, over a (chains, n) 0/1 array.

    Units are visited in index order; each resampling conditions on the
    current values of all the others. The diagonal of U is zero so the
    unit's own bit never leaks into its activation.
    """
    for i in range(p.n):
        act = states @ p.U[i] + p.b[i]
        states[:, i] = rng.random(len(states)) < _sigmoid(act)


def sbm_gibbs_step(p: SbmParams, x0, rng: np.random.Generator) -> np.ndarray:
    x = np.array(x0, dtype=np.int8).reshape(1, -1)
    if x.shape[1] != p.n:
        raise DimensionMismatch(f"state must have length {p.n}")
    _sweep_chains(p, x, rng)
    return x[0]


def sbm_sample(p: SbmParams, count: int, rng: np.random.Generator,
               sweeps: int = 50) -> np.ndarray:
    """Draw `count` approximate stationary states, one per parallel chain."""
    states = (rng.random((count, p.n)) < 0.5).astype(np.int8)
    for _ in range(sweeps):
        _sweep_chains(p, states, rng)
    return states


def sweep_transition_matrix(p: SbmParams) -> np.ndarray:
    """Dense kernel of one full sequential sweep (rows = source states).

    Intended for validation at small n: the exact stationary vector
    must be a left fixed point.
    """
    if p.n > 12:
        raise DimensionMismatch("dense kernel is 4^n; use n <= 12")
    size = 1 << p.n
    states = state_matrix(p.n).astype(float)
    kernel = np.eye(size)
    # composing the per-unit kernels in index order realizes the sweep;
    # U's zero diagonal keeps a unit's own bit out of its activation,
    # so each fire probability is valid for every source state
    for i in range(p.n):
        fire = _sigmoid(states @ p.U[i] + p.b[i])
        step = np.zeros((size, size))
        rows = np.arange(size)
        step[rows, rows | (1 << i)] += fire
        step[rows, rows & ~(1 << i)] += 1.0 - fire
        kernel = kernel @ step
    return kernel


# ---------------------------------------------------------------------------
# trainers
# ---------------------------------------------------------------------------

def _data_matrix(data) -> np.ndarray:
    rows = np.asarray(data.rows, dtype=np.int8)
    if rows.ndim != 2 or rows.shape[1] != data.n:
        raise DimensionMismatch("sample rows must form an (N, n) 0/1 matrix")
    return rows


def _init_params(rows: np.ndarray) -> SbmParams:
    n = rows.shape[1]
    marg = rows.mean(axis=0)
    with np.errstate(divide="ignore"):
        b = np.clip(np.log(marg) - np.log1p(-marg), -4.0, 4.0)
    return SbmParams(n, np.zeros((n, n)), b)


def _model_moments(d: Distribution, n: int):
    s = state_matrix(n).astype(float)
    first = d.p @ s
    second = s.T @ (s * d.p[:, None])
    return first, second


def _trace_kl(params: SbmParams, emp: Distribution | None,
              target: Distribution | None):
    if emp is None:
        return np.nan, np.nan
    model = sbm_stationary(params)
    kl_emp = kl_divergence(emp, model)
    kl_tgt = kl_divergence(target, model) if target is not None else np.nan
    return kl_emp, kl_tgt


def sbm_train_ml(data, cfg: TrainConfig,
                 target: Distribution | None = None) -> SbmTrainResult:
    """Plain gradient ascent on the log-likelihood.

    The positive statistics are the sample moments; the negative ones
    come from the exact stationary law (negative_phase="exact") or
    from Gibbs chains. Raises Diverged if the KL to the empirical
    distribution rises fifty epochs in a row.
    """
    from .evaluate import empirical_distribution  # import cycle with runner
    rows = _data_matrix(data)
    n = rows.shape[1]
    emp = empirical_distribution(data) if n <= N_CAP else None
    if emp is not None:
        # match the smoothed empirical law exactly, so the fixed point
        # preserves the same moments the divergence trace is scored on
        emp1, emp2 = _model_moments(emp, n)
    else:
        emp1 = rows.mean(axis=0)
        emp2 = rows.T.astype(float) @ rows.astype(float) / len(rows)
    params = _init_params(rows)
    rng = np.random.default_rng(cfg.seed)
    eps = cfg.learning_rate
    off = ~np.eye(n, dtype=bool)
    trace = np.full((cfg.max_epochs, 3), np.nan)
    last = np.inf
    streak = 0
    for epoch in range(cfg.max_epochs):
        if cfg.negative_phase == "exact":
            mod1, mod2 = _model_moments(sbm_stationary(params), n)
        else:
            chains = (rng.random((cfg.gibbs_chains, n)) < 0.5).astype(np.int8)
            for _ in range(cfg.gibbs_steps):
                _sweep_chains(params, chains, rng)
            mod1 = chains.mean(axis=0)
            mod2 = chains.T.astype(float) @ chains.astype(float) / len(chains)
        u = params.U + np.where(off, eps * (emp2 - mod2), 0.0)
        b = params.b + eps * (emp1 - mod1)
        params = SbmParams(n, u, b)
        kl_emp, kl_tgt = _trace_kl(params, emp, target)
        trace[epoch] = (epoch, kl_emp, kl_tgt)
        streak = streak + 1 if kl_emp > last else 0
        if streak >= 50:
            raise Diverged(
                f"KL to data rose for {streak} consecutive epochs",
                result=SbmTrainResult(params, trace[:epoch + 1]))
        last = kl_emp
    return SbmTrainResult(params, trace)


def _cd_train(data, cfg: TrainConfig, keep: np.ndarray | None,
              target: Distribution | None) -> SbmTrainResult:
    from .evaluate import empirical_distribution
    rows = _data_matrix(data)
    n = rows.shape[1]
    emp = empirical_distribution(data) if n <= N_CAP else None
    pos1 = rows.mean(axis=0)
    pos2 = rows.T.astype(float) @ rows.astype(float) / len(rows)
    params = _init_params(rows)
    rng = np.random.default_rng(cfg.seed)
    eps = cfg.learning_rate
    gate = np.ones((n, n), dtype=bool) if keep is None else keep
    gate = gate & ~np.eye(n, dtype=bool)
    trace = np.full((cfg.max_epochs, 3), np.nan)
    for epoch in range(cfg.max_epochs):
        rec = rows.astype(np.int8).copy()
        _sweep_chains(params, rec, rng)
        neg1 = rec.mean(axis=0)
        neg2 = rec.T.astype(float) @ rec.astype(float) / len(rec)
        u = params.U + np.where(gate, eps * (pos2 - neg2), 0.0)
        b = params.b + eps * (pos1 - neg1)
        params = SbmParams(n, u, b)
        kl_emp, kl_tgt = _trace_kl(params, emp, target)
        trace[epoch] = (epoch, kl_emp, kl_tgt)
    return SbmTrainResult(params, trace)


def sbm_train_cd1(data, cfg: TrainConfig,
                  target: Distribution | None = None) -> SbmTrainResult:
    """One-step contrastive divergence, full batch.

    Every data row seeds one Gibbs sweep; the negative statistics are
    the swept rows' moments, accumulated over the epoch and applied in
    a single update.
    """
    return _cd_train(data, cfg, None, target)


def pair_confidence(rows: np.ndarray) -> np.ndarray:
    """F for every ordered pair: variance of x_i x_j under the sample."""
    rows = np.asarray(rows, dtype=float)
    eta2 = rows.T @ rows / len(rows)
    f = eta2 - eta2 ** 2
    np.fill_diagonal(f, 0.0)
    return f


def resolve_cif_r(cfg: TrainConfig, n_samples: int) -> float:
    if isinstance(cfg.cif_r, str):
        return max(0.0, 1.0 - cfg.cif_alpha / n_samples)
    return float(cfg.cif_r)


def sbm_train_cd_cif(data, cfg: TrainConfig,
                     target: Distribution | None = None) -> SbmTrainResult:
    """CD-1 restricted to the confident couplings.

    Before training, each pair's confidence F = E[x_i x_j] - E[x_i x_j]^2
    is estimated from the raw sample moments. Pairs at or below the
    threshold tau = r * sum_{i<j} F are dropped: they are removed from
    every activation sum and their weights stay frozen at zero. Biases
    are never masked. r = 0 keeps everything, making the run
    reproduce CD-1 exactly under a shared seed.
    """
    rows = _data_matrix(data)
    f = pair_confidence(rows)
    total = f[np.triu_indices(rows.shape[1], k=1)].sum()
    r = resolve_cif_r(cfg, len(rows))
    tau = r * total
    keep = f > tau if tau > 0.0 else np.ones_like(f, dtype=bool)
    np.fill_diagonal(keep, False)
    out = _cd_train(data, cfg, keep, target)
    return SbmTrainResult(out.params, out.trace, kept=keep, r=r)
