"""Targets, samples, metrics, and the reproducible experiment grid.

Evaluation convention used everywhere: a trained model is scored by
KL(target || model) for synthetic density tasks, and by the average
nearest-neighbour Hamming distance from data rows to generated rows
for corpus tasks. Targets are drawn uniformly from the open simplex.

Every trial of an experiment grid derives its own RNG from
(master_seed, stage, target, repeat, N, method), so results are
bit-identical no matter how many worker processes execute the grid.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadLength, CapExceeded, DimensionMismatch, IgboltzError
from .simplex import Distribution, N_CAP, distribution_from_p, kl_divergence


@dataclass(frozen=True)
class SampleSet:
    """N observed binary states over n variables, rows of an (N, n) matrix."""

    n: int
    rows: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.int8)
        if rows.ndim != 2 or rows.shape[1] != self.n:
            raise DimensionMismatch(
                f"rows must form an (N, {self.n}) matrix, got {rows.shape}")
        if rows.size and not np.isin(rows, (0, 1)).all():
            raise DimensionMismatch("sample entries must be 0 or 1")
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)

    def __len__(self):
        return len(self.rows)


# ---------------------------------------------------------------------------
# generation and estimation
# ---------------------------------------------------------------------------

def sample_target(n: int, rng: np.random.Generator) -> Distribution:
    """Uniform draw from the open simplex over the 2^n states.

    Normalized i.i.d. standard exponentials; a zero variate (possible
    at float resolution) is redrawn to stay strictly inside.
    """
    if n > N_CAP:
        raise CapExceeded(f"n={n} exceeds the exact-enumeration cap {N_CAP}")
    w = rng.standard_exponential(1 << n)
    while np.any(w == 0.0):
        w[w == 0.0] = rng.standard_exponential(int((w == 0.0).sum()))
    return distribution_from_p(w)


def draw_samples(d: Distribution, count: int, rng: np.random.Generator,
                 meta: dict | None = None) -> SampleSet:
    masks = rng.choice(1 << d.n, size=count, p=d.p)
    rows = (masks[:, None] >> np.arange(d.n)) & 1
    return SampleSet(d.n, rows, meta or {})


def empirical_distribution(s: SampleSet) -> Distribution:
    """Smoothed relative frequencies.

    Each of the 2^n cells gets an extra 1/(N 2^n) pseudo-count before
    renormalizing, which keeps the estimate inside the open simplex
    without moving any frequency by more than 1/N.
    """
    if s.n > N_CAP:
        raise CapExceeded(f"n={s.n} exceeds the exact-enumeration cap {N_CAP}")
    if len(s) == 0:
        raise BadLength("need at least one sample")
    masks = s.rows.astype(np.int64) @ (1 << np.arange(s.n, dtype=np.int64))
    counts = np.bincount(masks, minlength=1 << s.n).astype(float)
    return distribution_from_p(counts + 1.0 / (len(s) * (1 << s.n)))


def hamming_eval(data: SampleSet, generated: SampleSet) -> float:
    """Mean over data rows of the distance to the closest generated row."""
    if data.n != generated.n:
        raise DimensionMismatch(f"n mismatch: {data.n} vs {generated.n}")
    if len(data) == 0 or len(generated) == 0:
        raise BadLength("both sample sets must be non-empty")
    a = data.rows.astype(np.float64)
    g = generated.rows.astype(np.float64)
    total = 0.0
    for start in range(0, len(a), 512):
        block = a[start:start + 512]
        # Hamming distance expands to x(1-y) + (1-x)y summed over bits
        dist = block @ (1.0 - g.T) + (1.0 - block) @ g.T
        total += dist.min(axis=1).sum()
    return total / len(a)


# ---------------------------------------------------------------------------
# sample-file format
# ---------------------------------------------------------------------------

def sampleset_to_lines(s: SampleSet) -> str:
    """One state per line as a 0/1 string; character j is variable x_{j+1}."""
    return "\n".join("".join(map(str, row)) for row in s.rows) + "\n"


def sampleset_from_lines(text: str, meta: dict | None = None) -> SampleSet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise BadLength("no sample rows found")
    width = len(lines[0])
    rows = np.empty((len(lines), width), dtype=np.int8)
    for i, ln in enumerate(lines):
        if len(ln) != width:
            raise BadLength(
                f"row {i + 1} has length {len(ln)}, expected {width}")
        if set(ln) - {"0", "1"}:
            raise BadLength(f"row {i + 1} contains characters outside 0/1")
        rows[i] = np.frombuffer(ln.encode(), dtype=np.uint8) - ord("0")
    return SampleSet(width, rows, meta or {})


# ---------------------------------------------------------------------------
# experiment grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    """Full factorial grid: targets x repeats x sample sizes x methods.

    kind is one of sbm_density, rbm_density, corpus_hamming. methods
    maps a method name (ml, cd1, cdcif, ip) to its TrainConfig; the ip
    method reports two rows per trial, the converged iterate and the
    best one. corpus_hamming reads its data from data_path instead of
    sampling targets.
    """

    kind: str
    n: int
    sample_sizes: tuple
    methods: tuple          # pairs (name, TrainConfig)
    master_seed: int
    n_h: int = 0
    n_targets: int = 1
    n_repeats: int = 1
    data_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("sbm_density", "rbm_density", "corpus_hamming"):
            raise DimensionMismatch(f"unknown experiment kind {self.kind!r}")
        if self.n_targets < 1 or self.n_repeats < 1 or not self.sample_sizes:
            raise DimensionMismatch("grid counts must be at least 1")
        if not self.methods:
            raise DimensionMismatch("at least one method is required")


@dataclass
class ResultTable:
    rows: list

    COLUMNS = ("kind", "method", "n", "n_h", "N", "target_id", "repeat",
               "metric_name", "metric_value", "epochs_or_iters", "seed",
               "failed")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows:
                w.writerow([row[c] for c in self.COLUMNS])

    def summary(self) -> dict:
        cells = {}
        for row in self.rows:
            key = (row["kind"], row["method"], row["N"], row["metric_name"])
            cells.setdefault(key, []).append(row)
        out = {}
        for (kind, method, size, metric), rows in sorted(cells.items()):
            good = [r["metric_value"] for r in rows if not r["failed"]]
            mean = float(np.mean(good)) if good else math.nan
            stderr = (float(np.std(good, ddof=1) / math.sqrt(len(good)))
                      if len(good) > 1 else math.nan)
            out[f"{kind}/{method}/N={size}/{metric}"] = {
                "mean": mean, "stderr": stderr, "count": len(good),
                "failures": len(rows) - len(good),
            }
        return out

    def write_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _train_dispatch(kind, method, cfg, data, target):
    """Run one trainer; returns a list of (submethod, metric, steps)."""
    from . import rbm, sbm
    if kind in ("sbm_density", "corpus_hamming") and method in (
            "ml", "cd1", "cdcif"):
        fn = {"ml": sbm.sbm_train_ml, "cd1": sbm.sbm_train_cd1,
              "cdcif": sbm.sbm_train_cd_cif}[method]
        result = fn(data, cfg, target=target if kind == "sbm_density" else None)
        return result, len(result.trace)
    if kind in ("rbm_density", "corpus_hamming"):
        if method == "ml":
            return rbm.rbm_train_ml(data, cfg), cfg.max_epochs
        if method == "cd1":
            return rbm.rbm_train_cd1(data, cfg), cfg.max_epochs
        if method == "ip":
            return rbm.rbm_train_ip(data, cfg), cfg.ip_iterations
    raise DimensionMismatch(f"method {method!r} not valid for kind {kind!r}")


def _score_density(kind, method, trained, target):
    from . import rbm, sbm
    if kind == "sbm_density":
        model = sbm.sbm_stationary(trained.params)
        return [("kl", kl_divergence(target, model))]
    if method == "ip":
        conv = rbm.rbm_marginal_x(rbm.rbm_joint(trained.params))
        best = rbm.rbm_marginal_x(rbm.rbm_joint(rbm.best_ip_select(trained)))
        return [("kl", kl_divergence(target, conv)),
                ("kl_best", kl_divergence(target, best))]
    marginal = rbm.rbm_marginal_x(rbm.rbm_joint(trained.params))
    return [("kl", kl_divergence(target, marginal))]


def _run_trial(spec: ExperimentSpec, target_id: int, repeat: int,
               size: int, method_index: int, data_rows=None):
    method, cfg = spec.methods[method_index]
    seed = _derived_seed(spec.master_seed, 3, target_id, repeat, size,
                         method_index)
    cfg = replace(cfg, seed=seed)
    base = {"kind": spec.kind, "method": method, "n": spec.n,
            "n_h": spec.n_h, "N": size, "target_id": target_id,
            "repeat": repeat, "seed": seed, "failed": 0}

    try:
        if spec.kind == "corpus_hamming":
            data = SampleSet(spec.n, data_rows)
            target = None
        else:
            target_rng = np.random.default_rng(
                np.random.SeedSequence([spec.master_seed, 1, target_id]))
            target = sample_target(spec.n, target_rng)
            data_rng = np.random.default_rng(np.random.SeedSequence(
                [spec.master_seed, 2, target_id, repeat, size]))
            data = draw_samples(target, size, data_rng)

        trained, steps = _train_dispatch(spec.kind, method, cfg, data, target)

        if spec.kind == "corpus_hamming":
            from . import rbm, sbm
            gen_rng = np.random.default_rng(np.random.SeedSequence(
                [spec.master_seed, 4, target_id, repeat, size, method_index]))
            if method in ("ml", "cd1", "cdcif"):
                gen = sbm.sbm_sample(trained.params, len(data), gen_rng)
            else:
                gen = rbm.rbm_sample_x(trained.params, len(data), gen_rng)
            metrics = [("hamming", hamming_eval(
                data, SampleSet(spec.n, gen)))]
        else:
            metrics = _score_density(spec.kind, method, trained, target)
    except IgboltzError as exc:
        row = dict(base, metric_name="error", metric_value=math.nan,
                   epochs_or_iters=0, failed=1)
        row["error"] = str(exc)
        return [row]

    return [dict(base, metric_name=name, metric_value=float(value),
                 epochs_or_iters=steps) for name, value in metrics]


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> ResultTable:
    """Execute the grid, deterministically at any parallelism level.

    Failed trials (solver errors) are recorded with failed=1 and do not
    stop the run. Rows come out sorted by (target, repeat, N, method)
    regardless of completion order.
    """
    data_rows = None
    if spec.kind == "corpus_hamming":
        with open(spec.data_path) as fh:
            data_rows = sampleset_from_lines(fh.read()).rows
    trials = [(spec, t, r, size, mi, data_rows)
              for t in range(spec.n_targets)
              for r in range(spec.n_repeats)
              for size in spec.sample_sizes
              for mi in range(len(spec.methods))]
    if jobs > 1 and len(trials) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_trial_star, trials, chunksize=1))
    else:
        chunks = [_run_trial_star(args) for args in trials]
    rows = [row for chunk in chunks for row in chunk]
    return ResultTable(rows)


def _run_trial_star(args):
    return _run_trial(*args)
