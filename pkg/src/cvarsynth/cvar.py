"""Sample-average CVaR estimation over loss batches.

For losses L_1..L_N and level beta, the sample-average form of the
Rockafellar-Uryasev objective is

    F(alpha) = alpha + (1/((1-beta) N)) sum_i max(L_i - alpha, 0)

whose minimum over alpha is the empirical beta-CVaR, attained at the
empirical beta-VAR.  Everything here is exact piecewise-linear algebra
on the sorted batch; smoothing lives in the synthesis driver, not here.

Batch evaluation can fan out over a process pool.  Per-sample results
are pure functions of (model, k, sample), and the reduction runs in
fixed index order, so values are bit-identical for any worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .errors import CvarSynthError, SpecError
from .losses import EvalOptions, eval_losses

__all__ = [
    "LossBatch",
    "CvarEstimates",
    "SaaSubgradient",
    "batch_eval",
    "saa_objective",
    "minimize_alpha",
    "empirical_estimates",
    "saa_subgradient",
    "metrics_record",
    "histogram_counts",
    "save_histogram",
]


def _check_beta(beta: float):
    if not 0.0 <= beta < 1.0:
        raise SpecError("beta", f"risk level must lie in [0, 1), got {beta}")


@dataclasses.dataclass(frozen=True)
class LossBatch:
    """Losses (and optionally gradients) of one requirement over a batch.

    Unstable samples carry value +inf and a zero gradient row; they are
    detected through ``stable_mask`` and must be handled by the caller
    before any CVaR algebra.
    """

    values: np.ndarray
    grads: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.grads is not None:
            g = np.asarray(self.grads, dtype=float)
            g = g.reshape(v.size, -1)
            g.setflags(write=False)
            object.__setattr__(self, "grads", g)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def stable_mask(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def n_unstable(self) -> int:
        return int(np.count_nonzero(~self.stable_mask))


def _require_finite(values: np.ndarray, what: str):
    bad = np.nonzero(~np.isfinite(values))[0]
    if bad.size:
        head = ", ".join(str(int(i)) for i in bad[:10])
        more = "" if bad.size <= 10 else f" (+{bad.size - 10} more)"
        raise CvarSynthError(
            "unstable_in_batch",
            f"{what} undefined: {bad.size} unstable sample(s) at indices [{head}]{more}",
        )


# ---------------------------------------------------------------------------
# Exact SAA algebra
# ---------------------------------------------------------------------------


def saa_objective(values, beta: float, alpha: float) -> float:
    """Sample-average Rockafellar-Uryasev objective at (alpha, batch)."""
    _check_beta(beta)
    v = np.asarray(values, dtype=float).ravel()
    _require_finite(v, "sample-average objective")
    # tail mass as N - beta*N: exact in floats for round beta and N,
    # where (1 - beta)*N picks up a spurious ulp
    c = 1.0 / (v.size - beta * v.size)
    return float(alpha + c * np.sum(np.maximum(v - alpha, 0.0)))


def minimize_alpha(values, beta: float):
    """Exact minimizer of the SAA objective over alpha.

    Returns ``(alpha_star, cvar)`` where alpha_star is the smallest
    breakpoint (== batch loss value) with at most (1-beta)N strictly
    larger losses; the minimum of the piecewise-linear objective is
    always attained at such a breakpoint (left endpoint on flat
    segments).
    """
    _check_beta(beta)
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise SpecError("values", "empty batch")
    _require_finite(v, "empirical CVaR")
    s = np.sort(v)
    u = np.unique(s)
    above = v.size - np.searchsorted(s, u, side="right")
    allowed = v.size - beta * v.size
    idx = int(np.argmax(above <= allowed))  # first True: 'above' decreases
    alpha = float(u[idx])
    return alpha, saa_objective(v, beta, alpha)


@dataclasses.dataclass(frozen=True)
class CvarEstimates:
    """Empirical risk summary of one requirement over one batch."""

    beta: float
    mean: float
    var: float
    cvar: float
    worst: float
    n: int


def empirical_estimates(values, beta: float) -> CvarEstimates:
    """Mean, beta-VAR, beta-CVaR and worst case of a finite batch.

    Guarantees var <= cvar <= worst and mean <= cvar.
    """
    v = np.asarray(values, dtype=float).ravel()
    _require_finite(v, "empirical estimates")
    alpha, cvar = minimize_alpha(v, beta)
    return CvarEstimates(
        beta=beta,
        mean=float(np.mean(v)),
        var=alpha,
        cvar=cvar,
        worst=float(np.max(v)),
        n=v.size,
    )


@dataclasses.dataclass(frozen=True)
class SaaSubgradient:
    """Subgradient of the SAA objective at (k, alpha).

    ``d_alpha = 1 - |I_above| / ((1-beta) N)`` and ``d_k`` averages the
    loss gradients over strictly-above samples.  Samples within the
    relative tie tolerance of alpha contribute zero hinge weight; their
    count is reported for nonsmoothness diagnostics.
    """

    d_k: np.ndarray
    d_alpha: float
    n_above: int
    n_ties: int


def saa_subgradient(batch: LossBatch, beta: float, alpha: float,
                    tie_tol: float = 1e-12) -> SaaSubgradient:
    _check_beta(beta)
    if batch.grads is None:
        raise SpecError("batch", "subgradient requires a batch evaluated with gradients")
    v = batch.values
    _require_finite(v, "SAA subgradient")
    scale = tie_tol * max(1.0, abs(alpha))
    diff = v - alpha
    above = diff > scale
    ties = np.abs(diff) <= scale
    c = 1.0 / (v.size - beta * v.size)
    n_above = int(np.count_nonzero(above))
    d_alpha = 1.0 - c * n_above
    if n_above:
        d_k = c * np.sum(batch.grads[above], axis=0)
    else:
        d_k = np.zeros(batch.grads.shape[1])
    return SaaSubgradient(d_k=d_k, d_alpha=float(d_alpha),
                          n_above=n_above, n_ties=int(np.count_nonzero(ties)))


# ---------------------------------------------------------------------------
# Batch evaluation (optionally parallel)
# ---------------------------------------------------------------------------


def _eval_chunk(payload):
    model, template, k, rows, specs, with_grad, options = payload
    nv = len(rows)
    vals = np.empty((nv, len(specs)))
    grads = None
    for i, sample in enumerate(rows):
        lvs = eval_losses(model, template, k, sample, specs,
                          with_grad=with_grad, options=options)
        for j, lv in enumerate(lvs):
            vals[i, j] = lv.value
        if with_grad:
            if grads is None:
                dim = lvs[0].grad.size
                grads = np.zeros((nv, len(specs), dim))
            for j, lv in enumerate(lvs):
                grads[i, j] = lv.grad
    return vals, grads


def batch_eval(model, template, k, scenarios, specs, with_grad=False,
               options: EvalOptions = EvalOptions(), workers: int = 1):
    """Evaluate every requirement at every sample of a scenario set.

    Returns one LossBatch per loss spec.  ``workers > 1`` fans the
    samples out over a process pool in contiguous chunks; results are
    reassembled in sample order, so the outcome is bit-identical to the
    serial evaluation.
    """
    samples = scenarios.samples if hasattr(scenarios, "samples") else np.asarray(scenarios)
    samples = np.asarray(samples, dtype=float)
    samples = samples.reshape(samples.shape[0], -1)
    n = samples.shape[0]
    workers = max(1, min(int(workers), n if n else 1))
    if workers == 1:
        vals, grads = _eval_chunk((model, template, k, samples, specs, with_grad, options))
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        payloads = [
            (model, template, k, samples[a:b], specs, with_grad, options)
            for a, b in zip(bounds[:-1], bounds[1:])
            if b > a
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_eval_chunk, payloads))
        vals = np.vstack([p[0] for p in parts])
        if with_grad:
            grads = np.concatenate([p[1] for p in parts], axis=0)
        else:
            grads = None
    out = []
    for j in range(len(specs)):
        out.append(LossBatch(vals[:, j], None if grads is None else grads[:, j, :]))
    return out


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def metrics_record(requirement: str, est: CvarEstimates, seed: int,
                   nominal: float = None, unstable_count: int = 0) -> dict:
    """Flat dict in the documented metrics schema (JSON-ready, no clocks)."""
    return {
        "requirement": requirement,
        "beta": est.beta,
        "nominal": nominal,
        "mean": est.mean,
        "var": est.var,
        "cvar": est.cvar,
        "worst_in_sample": est.worst,
        "n_samples": est.n,
        "seed": seed,
        "unstable_count": unstable_count,
    }


def histogram_counts(values, bins: int = 60):
    """Fixed-width histogram over the finite values; returns (edges, counts)."""
    v = np.asarray(values, dtype=float).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise SpecError("values", "no finite values to histogram")
    lo, hi = float(np.min(v)), float(np.max(v))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return edges, counts


def save_histogram(path, values, bins: int = 60):
    """CSV with bin_left, bin_right, count rows."""
    edges, counts = histogram_counts(values, bins)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            writer.writerow([repr(float(a)), repr(float(b)), int(c)])
