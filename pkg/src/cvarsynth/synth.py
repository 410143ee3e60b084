"""Controller synthesis drivers.

Two solvers share one quasi-Newton engine:

solve_cvar
    minimizes the sample-average CVaR of the soft requirement subject to
    CVaR constraints on the hard ones, by smoothing the hinge (softplus
    with a decreasing temperature), an augmented Lagrangian on the
    constraints, BFGS steps, and a growing scenario set
    (100 -> 500 -> 2500 by default).  Within a stage the multipliers and
    the exact merit are frozen, every accepted step decreases the exact
    (unsmoothed) merit and keeps all samples stable, and the risk
    accounting variables alpha are re-centered to their exact minimizers
    between smoothing rounds and at stage end -- so the reported
    objective equals the empirical CVaR of the final batch bit for bit.

solve_minmax
    deterministic scenario baseline: minimizes the worst soft loss over
    a 3-sigma-truncated scenario set plus influence-ranked sign-pattern
    vertices, with worst-case hard constraints, using a log-sum-exp
    smooth maximum with the same temperature schedule.

Both return a SynthResult; `compare` evaluates two results on a common
fresh Monte-Carlo batch.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time

import numpy as np

from .cvar import (
    CvarEstimates,
    batch_eval,
    empirical_estimates,
    metrics_record,
    minimize_alpha,
    saa_objective,
)
from .errors import SpecError
from .lfr import (
    ControllerTemplate,
    close_controller,
    close_controller_with_jacobian,
    instantiate_delta,
    model_from_dict,
    model_to_dict,
)
from .losses import EvalOptions, LossSpec
from .ltisys import StateSpace
from .sampling import (
    Constraint,
    DistributionSpec,
    draw_samples,
    truncate_3sigma,
)

__all__ = [
    "Requirement",
    "ScenarioConfig",
    "ProblemSpec",
    "SolverOptions",
    "SynthResult",
    "ComparisonReport",
    "stabilize",
    "solve_cvar",
    "solve_minmax",
    "compare",
    "save_problem",
    "load_problem",
    "options_from_dict",
    "save_result",
    "load_result",
    "write_iteration_log",
    "batch_record",
]

_PROBLEM_TAG = "cvarsynth-problem-v1"
_RESULT_TAG = "cvarsynth-result-v1"

LOG_COLUMNS = (
    "stage_n", "iter", "tau", "exact_soft_F", "max_hard_violation",
    "step_norm", "tie_count", "exact_merit",
)


# ---------------------------------------------------------------------------
# Problem description
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Requirement:
    """One requirement: a loss plus its role in the program.

    The soft requirement is the minimization objective; hard ones are
    CVaR (or worst-case, for the min-max solver) constraints at level
    ``bound``.  Each requirement carries its own risk level beta.
    """

    name: str
    loss: LossSpec
    role: str
    bound: float = None
    beta: float = 0.95

    def __post_init__(self):
        if self.role not in ("soft", "hard"):
            raise SpecError(f"requirement.{self.name}", f"role must be soft|hard, got {self.role!r}")
        if self.role == "hard" and self.bound is None:
            raise SpecError(f"requirement.{self.name}", "hard requirement needs a bound")
        if not 0.0 <= self.beta < 1.0:
            raise SpecError(f"requirement.{self.name}", f"beta must lie in [0,1), got {self.beta}")


@dataclasses.dataclass(frozen=True)
class ScenarioConfig:
    dists: DistributionSpec
    seed: int
    constraint: Constraint = None
    schedule: tuple = (100, 500, 2500)

    def __post_init__(self):
        sched = tuple(int(n) for n in self.schedule)
        if not sched or any(n < 1 for n in sched):
            raise SpecError("schedule", f"bad sample schedule {self.schedule}")
        if list(sched) != sorted(sched):
            raise SpecError("schedule", f"sample schedule must be nondecreasing, got {sched}")
        object.__setattr__(self, "schedule", sched)


@dataclasses.dataclass(frozen=True)
class ProblemSpec:
    """Everything that defines a synthesis instance (solver knobs excluded)."""

    model: object
    template: ControllerTemplate
    requirements: tuple
    scenario: ScenarioConfig
    k0: np.ndarray = None
    mode: str = "cvar"

    def __post_init__(self):
        if self.mode not in ("cvar", "minmax"):
            raise SpecError("mode", f"must be cvar|minmax, got {self.mode!r}")
        reqs = tuple(self.requirements)
        if not reqs:
            raise SpecError("requirements", "need at least the soft requirement")
        soft = [i for i, r in enumerate(reqs) if r.role == "soft"]
        if soft != [0]:
            raise SpecError(
                "requirements",
                "exactly one soft requirement is supported and it must come first",
            )
        for r in reqs[1:]:
            if not r.bound > 0.0:
                raise SpecError(f"requirement.{r.name}", f"bound must be positive, got {r.bound}")
        names = [r.name for r in reqs]
        if len(set(names)) != len(names):
            raise SpecError("requirements", "duplicate requirement names")
        object.__setattr__(self, "requirements", reqs)
        if self.k0 is not None:
            k0 = np.asarray(self.k0, dtype=float).ravel()
            if k0.size != self.template.dim_k:
                raise SpecError(
                    "k0", f"has {k0.size} entries, template needs {self.template.dim_k}"
                )
            object.__setattr__(self, "k0", k0)

    @property
    def hard(self):
        return self.requirements[1:]

    @property
    def soft(self) -> Requirement:
        return self.requirements[0]


@dataclasses.dataclass(frozen=True)
class SolverOptions:
    """Tuning knobs shared by both solvers.

    ``max_iters`` caps accepted steps per scenario stage (an int applies
    to every stage; a tuple is per-stage).  A stage round stops early
    once the exact merit moves by less than ``tol_rel`` (relative) over
    ``stall_window`` consecutive accepted steps.
    """

    max_iters: object = 300
    tau_rounds: int = 3
    tau_scale: float = 0.1
    tau_decay: float = 0.2
    tol_rel: float = 1e-6
    stall_window: int = 5
    armijo: float = 1e-4
    backtrack_max: int = 30
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    # hard bounds are tightened by this relative margin inside the
    # solver, so the finite multiplier loop lands strictly feasible;
    # reported violations and feasibility always use the true bounds
    bound_shrink: float = 1e-3
    stability_margin: float = 1e-6
    stabilize_iters: int = 80
    workers: int = 1
    hinf_tol: float = 1e-6
    eval_hinf_tol: float = 1e-8
    grid_points: int = 200
    escalation_stop_rel: float = 0.01
    tie_tol: float = 1e-12
    minmax_n: int = 200
    minmax_vertex_params: int = 10
    verbose: bool = False

    def synth_eval_options(self) -> EvalOptions:
        return EvalOptions(hinf_tol=self.hinf_tol,
                           stability_margin=self.stability_margin,
                           grid_points=self.grid_points)

    def final_eval_options(self) -> EvalOptions:
        return EvalOptions(hinf_tol=self.eval_hinf_tol,
                           stability_margin=self.stability_margin,
                           grid_points=self.grid_points)

    def stage_iters(self, stage_index: int) -> int:
        if isinstance(self.max_iters, (int, np.integer)):
            return int(self.max_iters)
        return int(self.max_iters[min(stage_index, len(self.max_iters) - 1)])


@dataclasses.dataclass
class SynthResult:
    mode: str
    status: str
    k: np.ndarray
    alpha: dict
    estimates: dict
    config_hash: str
    seed: int
    iterations: int
    evaluations: int
    wall_time_s: float
    log_rows: list
    stage_cvar: list


@dataclasses.dataclass
class ComparisonReport:
    n: int
    seed: int
    rows: list          # one dict per (design, requirement)
    values: dict        # (design, requirement) -> np.ndarray of losses

    def to_text(self) -> str:
        header = f"{'design':>8} {'requirement':>14} {'nominal':>10} {'mean':>10} " \
                 f"{'var':>10} {'cvar':>10} {'worst':>10}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r['design']:>8} {r['requirement']:>14} "
                f"{_fmt(r['nominal'])} {_fmt(r['mean'])} {_fmt(r['var'])} "
                f"{_fmt(r['cvar'])} {_fmt(r['worst_in_sample'])}"
            )
        return "\n".join(lines)


def _fmt(v):
    return f"{v:>10.4f}" if v is not None and math.isfinite(v) else f"{'--':>10}"


# ---------------------------------------------------------------------------
# Smoothing primitives
# ---------------------------------------------------------------------------


def _softplus(t, tau):
    """tau * log(1 + exp(t / tau)), overflow-safe, elementwise."""
    return tau * np.logaddexp(0.0, t / tau)


def _sigmoid(t, tau):
    out = np.empty_like(t)
    z = t / tau
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logsumexp(vals, tau):
    m = float(np.max(vals))
    return m + tau * math.log(float(np.sum(np.exp((vals - m) / tau))))


def _softmax_weights(vals, tau):
    m = np.max(vals)
    w = np.exp((vals - m) / tau)
    return w / np.sum(w)


# ---------------------------------------------------------------------------
# Stabilization pre-phase
# ---------------------------------------------------------------------------


def stabilize(problem: ProblemSpec, k, scen=None, opts: SolverOptions = SolverOptions()):
    """Push the closed loop stable on every sample of ``scen``.

    Minimizes a smoothed spectral abscissa: log-sum-exp at temperature
    tau over the real parts of *every* closed-loop eigenvalue of *every*
    sample.  Smoothing over eigenvalues (not only samples) keeps the
    surrogate differentiable where eigenvalue real parts coalesce, which
    is exactly where plain max-abscissa descent stalls.  The temperature
    anneals whenever a line search fails.  Returns ``(k, ok)`` with
    ``ok`` true once every abscissa is below ``-2 * stability_margin``.
    Without an explicit scenario set, draws the first scheduled batch
    from the problem's distributions.
    """
    model, template = problem.model, problem.template
    k = np.asarray(k, dtype=float).copy()
    target = -2.0 * opts.stability_margin
    if scen is None:
        scen = draw_samples(problem.scenario.dists, problem.scenario.schedule[0],
                            problem.scenario.seed, problem.scenario.constraint)
    samples = scen.samples if hasattr(scen, "samples") else np.asarray(scen)
    samples = np.asarray(samples, dtype=float).reshape(len(samples), -1)

    def eig_parts(kv):
        """Real parts of all closed-loop eigenvalues, one array per sample."""
        out = []
        for s in samples:
            inst = instantiate_delta(model, s)
            closed = close_controller(inst, template, kv)
            out.append(np.linalg.eigvals(closed.A).real)
        return out

    def smooth_max(parts, tau):
        allre = np.concatenate(parts)
        m = float(np.max(allre))
        return m + tau * math.log(float(np.sum(np.exp((allre - m) / tau))))

    def smooth_grad(kv, tau):
        """d/dk of smooth_max via eigenvector algebra, FD on defectiveness.

        The eigenvalue-derivative formula needs inv(V); near a defective
        (coalescing) eigenvalue V is numerically singular even though
        the log-sum-exp surrogate itself stays differentiable, so an
        ill-conditioned basis switches the whole gradient to central
        finite differences of the surrogate.
        """
        sweep = []
        for s in samples:
            inst = instantiate_delta(model, s)
            closed, jac = close_controller_with_jacobian(inst, template, kv)
            w, V = np.linalg.eig(closed.A)
            if np.linalg.cond(V) > 1e8:
                g = np.zeros(kv.size)
                for i in range(kv.size):
                    h = 1e-6 * max(1.0, abs(kv[i]))
                    kp = kv.copy()
                    kp[i] += h
                    km = kv.copy()
                    km[i] -= h
                    g[i] = (smooth_max(eig_parts(kp), tau)
                            - smooth_max(eig_parts(km), tau)) / (2.0 * h)
                return g
            sweep.append((w, V, np.linalg.inv(V), jac))
        m = max(float(np.max(w.real)) for w, _, _, _ in sweep)
        z = sum(float(np.sum(np.exp((w.real - m) / tau))) for w, _, _, _ in sweep)
        g = np.zeros(kv.size)
        for w, V, Vinv, jac in sweep:
            wts = np.exp((w.real - m) / tau) / z
            # sum_e wts_e * d Re(lambda_e)/dA, folded into one pullback
            GA = np.real(Vinv.T @ (wts[:, None] * V.T))
            g += jac.pullback(GA=GA)
        return g

    hard_max = lambda parts: max(float(np.max(p)) for p in parts)

    def probe_rescue(kv, f0, tau, rng):
        """Seeded random-direction search for escaping nonsmooth valleys.

        Near defective eigenvalues the descent direction can require a
        large, non-local step that no gradient line search finds; a
        handful of scaled random probes is a cheap, deterministic way
        out.
        """
        best = (f0, None, None)
        base = 1.0 + float(np.linalg.norm(kv))
        for _ in range(40):
            d = rng.standard_normal(kv.size)
            d *= base / float(np.linalg.norm(d))
            for scale in (0.03, 0.1, 0.3, 1.0, 3.0):
                kt = kv + scale * d
                pt = eig_parts(kt)
                f = smooth_max(pt, tau)
                if f < best[0] - 1e-12:
                    best = (f, kt, pt)
        return best

    parts = eig_parts(k)
    if hard_max(parts) < target:
        return k, True
    rng = np.random.default_rng(0x5AB1E)
    allre = np.concatenate(parts)
    tau = max(0.1 * float(np.max(allre) - np.median(allre)), 1e-2)
    for _ in range(opts.stabilize_iters):
        g = smooth_grad(k, tau)
        gn = float(np.linalg.norm(g))
        f0 = smooth_max(parts, tau)
        accepted = False
        if gn > 0.0:
            t = 1.0 / max(gn, 1.0)
            for _ in range(opts.backtrack_max):
                kt = k - t * g
                pt = eig_parts(kt)
                if smooth_max(pt, tau) < f0 - opts.armijo * t * gn * gn:
                    accepted = True
                    break
                t *= 0.5
        if not accepted:
            f, kt, pt = probe_rescue(k, f0, tau, rng)
            if kt is None:
                if tau <= 1e-8:
                    break
                tau *= 0.2
                continue
        k, parts = kt, pt
        if hard_max(parts) < target:
            return k, True
    return k, bool(hard_max(parts) < target)


# ---------------------------------------------------------------------------
# Shared engine pieces
# ---------------------------------------------------------------------------


class _Counter:
    def __init__(self):
        self.evals = 0
        self.iters = 0


def _initial_design(problem: ProblemSpec, k0) -> np.ndarray:
    if k0 is None:
        k0 = problem.k0
    if k0 is None:
        raise SpecError("k0", "initial design vector required (problem.k0 or argument)")
    k = np.asarray(k0, dtype=float).ravel()
    if k.size != problem.template.dim_k:
        raise SpecError("k0", f"has {k.size} entries, template needs {problem.template.dim_k}")
    return k.copy()


def _stage_eval(problem, k, scen, with_grad, opts, counter):
    specs = [r.loss for r in problem.requirements]
    batches = batch_eval(problem.model, problem.template, k, scen, specs,
                         with_grad=with_grad, options=opts.synth_eval_options(),
                         workers=opts.workers)
    counter.evals += scen.n if hasattr(scen, "n") else len(scen)
    return batches


def _all_stable(batches) -> bool:
    return bool(np.all(np.isfinite(batches[0].values)))



def _shrunk_bound(req, opts) -> float:
    """Internally tightened hard bound (see SolverOptions.bound_shrink)."""
    return req.bound * (1.0 - opts.bound_shrink)


class _CvarStageModel:
    """Smoothed objective / exact merit at fixed scenario set and (lam, rho).

    Variables are x = [k ; alpha_0 ; alpha_1 .. alpha_H]: one risk
    accounting variable per requirement (soft first).
    """

    def __init__(self, problem: ProblemSpec, lam, rho, tau, opts):
        self.problem = problem
        self.lam = lam
        self.rho = rho
        self.tau = tau
        self.opts = opts
        self.dim_k = problem.template.dim_k
        self.n_req = len(problem.requirements)

    def split(self, x):
        return x[: self.dim_k], x[self.dim_k :]

    def smooth_value_grad(self, x, batches):
        """Smoothed AL objective and gradient; requires gradient batches."""
        k, alphas = self.split(x)
        tau = self.tau
        val = 0.0
        gk = np.zeros(self.dim_k)
        ga = np.zeros(self.n_req)
        for j, (req, batch) in enumerate(zip(self.problem.requirements, batches)):
            n = batch.n
            c = 1.0 / (n - req.beta * n)
            t = batch.values - alphas[j]
            f = alphas[j] + c * float(np.sum(_softplus(t, tau)))
            sig = _sigmoid(t, tau)
            dk = c * (sig @ batch.grads)
            da = 1.0 - c * float(np.sum(sig))
            if req.role == "soft":
                val += f
                gk += dk
                ga[j] += da
            else:
                g = f - _shrunk_bound(req, self.opts)
                mult = max(self.lam[j - 1] + self.rho * g, 0.0)
                val += (mult * mult - self.lam[j - 1] ** 2) / (2.0 * self.rho)
                gk += mult * dk
                ga[j] += mult * da
        return val, np.concatenate([gk, ga])

    def exact_merit(self, x, batches):
        """Exact unsmoothed merit with the same frozen multipliers.

        Each requirement enters at its inner-minimized alpha (i.e., the
        empirical CVaR), so the merit judges the design alone and the
        alpha coordinates are free to follow the smoothed model without
        tripping the acceptance gate.
        """
        val = 0.0
        for j, (req, batch) in enumerate(zip(self.problem.requirements, batches)):
            f = minimize_alpha(batch.values, req.beta)[1]
            if req.role == "soft":
                val += f
            else:
                g = f - _shrunk_bound(req, self.opts)
                mult = max(self.lam[j - 1] + self.rho * g, 0.0)
                val += (mult * mult - self.lam[j - 1] ** 2) / (2.0 * self.rho)
        return val

    def tau_anchor(self, batches):
        """Hinge width reference: the soft CVaR magnitude."""
        return abs(minimize_alpha(batches[0].values, self.problem.soft.beta)[1])

    def diagnostics(self, x, batches):
        k, alphas = self.split(x)
        soft = minimize_alpha(batches[0].values, self.problem.soft.beta)[1]
        viol = 0.0
        ties = 0
        for j, (req, batch) in enumerate(zip(self.problem.requirements, batches)):
            scale = self.opts.tie_tol * max(1.0, abs(alphas[j]))
            ties += int(np.count_nonzero(np.abs(batch.values - alphas[j]) <= scale))
            if req.role == "hard":
                f = minimize_alpha(batch.values, req.beta)[1]
                viol = max(viol, f - req.bound)
        return soft, viol, ties

    def recenter(self, x, batches):
        """Exact alpha reset: each alpha_j to its own batch minimizer."""
        k, alphas = self.split(x)
        new = alphas.copy()
        for j, (req, batch) in enumerate(zip(self.problem.requirements, batches)):
            new[j] = minimize_alpha(batch.values, req.beta)[0]
        return np.concatenate([k, new])


class _MinmaxStageModel:
    """Worst-case analogue of _CvarStageModel: x = k, max via log-sum-exp."""

    def __init__(self, problem, lam, rho, tau, opts):
        self.problem = problem
        self.lam = lam
        self.rho = rho
        self.tau = tau
        self.opts = opts
        self.dim_k = problem.template.dim_k
        self.n_req = len(problem.requirements)

    def split(self, x):
        return x, np.zeros(0)

    def smooth_value_grad(self, x, batches):
        tau = self.tau
        val = 0.0
        gk = np.zeros(self.dim_k)
        for j, (req, batch) in enumerate(zip(self.problem.requirements, batches)):
            f = _logsumexp(batch.values, tau)
            wts = _softmax_weights(batch.values, tau)
            dk = wts @ batch.grads
            if req.role == "soft":
                val += f
                gk += dk
            else:
                g = f - _shrunk_bound(req, self.opts)
                mult = max(self.lam[j - 1] + self.rho * g, 0.0)
                val += (mult * mult - self.lam[j - 1] ** 2) / (2.0 * self.rho)
                gk += mult * dk
        return val, gk

    def exact_merit(self, x, batches):
        val = 0.0
        for j, (req, batch) in enumerate(zip(self.problem.requirements, batches)):
            f = float(np.max(batch.values))
            if req.role == "soft":
                val += f
            else:
                g = f - _shrunk_bound(req, self.opts)
                mult = max(self.lam[j - 1] + self.rho * g, 0.0)
                val += (mult * mult - self.lam[j - 1] ** 2) / (2.0 * self.rho)
        return val

    def tau_anchor(self, batches):
        """Log-sum-exp width reference: the scenario value spread.

        Anchoring to the absolute level would wash the softmax out to a
        near-uniform average whenever the batch is tightly clustered at
        a large value; the max structure lives in the spread.
        """
        spread = 0.0
        for batch in batches:
            v = batch.values
            spread = max(spread, float(np.max(v) - np.min(v)))
        return spread

    def diagnostics(self, x, batches):
        soft = float(np.max(batches[0].values))
        viol = 0.0
        for req, batch in zip(self.problem.requirements, batches):
            if req.role == "hard":
                viol = max(viol, float(np.max(batch.values)) - req.bound)
        return soft, viol, 0

    def recenter(self, x, batches):
        return x


def _bfgs_rounds(problem, scen, x, model_cls, lam, rho, opts, counter, stage_n,
                 log_rows, stage_budget):
    """Temperature-scheduled BFGS descent on one scenario set.

    Returns (x, batches, stable_flag, converged_flag).  A step is
    accepted when (a) every sample stays stable, (b) the round's
    smoothed merit passes an Armijo test, and (c) the exact unsmoothed
    merit of the frozen (lam, rho) stage model does not increase.  The
    Armijo progress test lives on the smooth surrogate because the exact
    merit is a max-type function whose directional derivative jumps at
    active-set changes (there Armijo on it rejects every step); the
    nonincrease filter still guarantees a monotone exact-merit sequence
    at accepted iterates.
    """
    batches = _stage_eval(problem, x[: problem.template.dim_k], scen, True, opts, counter)
    if not _all_stable(batches):
        return x, batches, False, False

    # temperature anchored to the stage model's natural scale
    probe = model_cls(problem, lam, rho, 1.0, opts)
    x = probe.recenter(x, batches)
    tau0 = opts.tau_scale * max(probe.tau_anchor(batches), 1e-3)

    iters_per_round = max(stage_budget // max(opts.tau_rounds, 1), 1)
    converged = False
    dim = x.size

    for rnd in range(opts.tau_rounds):
        tau = tau0 * (opts.tau_decay ** rnd)
        sm = model_cls(problem, lam, rho, tau, opts)
        H = np.eye(dim)
        fs, gs = sm.smooth_value_grad(x, batches)
        me = sm.exact_merit(x, batches)
        history = []
        steepest_failed = False
        converged = False  # only the last smoothing round's verdict survives
        t_mem = 1.0
        for it in range(iters_per_round):
            d = -H @ gs
            slope = float(gs @ d)
            if not np.isfinite(slope) or slope >= 0.0:
                H = np.eye(dim)
                d = -gs
                slope = -float(gs @ gs)
            if slope == 0.0:
                converged = True
                break
            # warm-started backtracking: begin at the last working step
            # length so a persistent natural scale costs one trial, not a
            # fresh cascade of rejected full-batch evaluations
            t = t_first = t_mem
            accepted = False
            was_steepest = bool(np.all(H == np.eye(dim)))
            fs_t = gs_t = me_t = None
            for _ in range(opts.backtrack_max):
                xt = x + t * d
                kt = xt[: problem.template.dim_k]
                bt = _stage_eval(problem, kt, scen, True, opts, counter)
                if _all_stable(bt):
                    fs_t, gs_t = sm.smooth_value_grad(xt, bt)
                    me_t = sm.exact_merit(xt, bt)
                    if (fs_t <= fs + opts.armijo * t * slope
                            and me_t <= me + 1e-12):
                        accepted = True
                        break
                t *= 0.5
            if accepted:
                t_mem = min(1.0, 2.0 * t) if t == t_first else t
            if not accepted:
                if was_steepest:
                    steepest_failed = True
                    break
                H = np.eye(dim)
                continue
            s = xt - x
            y = gs_t - gs
            sy = float(s @ y)
            if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
                Hy = H @ y
                yHy = float(y @ Hy)
                rho_b = 1.0 / sy
                H = (H - rho_b * (np.outer(s, Hy) + np.outer(Hy, s))
                     + rho_b * rho_b * (sy + yHy) * np.outer(s, s))
            else:
                H = np.eye(dim)
            step_norm = float(np.linalg.norm(s))
            fs_prev, fs = fs, fs_t
            x, batches, gs, me = xt, bt, gs_t, me_t
            counter.iters += 1
            soft, viol, ties = sm.diagnostics(x, batches)
            log_rows.append({
                "stage_n": scen.n, "iter": counter.iters, "tau": tau,
                "exact_soft_F": soft, "max_hard_violation": max(viol, 0.0),
                "step_norm": step_norm, "tie_count": ties, "exact_merit": me,
            })
            history.append(abs(fs_prev - fs))
            w = opts.stall_window
            if len(history) >= w and all(
                h <= opts.tol_rel * max(1.0, abs(fs)) for h in history[-w:]
            ):
                converged = True
                break
        # exact alpha re-centering between smoothing rounds
        x = sm.recenter(x, batches)
        if steepest_failed and rnd == opts.tau_rounds - 1:
            # no acceptable step along steepest descent at the smallest
            # temperature: numerically stationary
            converged = True
    return x, batches, True, converged


# ---------------------------------------------------------------------------
# CVaR solver
# ---------------------------------------------------------------------------


def _final_assembly(problem, mode, x, scen, opts, counter, log_rows, stage_cvar,
                    status, t0):
    """Exact final evaluation, alpha reset, estimates, result record."""
    dim_k = problem.template.dim_k
    k = x[:dim_k]
    specs = [r.loss for r in problem.requirements]
    batches = batch_eval(problem.model, problem.template, k, scen, specs,
                         with_grad=False, options=opts.final_eval_options(),
                         workers=opts.workers)
    counter.evals += scen.n
    alphas = {}
    estimates = {}
    feasible = True
    if _all_stable(batches):
        for req, batch in zip(problem.requirements, batches):
            a, cv = minimize_alpha(batch.values, req.beta)
            alphas[req.name] = a
            estimates[req.name] = empirical_estimates(batch.values, req.beta)
            if req.role == "hard":
                level = cv if mode == "cvar" else float(np.max(batch.values))
                if level > req.bound * (1.0 + 1e-3):
                    feasible = False
    else:
        feasible = False
        for req in problem.requirements:
            alphas[req.name] = math.nan
    if status is None:
        status = "converged" if feasible else "stalled"
    elif status == "converged" and not feasible:
        status = "stalled"
    return SynthResult(
        mode=mode,
        status=status,
        k=k.copy(),
        alpha=alphas,
        estimates=estimates,
        config_hash=_config_hash(problem, opts, mode),
        seed=problem.scenario.seed,
        iterations=counter.iters,
        evaluations=counter.evals,
        wall_time_s=time.perf_counter() - t0,
        log_rows=log_rows,
        stage_cvar=stage_cvar,
    )


def solve_cvar(problem: ProblemSpec, k0=None, opts: SolverOptions = SolverOptions()) -> SynthResult:
    """Minimize the soft CVaR subject to hard CVaR bounds.

    Stages follow the scenario schedule; escalation stops early when the
    soft CVaR moves by less than ``escalation_stop_rel`` between stages.
    """
    t0 = time.perf_counter()
    counter = _Counter()
    log_rows = []
    stage_cvar = []
    k = _initial_design(problem, k0)
    n_req = len(problem.requirements)
    lam = np.zeros(max(n_req - 1, 0))
    rho = opts.penalty_init
    x = np.concatenate([k, np.zeros(n_req)])
    last_scen = None
    status = None

    for si, n in enumerate(problem.scenario.schedule):
        scen = draw_samples(problem.scenario.dists, n, problem.scenario.seed,
                            problem.scenario.constraint)
        last_scen = scen
        # stability repair on the (possibly grown) scenario set
        probe = _stage_eval(problem, x[: problem.template.dim_k], scen, False,
                            opts, counter)
        if not _all_stable(probe):
            k_fix, ok = stabilize(problem, x[: problem.template.dim_k], scen, opts)
            if not ok:
                status = "infeasible_stabilization"
                x[: problem.template.dim_k] = k_fix
                break
            x[: problem.template.dim_k] = k_fix

        x, batches, stable, converged = _bfgs_rounds(
            problem, scen, x, _CvarStageModel, lam, rho, opts, counter,
            si, log_rows, opts.stage_iters(si),
        )
        if not stable:
            status = "infeasible_stabilization"
            break

        # exact stage summary + multiplier update (between stages only)
        stage_cvar.append(minimize_alpha(batches[0].values, problem.soft.beta)[1])
        any_violation = False
        for j, req in enumerate(problem.requirements):
            if req.role != "hard":
                continue
            g = minimize_alpha(batches[j].values, req.beta)[1] - _shrunk_bound(req, opts)
            lam[j - 1] = max(lam[j - 1] + rho * g, 0.0)
            any_violation = any_violation or g > 0.0
        if any_violation:
            rho *= opts.penalty_growth

        if not converged and si == len(problem.scenario.schedule) - 1:
            status = "iter_limit"
        if (
            not any_violation
            and len(stage_cvar) >= 2
            and abs(stage_cvar[-1] - stage_cvar[-2])
            <= opts.escalation_stop_rel * max(abs(stage_cvar[-1]), 1e-12)
        ):
            break

    return _final_assembly(problem, "cvar", x, last_scen, opts, counter,
                           log_rows, stage_cvar, status, t0)


# ---------------------------------------------------------------------------
# Min-max solver
# ---------------------------------------------------------------------------


def _vertex_scenarios(problem: ProblemSpec, k, opts, counter):
    """Sign-pattern vertices over the most influential parameters.

    Influence is ranked by a symmetric difference of the soft loss along
    each parameter axis at its extreme values; the top
    ``min(m, minmax_vertex_params)`` parameters get all sign patterns,
    the rest stay at their nominal center.  Vertices violating the
    support constraint are dropped.
    """
    dists = truncate_3sigma(problem.scenario.dists)
    m = dists.nparams
    center = np.empty(m)
    half = np.empty(m)
    for j, p in enumerate(dists.params):
        if p.kind == "gaussian":
            a, b = p.truncation
            center[j] = p.mean
            half[j] = min(b - p.mean, p.mean - a)
        else:
            lo, hi = p.lo, p.hi
            if p.truncation is not None:
                lo, hi = max(lo, p.truncation[0]), min(hi, p.truncation[1])
            center[j] = 0.5 * (lo + hi)
            half[j] = 0.5 * (hi - lo)

    soft = problem.soft.loss
    influence = np.zeros(m)
    eo = opts.synth_eval_options()
    for j in range(m):
        lo_s = center.copy()
        hi_s = center.copy()
        lo_s[j] -= half[j]
        hi_s[j] += half[j]
        vals = batch_eval(problem.model, problem.template, k, np.vstack([lo_s, hi_s]),
                          [soft], options=eo)[0].values
        counter.evals += 2
        vals = np.where(np.isfinite(vals), vals, 1e6)
        influence[j] = abs(vals[1] - vals[0])
    q = min(m, opts.minmax_vertex_params)
    top = np.argsort(-influence, kind="stable")[:q]

    verts = []
    for bits in range(1 << q):
        v = center.copy()
        for t, j in enumerate(top):
            v[j] += half[j] if (bits >> t) & 1 else -half[j]
        if problem.scenario.constraint is None or problem.scenario.constraint(v) <= 0.0:
            verts.append(v)
    return np.asarray(verts).reshape(len(verts), m)


def solve_minmax(problem: ProblemSpec, k0=None, opts: SolverOptions = SolverOptions()) -> SynthResult:
    """Deterministic baseline: minimize the worst-case soft loss.

    The scenario set is ``minmax_n`` samples from the 3-sigma-truncated
    distributions plus influence-ranked sign-pattern vertices; hard
    requirements become worst-case constraints over the same set.
    """
    t0 = time.perf_counter()
    counter = _Counter()
    log_rows = []
    k = _initial_design(problem, k0)

    tdists = truncate_3sigma(problem.scenario.dists)
    scen = draw_samples(tdists, opts.minmax_n, problem.scenario.seed,
                        problem.scenario.constraint)
    probe = _stage_eval(problem, k, scen, False, opts, counter)
    status = None
    if not _all_stable(probe):
        k, ok = stabilize(problem, k, scen, opts)
        if not ok:
            status = "infeasible_stabilization"
    verts = _vertex_scenarios(problem, k, opts, counter)
    samples = np.vstack([scen.samples, verts]) if verts.size else scen.samples

    class _Scen:
        pass

    full = _Scen()
    full.samples = samples
    full.n = samples.shape[0]

    n_req = len(problem.requirements)
    lam = np.zeros(max(n_req - 1, 0))
    rho = opts.penalty_init
    x = k.copy()
    stage_worst = []

    if status is None:
        probe = _stage_eval(problem, x, full, False, opts, counter)
        if not _all_stable(probe):
            x, ok = stabilize(problem, x, full, opts)
            if not ok:
                status = "infeasible_stabilization"

    if status is None:
        for outer in range(len(problem.scenario.schedule)):
            x, batches, stable, converged = _bfgs_rounds(
                problem, full, x, _MinmaxStageModel, lam, rho, opts, counter,
                outer, log_rows, opts.stage_iters(outer),
            )
            if not stable:
                status = "infeasible_stabilization"
                break
            stage_worst.append(float(np.max(batches[0].values)))
            for j, req in enumerate(problem.requirements):
                if req.role != "hard":
                    continue
                g = float(np.max(batches[j].values)) - _shrunk_bound(req, opts)
                lam[j - 1] = max(lam[j - 1] + rho * g, 0.0)
            violated = any(
                float(np.max(batches[j].values)) > problem.requirements[j].bound
                for j in range(1, n_req)
            )
            if violated:
                rho *= opts.penalty_growth
            if not converged and outer == len(problem.scenario.schedule) - 1:
                status = "iter_limit"
            if (
                not violated
                and len(stage_worst) >= 2
                and abs(stage_worst[-1] - stage_worst[-2])
                <= opts.escalation_stop_rel * max(abs(stage_worst[-1]), 1e-12)
            ):
                break

    return _final_assembly(problem, "minmax", np.concatenate([x, np.zeros(0)]),
                           full, opts, counter, log_rows, stage_worst, status, t0)


# ---------------------------------------------------------------------------
# Comparison on a common fresh batch
# ---------------------------------------------------------------------------


def compare(problem: ProblemSpec, designs: dict, n_eval: int = 10000,
            seed: int = None, workers: int = 1,
            options: EvalOptions = None) -> ComparisonReport:
    """Evaluate several designs on one fresh Monte-Carlo batch.

    ``designs`` maps a label to a design vector.  Sampling uses the
    problem's (untruncated) distributions and support constraint with a
    seed distinct from the synthesis seed unless given explicitly.
    """
    if seed is None:
        seed = problem.scenario.seed + 90001
    options = options or EvalOptions(hinf_tol=1e-8)
    scen = draw_samples(problem.scenario.dists, n_eval, seed,
                        problem.scenario.constraint)
    specs = [r.loss for r in problem.requirements]
    nominal = np.zeros(problem.scenario.dists.nparams)
    rows = []
    values = {}
    for label, k in designs.items():
        nom = batch_eval(problem.model, problem.template, k, nominal[None, :],
                         specs, options=options)
        batches = batch_eval(problem.model, problem.template, k, scen, specs,
                             options=options, workers=workers)
        for req, nb, batch in zip(problem.requirements, nom, batches):
            vals = batch.values
            values[(label, req.name)] = vals
            nom_val = float(nb.values[0]) if np.isfinite(nb.values[0]) else None
            rec = batch_record(req.name, req.beta, vals, seed, nominal=nom_val)
            rec["design"] = label
            rows.append(rec)
    return ComparisonReport(n=n_eval, seed=seed, rows=rows, values=values)


def batch_record(requirement: str, beta: float, values, seed: int,
                 nominal: float = None) -> dict:
    """Metrics record that degrades gracefully on unstable samples.

    With any non-finite loss in the batch the tail statistics are
    unreliable, so var/cvar/worst are reported as null and the mean is
    taken over the stable subset only; ``unstable_count`` says why.
    """
    vals = np.asarray(values, dtype=float).ravel()
    finite = np.isfinite(vals)
    unstable = int(np.count_nonzero(~finite))
    if unstable == 0:
        return metrics_record(requirement, empirical_estimates(vals, beta),
                              seed=seed, nominal=nominal, unstable_count=0)
    rec = metrics_record(
        requirement,
        CvarEstimates(beta=beta,
                      mean=float(np.mean(vals[finite])) if finite.any() else None,
                      var=None, cvar=None, worst=None, n=vals.size),
        seed=seed, nominal=nominal, unstable_count=unstable,
    )
    return rec


# ---------------------------------------------------------------------------
# Hashing and files
# ---------------------------------------------------------------------------


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _config_hash(problem: ProblemSpec, opts: SolverOptions, mode: str) -> str:
    # workers is an execution-resource knob that never changes any value,
    # so runs at different parallelism hash (and tie together) identically
    doc = {
        "problem": problem_to_dict(problem),
        "options": {f.name: _plain(getattr(opts, f.name))
                    for f in dataclasses.fields(opts) if f.name != "workers"},
        "mode": mode,
    }
    return hashlib.sha256(_canonical(doc).encode()).hexdigest()[:16]


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    return v


def _weight_to_dict(w: StateSpace):
    if w is None:
        return None
    return {"A": w.A.tolist(), "B": w.B.tolist(), "C": w.C.tolist(), "D": w.D.tolist()}


def _weight_from_dict(d):
    if d is None:
        return None
    return StateSpace(d["A"], d["B"], d["C"], d["D"])


def problem_to_dict(problem: ProblemSpec) -> dict:
    doc = {
        "format": _PROBLEM_TAG,
        "model": model_to_dict(problem.model, problem.template),
        "requirements": [
            {
                "name": r.name,
                "kind": r.loss.kind,
                "w": r.loss.w_name,
                "z": r.loss.z_name,
                "weight": _weight_to_dict(r.loss.weight),
                "role": r.role,
                "bound": r.bound,
                "beta": r.beta,
            }
            for r in problem.requirements
        ],
        "sampling": {
            "distributions": problem.scenario.dists.to_dict(),
            "constraint": (problem.scenario.constraint.to_dict()
                           if problem.scenario.constraint else None),
            "seed": problem.scenario.seed,
            "schedule": list(problem.scenario.schedule),
        },
        "mode": problem.mode,
    }
    if problem.k0 is not None:
        doc["k0"] = problem.k0.tolist()
    return doc


def problem_from_dict(doc: dict) -> ProblemSpec:
    if doc.get("format") != _PROBLEM_TAG:
        raise SpecError("format", f"expected {_PROBLEM_TAG!r}, got {doc.get('format')!r}")
    model, template = model_from_dict(doc["model"])
    if template is None:
        raise SpecError("model", "problem file must embed a controller template")
    reqs = []
    for i, r in enumerate(doc.get("requirements", [])):
        try:
            reqs.append(Requirement(
                name=r["name"],
                loss=LossSpec(r["kind"], r["w"], r["z"],
                              weight=_weight_from_dict(r.get("weight"))),
                role=r["role"],
                bound=r.get("bound"),
                beta=float(r.get("beta", 0.95)),
            ))
        except KeyError as exc:
            raise SpecError(f"requirements[{i}]", f"missing field {exc.args[0]!r}")
    samp = doc.get("sampling", {})
    try:
        scen = ScenarioConfig(
            dists=DistributionSpec.from_dict(samp["distributions"]),
            constraint=(Constraint.from_dict(samp["constraint"])
                        if samp.get("constraint") else None),
            seed=int(samp["seed"]),
            schedule=tuple(samp.get("schedule", (100, 500, 2500))),
        )
    except KeyError as exc:
        raise SpecError("sampling", f"missing field {exc.args[0]!r}")
    return ProblemSpec(model=model, template=template, requirements=tuple(reqs),
                       scenario=scen, k0=np.asarray(doc["k0"]) if "k0" in doc else None,
                       mode=doc.get("mode", "cvar"))


def options_from_dict(doc: dict) -> SolverOptions:
    """SolverOptions from a problem file's optional "options" section."""
    raw = dict(doc.get("options") or {})
    known = {f.name for f in dataclasses.fields(SolverOptions)}
    bad = sorted(set(raw) - known)
    if bad:
        raise SpecError("options", f"unknown solver option(s): {', '.join(bad)}")
    if isinstance(raw.get("max_iters"), list):
        raw["max_iters"] = tuple(raw["max_iters"])
    return SolverOptions(**raw)


def save_problem(path, problem: ProblemSpec, options: SolverOptions = None):
    doc = problem_to_dict(problem)
    if options is not None:
        doc["options"] = {f.name: _plain(getattr(options, f.name))
                          for f in dataclasses.fields(options)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_problem(path) -> ProblemSpec:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecError("problem_file", f"invalid JSON: {exc}")
    return problem_from_dict(doc)


def result_to_dict(res: SynthResult) -> dict:
    # alpha_star is a vector in requirement order; the parallel
    # requirement names ride along for self-containedness.
    return {
        "format": _RESULT_TAG,
        "mode": res.mode,
        "status": res.status,
        "k_star": res.k.tolist(),
        "requirement_names": list(res.alpha.keys()),
        "alpha_star": [v if math.isfinite(v) else None for v in res.alpha.values()],
        "metrics": [
            metrics_record(name, est, seed=res.seed)
            for name, est in res.estimates.items()
        ],
        "stage_objective": res.stage_cvar,
        "config_hash": res.config_hash,
        "seed": res.seed,
        "iterations": res.iterations,
        "evaluations": res.evaluations,
    }


def save_result(path, res: SynthResult):
    with open(path, "w") as fh:
        json.dump(result_to_dict(res), fh, indent=1)
        fh.write("\n")


def load_result(path) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecError("result_file", f"invalid JSON: {exc}")
    if doc.get("format") != _RESULT_TAG:
        raise SpecError("format", f"expected {_RESULT_TAG!r}, got {doc.get('format')!r}")
    if "k_star" not in doc:
        raise SpecError("result_file", "missing field 'k_star'")
    return doc


def write_iteration_log(path, log_rows):
    """CSV log: one row per accepted optimizer step."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(LOG_COLUMNS))
        writer.writeheader()
        for row in log_rows:
            writer.writerow({c: row.get(c) for c in LOG_COLUMNS})
