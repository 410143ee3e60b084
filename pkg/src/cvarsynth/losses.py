"""Loss functions of the sampled closed loop and their design gradients.

A loss is a (possibly weighted, possibly squared) H2 or Hinf norm of one
named w -> z channel of the closed loop at one uncertainty sample.  The
gradient with respect to the design vector is assembled in three stages:

  norm level      d(norm)/d(channel A, B, C, D)   Gramian adjoints for H2,
                                                  singular-vector formula
                                                  at the peaks for Hinf
  channel level   series weight + channel slice   ChannelJacobian
  closure level   d(closed loop)/dk               lfr.ClosureJacobian

Unstable samples (or samples whose Lyapunov solves are numerically
indistinguishable from unstable) evaluate to +inf with ``stable=False``;
the optimizer treats them through its stability acceptance gate, never
through the value.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import CvarSynthError, SpecError
from .lfr import (
    ClosureJacobian,
    close_controller,
    close_controller_with_jacobian,
    extract_channel,
    instantiate_delta,
)
from .ltisys import (
    StateSpace,
    gramian_pair,
    hinf_norm,
    spectral_abscissa,
)

__all__ = [
    "LossSpec",
    "LossValue",
    "EvalOptions",
    "ChannelJacobian",
    "eval_loss",
    "eval_losses",
    "h2_gradient",
    "hinf_subgradient",
    "finite_diff_check",
    "FdReport",
]

_KINDS = ("h2", "h2_squared", "hinf")
_SIGMA_GAP_REL = 1e-8


@dataclasses.dataclass(frozen=True)
class LossSpec:
    """One scalar loss: ``kind`` norm of weighted channel ``w_name -> z_name``.

    kind is "h2", "h2_squared" or "hinf"; ``weight`` (optional) is a
    stable LTI filter applied on the channel output.
    """

    kind: str
    w_name: str
    z_name: str
    weight: StateSpace = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise SpecError("loss.kind", f"unknown kind {self.kind!r}, expected one of {_KINDS}")
        if self.weight is not None:
            wspec = spectral_abscissa(self.weight.A)
            if not wspec.is_stable():
                raise SpecError(
                    "loss.weight",
                    f"weight must be Hurwitz, spectral abscissa {wspec.abscissa:.6g}",
                )


@dataclasses.dataclass(frozen=True)
class LossValue:
    """Loss at one sample.

    ``smooth`` is False at points where the Hinf loss is potentially
    nonsmooth (several active peaks, a repeated top singular value, or a
    response flat in frequency); the gradient then is one subgradient
    (uniform average over active peaks).
    """

    value: float
    stable: bool
    grad: np.ndarray = None
    active_freqs: tuple = ()
    smooth: bool = True


@dataclasses.dataclass(frozen=True)
class EvalOptions:
    """Numerical knobs for loss evaluation.

    ``hinf_tol`` is the relative bisection tolerance (the reported value
    is typically far more accurate, see ltisys.hinf_norm).
    ``stability_margin`` shifts the stability classification: a sample
    counts as stable only if the spectral abscissa is below ``-margin``.
    """

    hinf_tol: float = 1e-8
    stability_margin: float = 0.0
    grid_points: int = 200


class ChannelJacobian:
    """Pullback from a weighted-channel realization to the design vector.

    Composes the series-weight structure and channel slicing with the
    controller-closure Jacobian; all factors are precomputed so each
    ``pullback`` is a handful of small dense products.
    """

    def __init__(self, closure: ClosureJacobian, model, w_name: str, z_name: str,
                 weight: StateSpace = None):
        ws, ww = model.w_channels[w_name]
        zs, zw = model.z_channels[z_name]
        self.closure = closure
        self.BuSL = closure.BuSL
        self.SRCy = closure.SRCy
        self.SRDyw_w = closure.SRDyw[:, ws : ws + ww]
        self.DzuSL_z = closure.DzuSL[zs : zs + zw, :]
        self.n_main = closure.BuSL.shape[0]
        self.weight = weight

    def pullback(self, GA=None, GB=None, GC=None, GD=None) -> np.ndarray:
        if self.weight is not None:
            n1 = self.n_main
            BW, DW = self.weight.B, self.weight.D
            gA = None if GA is None else GA[:n1, :n1]
            gB = None if GB is None else GB[:n1, :]
            gC = None
            if GC is not None:
                gC = DW.T @ GC[:, :n1]
            if GA is not None:
                add = BW.T @ GA[n1:, :n1]
                gC = add if gC is None else gC + add
            gD = None
            if GD is not None:
                gD = DW.T @ GD
            if GB is not None:
                add = BW.T @ GB[n1:, :]
                gD = add if gD is None else gD + add
            GA, GB, GC, GD = gA, gB, gC, gD
        cj = self.closure
        M = np.zeros((self.BuSL.shape[1], self.SRCy.shape[0]))
        if GA is not None:
            M += self.BuSL.T @ GA @ self.SRCy.T
        if GB is not None:
            M += self.BuSL.T @ GB @ self.SRDyw_w.T
        if GC is not None:
            M += self.DzuSL_z.T @ GC @ self.SRCy.T
        if GD is not None:
            M += self.DzuSL_z.T @ GD @ self.SRDyw_w.T
        return cj.signs * M[cj.rows, cj.cols]


# ---------------------------------------------------------------------------
# Norm-level gradients
# ---------------------------------------------------------------------------


def h2_gradient(channel: StateSpace, jac) -> tuple:
    """Squared H2 norm of ``channel`` and its gradient through ``jac``.

    Uses the Gramian adjoints dJ/dA = 2QP, dJ/dB = 2QB, dJ/dC = 2CP
    with P, Q the controllability/observability Gramians (one LU
    factorization serves both).
    """
    if np.any(channel.D != 0.0):
        raise CvarSynthError(
            "h2_undefined_feedthrough",
            f"H2 loss undefined for nonzero channel feedthrough "
            f"(max |D| = {np.max(np.abs(channel.D)):.3g})",
        )
    if channel.nstates == 0:
        return 0.0, (None if jac is None else np.zeros(_dim_of(jac)))
    P, Q = gramian_pair(channel)
    value_sq = max(float(np.trace(channel.C @ P @ channel.C.T)), 0.0)
    if jac is None:
        return value_sq, None
    grad_sq = jac.pullback(
        GA=2.0 * Q @ P,
        GB=2.0 * Q @ channel.B,
        GC=2.0 * channel.C @ P,
    )
    return value_sq, grad_sq


def _dim_of(jac) -> int:
    cj = jac.closure if isinstance(jac, ChannelJacobian) else jac
    return cj.rows.size


def _peak_terms(channel: StateSpace, omega: float):
    """Left/right factors and singular vectors of G(j omega)."""
    A, B, C, D = channel.A, channel.B, channel.C, channel.D
    n = A.shape[0]
    if math.isinf(omega):
        G = D.astype(complex)
        U, s, Vh = np.linalg.svd(G)
        u, v = U[:, 0], Vh[0].conj()
        return u, v, None, None, s
    if n:
        M = 1j * omega * np.eye(n) - A
        G = C @ np.linalg.solve(M, B.astype(complex)) + D
    else:
        G = D.astype(complex)
    U, s, Vh = np.linalg.svd(G)
    u, v = U[:, 0], Vh[0].conj()
    if n:
        right = np.linalg.solve(M, B @ v)
        left = np.linalg.solve(M.T, C.T @ u.conj())
        return u, v, left, right, s
    return u, v, None, None, s


def hinf_subgradient(channel: StateSpace, jac, peak_freqs, all_freqs=False):
    """Subgradient of the Hinf norm at the given active frequencies.

    At a smooth point (single active peak, simple top singular value)
    this is the gradient ``Re(u^H dG(j w*) v)`` composed with the chain
    to the design vector.  At nonsmooth points the uniform average of
    the per-peak gradients is returned and ``smooth=False``.
    """
    freqs = tuple(peak_freqs) if not all_freqs else (math.inf,)
    if not freqs:
        return np.zeros(_dim_of(jac)), False
    grads = []
    repeated = False
    for omega in freqs:
        u, v, left, right, s = _peak_terms(channel, omega)
        if s.size > 1 and (s[0] - s[1]) <= _SIGMA_GAP_REL * max(s[0], 1e-300):
            repeated = True
        GD = np.real(np.outer(u.conj(), v))
        if left is None:
            grads.append(jac.pullback(GD=GD))
            continue
        GA = np.real(np.outer(left, right))
        GB = np.real(np.outer(left, v))
        GC = np.real(np.outer(u.conj(), right))
        grads.append(jac.pullback(GA=GA, GB=GB, GC=GC, GD=GD))
    grad = grads[0] if len(grads) == 1 else np.mean(grads, axis=0)
    smooth = (len(freqs) == 1) and not repeated and not all_freqs
    return grad, smooth


# ---------------------------------------------------------------------------
# Sample-level evaluation
# ---------------------------------------------------------------------------


def _unstable(specs, dim):
    return [
        LossValue(math.inf, False, None if dim is None else np.zeros(dim), (), True)
        for _ in specs
    ]


def eval_losses(model, template, k, sample, specs, with_grad=False,
                options: EvalOptions = EvalOptions()):
    """Evaluate several losses at one sample, sharing the assembly work.

    Returns a list of LossValue aligned with ``specs``.  One delta
    instantiation, one controller closure and one stability check serve
    all requirements; per-requirement work is channel extraction plus
    the norm itself.
    """
    k = np.asarray(k, dtype=float)
    inst = instantiate_delta(model, sample)
    if with_grad:
        closed, cj = close_controller_with_jacobian(inst, template, k)
        dim = cj.rows.size
    else:
        closed = close_controller(inst, template, k)
        cj, dim = None, None
    spec_abs = spectral_abscissa(closed.A)
    if not spec_abs.is_stable(options.stability_margin):
        return _unstable(specs, dim)

    out = []
    for spec in specs:
        chan = extract_channel(closed, model, spec.w_name, spec.z_name, spec.weight)
        jac = (
            ChannelJacobian(cj, model, spec.w_name, spec.z_name, spec.weight)
            if with_grad
            else None
        )
        try:
            if spec.kind in ("h2", "h2_squared"):
                vsq, gsq = h2_gradient(chan, jac)
                if spec.kind == "h2_squared":
                    out.append(LossValue(vsq, True, gsq, (), True))
                else:
                    val = math.sqrt(vsq)
                    g = None
                    if with_grad:
                        g = gsq / (2.0 * val) if val > 0.0 else np.zeros(dim)
                    out.append(LossValue(val, True, g, (), True))
            else:
                res = hinf_norm(chan, tol_rel=options.hinf_tol,
                                grid_points=options.grid_points)
                if with_grad:
                    g, smooth = hinf_subgradient(chan, jac, res.peak_freqs, res.all_freqs)
                else:
                    g, smooth = None, (len(res.peak_freqs) <= 1 and not res.all_freqs)
                out.append(LossValue(res.value, True, g, res.peak_freqs, smooth))
        except CvarSynthError as exc:
            if exc.code in ("lyapunov_residual", "norm_unstable"):
                # numerically indistinguishable from an unstable sample
                return _unstable(specs, dim)
            raise
    return out


def eval_loss(model, template, k, sample, spec: LossSpec, with_grad=False,
              options: EvalOptions = EvalOptions()) -> LossValue:
    """Single-requirement convenience wrapper around eval_losses."""
    return eval_losses(model, template, k, sample, [spec], with_grad, options)[0]


# ---------------------------------------------------------------------------
# Finite-difference audit
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class FdReport:
    rel_errors: np.ndarray
    max_rel_error: float
    step: float


def finite_diff_check(value_fn, point, grad, n_directions=8, step=1e-6, seed=0) -> FdReport:
    """Compare analytic directional derivatives against central differences.

    Perturbations are scaled per coordinate by ``step * (1 + |x_i|)``;
    the analytic prediction is the matching inner product with ``grad``.
    """
    x = np.asarray(point, dtype=float)
    g = np.asarray(grad, dtype=float)
    rng = np.random.default_rng(seed)
    scale = step * (1.0 + np.abs(x))
    errs = []
    for _ in range(n_directions):
        d = rng.standard_normal(x.size)
        d /= np.linalg.norm(d)
        h = scale * d
        fd = (value_fn(x + h) - value_fn(x - h)) / 2.0
        an = float(g @ h)
        errs.append(abs(fd - an) / max(abs(an), abs(fd), 1e-14))
    errs = np.asarray(errs)
    return FdReport(errs, float(np.max(errs)), step)
