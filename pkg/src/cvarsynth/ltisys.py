"""Dense continuous-time state-space kernel.

Everything downstream (uncertainty instantiation, loss evaluation,
synthesis) reduces to a handful of primitives on small dense
``(A, B, C, D)`` quadruples: spectral abscissa, Lyapunov solves, H2 and
Hinf norms, frequency response, and series interconnection.  Systems are
small (tens of states), so dense LAPACK factorizations beat anything
fancier and keep results bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import scipy.linalg as sla

from .errors import CvarSynthError

__all__ = [
    "StateSpace",
    "Spectrum",
    "HinfResult",
    "spectral_abscissa",
    "solve_lyapunov",
    "gramian_pair",
    "h2_norm",
    "h2_norm_squared",
    "hinf_norm",
    "freq_response",
    "connect_series",
]


def _as_matrix(x, rows, cols, name):
    a = np.asarray(x, dtype=float)
    if a.ndim == 0 and rows == 1 and cols == 1:
        a = a.reshape(1, 1)
    if a.ndim != 2:
        raise CvarSynthError("bad_shape", f"{name} must be 2-D, got ndim={a.ndim}")
    if rows is not None and a.shape != (rows, cols):
        raise CvarSynthError(
            "bad_shape", f"{name} has shape {a.shape}, expected {(rows, cols)}"
        )
    if not np.all(np.isfinite(a)):
        raise CvarSynthError("bad_value", f"{name} contains non-finite entries")
    return a


@dataclasses.dataclass(frozen=True)
class StateSpace:
    """Continuous-time LTI system ``x' = Ax + Bu, y = Cx + Du``.

    Matrices are validated, copied and frozen on construction.  Zero
    state dimension (a static gain) is allowed and exercised routinely:
    the empty blocks keep all dense algebra well defined.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.size == 0:
            A = A.reshape(0, 0)
        if A.shape[0] != A.shape[1]:
            raise CvarSynthError("bad_shape", f"A must be square, got {A.shape}")
        n = A.shape[0]
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        p, m = D.shape
        B = np.asarray(self.B, dtype=float).reshape(n, -1) if n else np.zeros((0, m))
        C = np.asarray(self.C, dtype=float).reshape(-1, n) if n else np.zeros((p, 0))
        B = _as_matrix(B, n, m, "B")
        C = _as_matrix(C, p, n, "C")
        A = _as_matrix(A, n, n, "A")
        D = _as_matrix(D, p, m, "D")
        for name, mat in (("A", A), ("B", B), ("C", C), ("D", D)):
            mat = mat.copy()
            mat.setflags(write=False)
            object.__setattr__(self, name, mat)

    @property
    def nstates(self) -> int:
        return self.A.shape[0]

    @property
    def ninputs(self) -> int:
        return self.D.shape[1]

    @property
    def noutputs(self) -> int:
        return self.D.shape[0]

    def __repr__(self):
        return (
            f"StateSpace(n={self.nstates}, inputs={self.ninputs}, "
            f"outputs={self.noutputs})"
        )


@dataclasses.dataclass(frozen=True)
class Spectrum:
    """Eigenvalues of a system matrix plus the spectral abscissa."""

    eigenvalues: np.ndarray
    abscissa: float

    def is_stable(self, margin: float = 0.0) -> bool:
        """True when every eigenvalue satisfies ``Re(lambda) < -margin``."""
        return bool(self.abscissa < -margin)


def spectral_abscissa(sys) -> Spectrum:
    """Eigenvalues and max real part of ``A`` (or of a bare square array).

    Zero-state systems are vacuously stable: the abscissa is ``-inf``.
    """
    A = sys.A if isinstance(sys, StateSpace) else np.asarray(sys, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise CvarSynthError("bad_shape", f"expected square matrix, got {A.shape}")
    if A.shape[0] == 0:
        return Spectrum(np.zeros(0, dtype=complex), -math.inf)
    try:
        w = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK hiccup
        raise CvarSynthError(
            "eig_failed", f"eigenvalue iteration failed on {A.shape[0]}x{A.shape[0]} matrix: {exc}"
        )
    return Spectrum(w, float(np.max(w.real)))


# ---------------------------------------------------------------------------
# Lyapunov machinery
# ---------------------------------------------------------------------------

_LYAP_RESIDUAL_TOL = 1e-10


class _LyapFactor:
    """LU factorization of ``I (x) A + A (x) I`` (column-major vec convention).

    One factorization serves both the forward equation
    ``A P + P A' + Q = 0`` and, via the transpose solve, the adjoint
    equation ``A' X + X A + Q = 0``.  For the state dimensions used here
    (n <= ~25) the dense Kronecker solve is faster and more predictable
    than iterative alternatives and bit-reproducible across runs.
    """

    def __init__(self, A: np.ndarray):
        n = A.shape[0]
        self.n = n
        eye = np.eye(n)
        K = np.kron(eye, A) + np.kron(A, eye)
        self.lu = sla.lu_factor(K, check_finite=False)
        self.Anorm = float(np.linalg.norm(A, "fro"))
        self._A = A

    def _solve(self, Q: np.ndarray, trans: int) -> np.ndarray:
        n = self.n
        vecq = -Q.ravel(order="F")
        vecp = sla.lu_solve(self.lu, vecq, trans=trans, check_finite=False)
        P = vecp.reshape((n, n), order="F")
        P = 0.5 * (P + P.T)
        qn = np.linalg.norm(Q, "fro")
        if qn > 0.0:
            At = self._A.T if trans else self._A
            res = At @ P + P @ At.T + Q
            rel = float(np.linalg.norm(res, "fro") / qn)
            if rel > _LYAP_RESIDUAL_TOL:
                raise CvarSynthError(
                    "lyapunov_residual",
                    f"Lyapunov solve residual {rel:.3e} exceeds {_LYAP_RESIDUAL_TOL:.1e}"
                    f" (n={n})",
                )
        return P

    def solve(self, Q: np.ndarray) -> np.ndarray:
        """P with ``A P + P A' + Q = 0``."""
        return self._solve(Q, trans=0)

    def solve_adjoint(self, Q: np.ndarray) -> np.ndarray:
        """X with ``A' X + X A + Q = 0`` (reuses the same LU factors)."""
        return self._solve(Q, trans=1)


def solve_lyapunov(A, Q) -> np.ndarray:
    """Solve ``A P + P A' + Q = 0`` for symmetric ``P``.

    ``A`` must be Hurwitz; otherwise the equation has no stabilizing
    solution and we refuse rather than return garbage.  The residual of
    the returned solution is checked against 1e-10 (relative to
    ``||Q||_F``) and a diagnostic error carries the actual residual.
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape != Q.shape:
        raise CvarSynthError(
            "bad_shape", f"need square A and matching Q, got {A.shape} and {Q.shape}"
        )
    if A.shape[0] == 0:
        return np.zeros((0, 0))
    spec = spectral_abscissa(A)
    if not spec.is_stable():
        raise CvarSynthError(
            "lyapunov_unstable",
            f"A has spectral abscissa {spec.abscissa:.6g} >= 0; Lyapunov equation "
            "has no stable solution",
        )
    return _LyapFactor(A).solve(Q)


def gramian_pair(sys: StateSpace):
    """Controllability and observability Gramians from one factorization.

    Returns ``(P, Q)`` with ``A P + P A' + B B' = 0`` and
    ``A' Q + Q A + C' C = 0``.
    """
    spec = spectral_abscissa(sys.A)
    if not spec.is_stable():
        raise CvarSynthError(
            "norm_unstable",
            f"system is not Hurwitz (abscissa {spec.abscissa:.6g}); gramians undefined",
        )
    fac = _LyapFactor(sys.A)
    P = fac.solve(sys.B @ sys.B.T)
    Q = fac.solve_adjoint(sys.C.T @ sys.C)
    return P, Q


# ---------------------------------------------------------------------------
# H2 norm
# ---------------------------------------------------------------------------


def h2_norm_squared(sys: StateSpace) -> float:
    """Squared H2 norm ``trace(C P C')`` with ``P`` the controllability Gramian."""
    if np.any(sys.D != 0.0):
        raise CvarSynthError(
            "h2_undefined_feedthrough",
            f"H2 norm undefined for nonzero feedthrough (max |D| = {np.max(np.abs(sys.D)):.3g})",
        )
    if sys.nstates == 0:
        return 0.0
    spec = spectral_abscissa(sys.A)
    if not spec.is_stable():
        raise CvarSynthError(
            "norm_unstable",
            f"H2 norm undefined: spectral abscissa {spec.abscissa:.6g} >= 0",
        )
    P = _LyapFactor(sys.A).solve(sys.B @ sys.B.T)
    val = float(np.trace(sys.C @ P @ sys.C.T))
    # trace is mathematically nonnegative; clip the last-bit noise
    return max(val, 0.0)


def h2_norm(sys: StateSpace) -> float:
    """H2 norm of a strictly proper Hurwitz system."""
    return math.sqrt(h2_norm_squared(sys))


# ---------------------------------------------------------------------------
# Frequency response and Hinf norm
# ---------------------------------------------------------------------------


def freq_response(sys: StateSpace, omega) -> np.ndarray:
    """Transfer matrix ``G(j w) = C (jwI - A)^-1 B + D`` on a frequency grid.

    Returns an array of shape ``(len(omega), p, m)``.  Scalar ``omega``
    yields shape ``(p, m)``.
    """
    om = np.atleast_1d(np.asarray(omega, dtype=float))
    scalar = np.isscalar(omega) or np.ndim(omega) == 0
    n = sys.nstates
    p, m = sys.noutputs, sys.ninputs
    out = np.empty((om.size, p, m), dtype=complex)
    if n == 0:
        out[:] = sys.D
    else:
        for i, w in enumerate(om):
            M = 1j * w * np.eye(n) - sys.A
            try:
                X = np.linalg.solve(M, sys.B)
            except np.linalg.LinAlgError:
                raise CvarSynthError(
                    "resolvent_singular",
                    f"(jwI - A) singular at omega = {w:.6g}; frequency on the spectrum",
                )
            out[i] = sys.C @ X + sys.D
    return out[0] if scalar else out


class _GainEvaluator:
    """Largest singular value of ``G(j w)``, batched over frequencies.

    Uses the eigendecomposition of ``A`` to turn each resolvent solve
    into a diagonal scaling; falls back to direct solves if the
    eigenvector basis is too ill-conditioned to trust.
    """

    def __init__(self, sys: StateSpace):
        self.sys = sys
        self.n = sys.nstates
        self._diag = None
        if self.n:
            try:
                w, V = np.linalg.eig(sys.A)
                cond = np.linalg.cond(V)
                if np.isfinite(cond) and cond < 1e9:
                    CV = sys.C @ V
                    VB = np.linalg.solve(V, sys.B.astype(complex))
                    self._diag = (w, CV, VB)
            except np.linalg.LinAlgError:
                pass

    def gains(self, omegas) -> np.ndarray:
        om = np.atleast_1d(np.asarray(omegas, dtype=float))
        sys = self.sys
        if self.n == 0:
            g = float(np.linalg.norm(sys.D, 2)) if sys.D.size else 0.0
            return np.full(om.shape, g)
        if self._diag is not None:
            w, CV, VB = self._diag
            # resolvent through the eigenbasis: C V diag(1/(jw - lam)) V^-1 B
            denom = 1j * om[:, None] - w[None, :]
            core = VB[None, :, :] / denom[:, :, None]
            G = CV[None, :, :] @ core + sys.D[None, :, :]
        else:
            G = freq_response(sys, om)
            G = G.reshape(om.size, sys.noutputs, sys.ninputs)
        return np.linalg.svd(G, compute_uv=False)[..., 0]

    def gain(self, omega: float) -> float:
        return float(self.gains([omega])[0])


@dataclasses.dataclass(frozen=True)
class HinfResult:
    """Hinf norm with the frequencies achieving it.

    ``peak_freqs`` lists finite maximizers in rad/s; ``math.inf`` appears
    when the supremum is (also) attained as ``w -> inf``; ``all_freqs``
    marks the degenerate flat case (static or all-pass-like response
    within tolerance), where every frequency is active.
    """

    value: float
    peak_freqs: tuple
    all_freqs: bool


def _imag_axis_crossings(sys: StateSpace, gamma: float):
    """Frequencies where some singular value of G(jw) equals gamma.

    Eigenvalues of the associated Hamiltonian matrix that sit on the
    imaginary axis correspond to those crossings; returns the sorted
    nonnegative imaginary parts, or None if gamma <= sigma_max(D).
    """
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    n = A.shape[0]
    m = B.shape[1]
    R = gamma * gamma * np.eye(m) - D.T @ D
    try:
        Rinv_Dt_C = np.linalg.solve(R, D.T @ C)
        Rinv_Bt = np.linalg.solve(R, B.T)
    except np.linalg.LinAlgError:
        return None
    Ah = A + B @ Rinv_Dt_C
    H = np.zeros((2 * n, 2 * n))
    H[:n, :n] = Ah
    H[:n, n:] = B @ Rinv_Bt
    H[n:, :n] = -C.T @ (C + D @ Rinv_Dt_C)
    H[n:, n:] = -Ah.T
    try:
        ev = np.linalg.eigvals(H)
    except np.linalg.LinAlgError as exc:
        raise CvarSynthError(
            "eig_failed", f"eigenvalue iteration failed on {2*n}x{2*n} Hamiltonian: {exc}"
        )
    on_axis = np.abs(ev.real) <= 1e-8 * (1.0 + np.abs(ev.imag))
    freqs = np.unique(np.abs(ev[on_axis].imag))
    return freqs


def _golden_max(f, a: float, b: float, rel_tol: float = 1e-11, max_iter: int = 90):
    """Golden-section maximization on [a, b]; returns (x*, f(x*))."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    invphi2 = (3.0 - math.sqrt(5.0)) / 2.0
    h = b - a
    c, d = a + invphi2 * h, a + invphi * h
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if h <= rel_tol * max(1.0, abs(b)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            h = b - a
            c = a + invphi2 * h
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            h = b - a
            d = a + invphi * h
            fd = f(d)
    if fc >= fd:
        return c, fc
    return d, fd


def hinf_norm(
    sys: StateSpace,
    tol_rel: float = 1e-9,
    grid_points: int = 200,
) -> HinfResult:
    """Hinf norm via Hamiltonian bisection, with peak-frequency extraction.

    The bracket starts from the larger of sigma_max(D) and a log-spaced
    gain sweep (1e-4..1e4 rad/s), with a trace-bound upper end, and is
    bisected on the purely-imaginary-eigenvalue test until its relative
    width drops below ``tol_rel``.  The reported value is the largest
    gain actually evaluated at a candidate peak (golden-section refined),
    so it is accurate to far better than the bisection width while the
    certificate guarantees ``value >= sup - 2*tol_rel*value``.

    Returns
    -------
    HinfResult
        value, maximizing frequencies, and the all-frequencies flag.
    """
    spec = spectral_abscissa(sys.A)
    if sys.nstates and not spec.is_stable():
        raise CvarSynthError(
            "norm_unstable",
            f"Hinf norm undefined: spectral abscissa {spec.abscissa:.6g} >= 0",
        )
    sigma_d = float(np.linalg.norm(sys.D, 2)) if sys.D.size else 0.0
    if sys.nstates == 0 or not np.any(sys.B) or not np.any(sys.C):
        # static (or effectively static) response
        return HinfResult(sigma_d, (), True)

    fg = _GainEvaluator(sys)
    grid = np.logspace(-4.0, 4.0, grid_points)
    grid_gains = fg.gains(grid)
    lower = max(sigma_d, float(np.max(grid_gains)))
    if lower <= 0.0:
        return HinfResult(0.0, (), True)

    # coarse upper bound: feedthrough plus a trace bound on the proper part
    P, Q = gramian_pair(sys)
    tr = max(float(np.trace(P @ Q)), 0.0)
    upper = 2.0 * lower + sigma_d + 2.0 * sys.nstates * math.sqrt(tr)

    for _ in range(60):
        cr = _imag_axis_crossings(sys, upper)
        if cr is None or cr.size:
            upper *= 2.0
        else:
            break
    else:  # pragma: no cover - trace bound guarantees termination
        raise CvarSynthError("hinf_bracket", "failed to bracket the Hinf norm")

    while (upper - lower) > tol_rel * upper:
        gamma = 0.5 * (lower + upper)
        cr = _imag_axis_crossings(sys, gamma)
        if cr is None:
            lower = gamma
        elif cr.size:
            # gains sampled between level crossings sit above gamma and
            # tighten the bracket much faster than plain halving
            mids = 0.5 * (cr[:-1] + cr[1:]) if cr.size > 1 else cr
            achieved = float(np.max(fg.gains(np.concatenate([cr, mids]))))
            lower = max(gamma, achieved)
        else:
            upper = gamma

    value = 0.5 * (lower + upper)

    # --- peak extraction ------------------------------------------------
    probe = value * (1.0 - 10.0 * max(tol_rel, 1e-12))
    candidates = []
    crossings = None
    if probe > sigma_d:
        crossings = _imag_axis_crossings(sys, probe)
    if crossings is not None and crossings.size:
        pts = np.concatenate(([0.0], crossings, [crossings[-1] * 10.0 + 1.0]))
        for a, b in zip(pts[:-1], pts[1:]):
            if b <= a:
                continue
            mid = 0.5 * (a + b)
            if fg.gain(mid) >= probe:
                wstar, gstar = _golden_max(fg.gain, a, b)
                candidates.append((wstar, gstar))
    else:
        # no interior lobe above the probe level: endpoint suprema only
        g0 = fg.gain(0.0)
        if g0 >= probe:
            wstar, gstar = _golden_max(fg.gain, 0.0, grid[0])
            candidates.append((wstar, gstar))
    if not candidates and sigma_d < probe:
        # fall back to the sweep argmax (flat responses, clustered peaks)
        i = int(np.argmax(grid_gains))
        a = grid[max(i - 1, 0)]
        b = grid[min(i + 1, grid_points - 1)]
        wstar, gstar = _golden_max(fg.gain, a, b)
        candidates.append((wstar, gstar))

    # report achieved gains only: the bisection bracket certifies the upper
    # bound, but its lower end can be polluted by the near-singular
    # R = gamma^2 I - D'D region when the peak sits at sigma_max(D)
    best = max((g for _, g in candidates), default=0.0)
    value = max(best, sigma_d, float(np.max(grid_gains)))
    thresh = value * (1.0 - 10.0 * max(tol_rel, 1e-12))

    peaks = []
    for w, g in sorted(candidates):
        if g >= thresh and not any(
            abs(w - q) <= 1e-6 * max(1.0, abs(q)) for q in peaks
        ):
            peaks.append(w)
    g0 = fg.gain(0.0)
    if g0 >= thresh and not any(q <= 1e-6 for q in peaks):
        peaks.insert(0, 0.0)
    at_inf = sigma_d >= thresh
    if at_inf:
        peaks.append(math.inf)

    # flat response: spread between sweep min and max within tolerance
    flat = bool(
        sigma_d >= thresh
        and float(np.min(grid_gains)) >= thresh
        and g0 >= thresh
    )
    return HinfResult(float(value), tuple(peaks), flat)


# ---------------------------------------------------------------------------
# Interconnection
# ---------------------------------------------------------------------------


def connect_series(first: StateSpace, second: StateSpace) -> StateSpace:
    """Series interconnection ``second * first`` (output of first feeds second)."""
    if second.ninputs != first.noutputs:
        raise CvarSynthError(
            "dim_mismatch",
            f"series connection needs second.ninputs == first.noutputs, "
            f"got {second.ninputs} != {first.noutputs}",
        )
    n1, n2 = first.nstates, second.nstates
    A = np.zeros((n1 + n2, n1 + n2))
    A[:n1, :n1] = first.A
    A[n1:, n1:] = second.A
    A[n1:, :n1] = second.B @ first.C
    B = np.vstack([first.B, second.B @ first.D])
    C = np.hstack([second.D @ first.C, second.C])
    D = second.D @ first.D
    return StateSpace(A, B, C, D)
