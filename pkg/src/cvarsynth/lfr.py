"""Linear fractional representations of uncertain plants.

An uncertain closed loop is kept as one augmented state-space ``M`` with
three port groups on each side, ordered

    inputs : [ delta inputs | controller inputs u_K | exogenous w ]
    outputs: [ delta outputs | measurements y_K     | performance z ]

``instantiate_delta`` closes the delta loop for one parameter sample;
``close_controller`` closes the controller loop for one design vector.
The two closures commute, which is checked in the tests and relied on
nowhere (every evaluation instantiates delta first, which is cheaper).

The controller enters through ``u = -K(s) y`` (negative feedback), as a
structured template: a list of blocks, each an LTI system of fixed order
from a subset of measurements to a subset of controls, with entrywise
free/frozen masks on its realization matrices.  The free entries, in a
fixed documented order, form the design vector ``k``.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from .errors import CvarSynthError, SpecError
from .ltisys import StateSpace, connect_series

__all__ = [
    "DeltaStructure",
    "LfrModel",
    "ControllerBlock",
    "ControllerTemplate",
    "ClosureJacobian",
    "instantiate_delta",
    "close_controller",
    "close_controller_with_jacobian",
    "close_controller_lfr",
    "extract_channel",
    "save_model",
    "load_model",
]

_DELTA_COND_LIMIT = 1e12


@dataclasses.dataclass(frozen=True)
class DeltaStructure:
    """Ordered real scalar uncertainty blocks ``diag(d_i I_{r_i})``.

    ``blocks`` is a tuple of ``(name, repetitions)`` pairs; the
    concatenation order defines both the delta port order of the model
    and the entry order of parameter sample vectors.
    """

    blocks: tuple

    def __post_init__(self):
        norm = []
        seen = set()
        for item in self.blocks:
            name, reps = item
            reps = int(reps)
            if reps < 1:
                raise SpecError("delta_blocks", f"block {name!r} has repetitions {reps} < 1")
            if name in seen:
                raise SpecError("delta_blocks", f"duplicate block name {name!r}")
            seen.add(name)
            norm.append((str(name), reps))
        object.__setattr__(self, "blocks", tuple(norm))

    @property
    def names(self):
        return tuple(name for name, _ in self.blocks)

    @property
    def nparams(self) -> int:
        return len(self.blocks)

    @property
    def total_dim(self) -> int:
        return sum(reps for _, reps in self.blocks)

    def expand(self, sample) -> np.ndarray:
        """Per-port delta values (each parameter repeated its block size)."""
        sample = np.asarray(sample, dtype=float).ravel()
        if sample.size != self.nparams:
            raise CvarSynthError(
                "dim_mismatch",
                f"sample has {sample.size} entries, structure has {self.nparams} blocks",
            )
        reps = [r for _, r in self.blocks]
        return np.repeat(sample, reps)


def _channel_table(raw, side):
    table = {}
    for name, (start, width) in raw.items():
        start, width = int(start), int(width)
        if width < 1 or start < 0:
            raise SpecError(f"{side}_channels.{name}", f"bad slice ({start}, {width})")
        table[str(name)] = (start, width)
    return table


@dataclasses.dataclass(frozen=True)
class LfrModel:
    """Uncertain open-loop plant in LFR form with named channels.

    ``w_channels`` / ``z_channels`` name slices of the exogenous input /
    performance output blocks as ``name -> (offset, width)``, offsets
    counted from the start of the w (resp. z) block.
    """

    M: StateSpace
    delta: DeltaStructure
    n_meas: int
    n_ctrl: int
    w_channels: dict
    z_channels: dict

    def __post_init__(self):
        object.__setattr__(self, "w_channels", _channel_table(self.w_channels, "w"))
        object.__setattr__(self, "z_channels", _channel_table(self.z_channels, "z"))
        nd = self.delta.total_dim
        nw = self.M.ninputs - nd - self.n_ctrl
        nz = self.M.noutputs - nd - self.n_meas
        if nw < 0 or nz < 0:
            raise SpecError(
                "model",
                f"M has {self.M.ninputs} inputs / {self.M.noutputs} outputs, "
                f"too few for {nd} delta ports + {self.n_ctrl} controls / {self.n_meas} measurements",
            )
        for name, (start, width) in self.w_channels.items():
            if start + width > nw:
                raise SpecError(f"w_channels.{name}", f"slice exceeds w width {nw}")
        for name, (start, width) in self.z_channels.items():
            if start + width > nz:
                raise SpecError(f"z_channels.{name}", f"slice exceeds z width {nz}")

    @property
    def n_w(self) -> int:
        return self.M.ninputs - self.delta.total_dim - self.n_ctrl

    @property
    def n_z(self) -> int:
        return self.M.noutputs - self.delta.total_dim - self.n_meas


def instantiate_delta(model: LfrModel, sample) -> StateSpace:
    """Close the delta loop for one parameter sample.

    Returns the sampled plant with ports ``[u_K | w] -> [y_K | z]``.
    Raises ``delta_loop_singular`` when ``I - M11 Delta`` is effectively
    singular (condition number above 1e12).
    """
    M = model.M
    nd = model.delta.total_dim
    dvec = model.delta.expand(sample)

    A, B, C, D = M.A, M.B, M.C, M.D
    Bd, Br = B[:, :nd], B[:, nd:]
    Cd, Cr = C[:nd, :], C[nd:, :]
    D11 = D[:nd, :nd]
    D12 = D[:nd, nd:]
    D21 = D[nd:, :nd]
    D22 = D[nd:, nd:]

    if nd == 0:
        return StateSpace(A, Br, Cr, D22)

    E = np.eye(nd) - dvec[:, None] * D11
    cond = np.linalg.cond(E)
    if not np.isfinite(cond) or cond > _DELTA_COND_LIMIT:
        raise CvarSynthError(
            "delta_loop_singular",
            f"I - M11*Delta has condition number {cond:.3e} (limit {_DELTA_COND_LIMIT:.1e}) "
            f"at sample {np.asarray(sample).tolist()}",
        )
    # u_delta = (I - Delta M11)^-1 Delta (Cd x + D12 u)
    W = np.linalg.solve(E, dvec[:, None] * np.hstack([Cd, D12]))
    Wc, Wd = W[:, : A.shape[0]], W[:, A.shape[0]:]
    return StateSpace(
        A + Bd @ Wc,
        Br + Bd @ Wd,
        Cr + D21 @ Wc,
        D22 + D21 @ Wd,
    )


# ---------------------------------------------------------------------------
# Controller templates
# ---------------------------------------------------------------------------


def _mask(value, rows, cols, name, default):
    if value is None:
        return np.full((rows, cols), default, dtype=bool)
    m = np.asarray(value, dtype=bool)
    m = m.reshape(rows, cols) if m.size == rows * cols else m
    if m.shape != (rows, cols):
        raise SpecError(name, f"mask shape {m.shape}, expected {(rows, cols)}")
    return m


@dataclasses.dataclass(frozen=True)
class ControllerBlock:
    """One structured controller block: an LTI map y[inputs] -> u[outputs].

    ``order`` is the block's state dimension (0 means a static gain).
    ``free_*`` masks flag which entries of the realization are design
    variables; frozen entries keep their ``base_*`` values.
    """

    inputs: tuple
    outputs: tuple
    order: int
    base_a: np.ndarray = None
    base_b: np.ndarray = None
    base_c: np.ndarray = None
    base_d: np.ndarray = None
    free_a: np.ndarray = None
    free_b: np.ndarray = None
    free_c: np.ndarray = None
    free_d: np.ndarray = None

    def __post_init__(self):
        inputs = tuple(int(i) for i in self.inputs)
        outputs = tuple(int(i) for i in self.outputs)
        if len(set(inputs)) != len(inputs) or len(set(outputs)) != len(outputs):
            raise SpecError("controller_block", "repeated port index within a block")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)
        n, p, m = int(self.order), len(outputs), len(inputs)
        if n < 0:
            raise SpecError("controller_block", f"negative order {n}")
        object.__setattr__(self, "order", n)
        shapes = {"a": (n, n), "b": (n, m), "c": (p, n), "d": (p, m)}
        for key, (r, c) in shapes.items():
            base = getattr(self, f"base_{key}")
            base = np.zeros((r, c)) if base is None else np.asarray(base, dtype=float).reshape(r, c)
            base = base.copy()
            base.setflags(write=False)
            object.__setattr__(self, f"base_{key}", base)
            mask = _mask(getattr(self, f"free_{key}"), r, c, f"free_{key}", True)
            mask = mask.copy()
            mask.setflags(write=False)
            object.__setattr__(self, f"free_{key}", mask)

    @property
    def n_free(self) -> int:
        return int(
            self.free_a.sum() + self.free_b.sum() + self.free_c.sum() + self.free_d.sum()
        )


@dataclasses.dataclass(frozen=True)
class ControllerTemplate:
    """Structured controller: several blocks sharing the measurement/control buses.

    The design vector ``k`` stacks the free entries block by block, each
    block in (A, B, C, D) order, row-major within a matrix.  Two blocks
    may read the same measurement but must not drive the same control.
    """

    n_meas: int
    n_ctrl: int
    blocks: tuple

    def __post_init__(self):
        blocks = tuple(self.blocks)
        object.__setattr__(self, "blocks", blocks)
        driven = set()
        for blk in blocks:
            for i in blk.inputs:
                if not (0 <= i < self.n_meas):
                    raise SpecError("controller_template", f"input index {i} out of range")
            for o in blk.outputs:
                if not (0 <= o < self.n_ctrl):
                    raise SpecError("controller_template", f"output index {o} out of range")
                if o in driven:
                    raise SpecError("controller_template", f"control {o} driven by two blocks")
                driven.add(o)

    @property
    def order(self) -> int:
        return sum(blk.order for blk in self.blocks)

    @property
    def dim_k(self) -> int:
        return sum(blk.n_free for blk in self.blocks)

    def devectorize(self, k):
        """Design vector -> list of per-block (A_K, B_K, C_K, D_K)."""
        k = np.asarray(k, dtype=float).ravel()
        if k.size != self.dim_k:
            raise CvarSynthError(
                "dim_mismatch", f"design vector has {k.size} entries, template needs {self.dim_k}"
            )
        out = []
        pos = 0
        for blk in self.blocks:
            mats = []
            for key in ("a", "b", "c", "d"):
                base = getattr(blk, f"base_{key}").copy()
                mask = getattr(blk, f"free_{key}")
                cnt = int(mask.sum())
                base[mask] = k[pos : pos + cnt]
                pos += cnt
                mats.append(base)
            out.append(tuple(mats))
        return out

    def vectorize(self, block_matrices) -> np.ndarray:
        """Inverse of devectorize (frozen entries are ignored)."""
        if len(block_matrices) != len(self.blocks):
            raise CvarSynthError(
                "dim_mismatch",
                f"expected {len(self.blocks)} blocks, got {len(block_matrices)}",
            )
        parts = []
        for blk, mats in zip(self.blocks, block_matrices):
            for key, mat in zip(("a", "b", "c", "d"), mats):
                mask = getattr(blk, f"free_{key}")
                mat = np.asarray(mat, dtype=float).reshape(mask.shape)
                parts.append(mat[mask])
        return np.concatenate(parts) if parts else np.zeros(0)

    def assemble(self, k) -> StateSpace:
        """Full controller K(s) on the measurement/control buses."""
        n = self.order
        A = np.zeros((n, n))
        B = np.zeros((n, self.n_meas))
        C = np.zeros((self.n_ctrl, n))
        D = np.zeros((self.n_ctrl, self.n_meas))
        pos = 0
        for blk, (a, b, c, d) in zip(self.blocks, self.devectorize(k)):
            nb = blk.order
            sl = slice(pos, pos + nb)
            A[sl, sl] = a
            B[sl, list(blk.inputs)] = b
            C[np.ix_(list(blk.outputs), range(pos, pos + nb))] = c
            D[np.ix_(list(blk.outputs), list(blk.inputs))] = d
            pos += nb
        return StateSpace(A, B, C, D)

    def theta_layout(self):
        """Placement of each design variable inside the joint gain Theta.

        Theta = [[A_K, B_K], [-C_K, -D_K]] on the augmented buses
        (controller state derivative and control output stacked over
        controller state and measurement).  Returns (rows, cols, signs),
        one entry per component of k.
        """
        n = self.order
        rows, cols, signs = [], [], []
        pos = 0
        for blk in self.blocks:
            nb = blk.order
            offs = {
                "a": (pos, pos, 1.0, None, None),
                "b": (pos, n, 1.0, None, list(blk.inputs)),
                "c": (n, pos, -1.0, list(blk.outputs), None),
                "d": (n, n, -1.0, list(blk.outputs), list(blk.inputs)),
            }
            for key in ("a", "b", "c", "d"):
                r0, c0, sg, rmap, cmap = offs[key]
                mask = getattr(blk, f"free_{key}")
                for i, j in zip(*np.nonzero(mask)):
                    rows.append(r0 + (rmap[i] if rmap is not None else int(i)))
                    cols.append(c0 + (cmap[j] if cmap is not None else int(j)))
                    signs.append(sg)
            pos += nb
        return np.asarray(rows, int), np.asarray(cols, int), np.asarray(signs, float)


# ---------------------------------------------------------------------------
# Controller closure
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ClosureJacobian:
    """Derivative of the closed loop with respect to the design vector.

    The closure is ``A_cl = At + Bu L Cy`` (and matching B/C/D blocks)
    with ``L = (I - Theta Dyu)^-1 Theta``; hence
    ``dX_cl = (left factor) dTheta (right factor)`` for every closed-loop
    matrix, all four sharing ``SL = (I - Theta Dyu)^-1`` on the left and
    ``SR = (I - Dyu Theta)^-1`` on the right.  ``pullback`` maps
    gradients with respect to the closed-loop matrices to a gradient with
    respect to ``k`` without ever materializing the rank-one basis.
    """

    BuSL: np.ndarray
    DzuSL: np.ndarray
    SRCy: np.ndarray
    SRDyw: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    signs: np.ndarray

    def pullback(self, GA=None, GB=None, GC=None, GD=None) -> np.ndarray:
        """Map d/d(closed A,B,C,D) to d/dk.  Missing blocks are zero."""
        nL = self.BuSL.shape[1]
        nR = self.SRCy.shape[0]
        M = np.zeros((nL, nR))
        if GA is not None:
            M += self.BuSL.T @ GA @ self.SRCy.T
        if GB is not None:
            M += self.BuSL.T @ GB @ self.SRDyw.T
        if GC is not None:
            M += self.DzuSL.T @ GC @ self.SRCy.T
        if GD is not None:
            M += self.DzuSL.T @ GD @ self.SRDyw.T
        return self.signs * M[self.rows, self.cols]


def _close(sys: StateSpace, template: ControllerTemplate, k, want_jacobian: bool):
    """Close u = -K y on the leading n_meas outputs / n_ctrl inputs of sys."""
    n_meas, n_ctrl = template.n_meas, template.n_ctrl
    if sys.ninputs < n_ctrl or sys.noutputs < n_meas:
        raise CvarSynthError(
            "dim_mismatch",
            f"plant has {sys.ninputs} inputs / {sys.noutputs} outputs; template needs "
            f"{n_ctrl} controls / {n_meas} measurements",
        )
    nk = template.order
    n = sys.nstates
    nw = sys.ninputs - n_ctrl
    nz = sys.noutputs - n_meas

    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    Bu, Bw = B[:, :n_ctrl], B[:, n_ctrl:]
    Cy, Cz = C[:n_meas, :], C[n_meas:, :]
    Dyu, Dyw = D[:n_meas, :n_ctrl], D[:n_meas, n_ctrl:]
    Dzu, Dzw = D[n_meas:, :n_ctrl], D[n_meas:, n_ctrl:]

    # augmented buses: util = [x_K'; u], ytil = [x_K; y]
    na = n + nk
    At = np.zeros((na, na))
    At[:n, :n] = A
    But = np.zeros((na, nk + n_ctrl))
    But[:n, nk:] = Bu
    But[n:, :nk] = np.eye(nk)
    Bwt = np.vstack([Bw, np.zeros((nk, nw))])
    Cyt = np.zeros((nk + n_meas, na))
    Cyt[:nk, n:] = np.eye(nk)
    Cyt[nk:, :n] = Cy
    Czt = np.hstack([Cz, np.zeros((nz, nk))])
    Dyut = np.zeros((nk + n_meas, nk + n_ctrl))
    Dyut[nk:, nk:] = Dyu
    Dywt = np.vstack([np.zeros((nk, nw)), Dyw])
    Dzut = np.hstack([np.zeros((nz, nk)), Dzu])

    # joint gain with the feedback sign folded in
    mats = template.devectorize(k)
    Ak = np.zeros((nk, nk))
    Bk = np.zeros((nk, n_meas))
    Ck = np.zeros((n_ctrl, nk))
    Dk = np.zeros((n_ctrl, n_meas))
    pos = 0
    for blk, (a, b, c, d) in zip(template.blocks, mats):
        sl = slice(pos, pos + blk.order)
        Ak[sl, sl] = a
        Bk[sl, list(blk.inputs)] = b
        Ck[np.ix_(list(blk.outputs), range(pos, pos + blk.order))] = c
        Dk[np.ix_(list(blk.outputs), list(blk.inputs))] = d
        pos += blk.order
    Theta = np.block([[Ak, Bk], [-Ck, -Dk]])

    Eyu = np.eye(nk + n_meas) - Dyut @ Theta
    try:
        SR = np.linalg.inv(Eyu)
    except np.linalg.LinAlgError:
        raise CvarSynthError(
            "controller_loop_singular",
            "I - Dyu*K singular: controller feedthrough closes an algebraic loop",
        )
    cond = np.linalg.cond(Eyu)
    if not np.isfinite(cond) or cond > _DELTA_COND_LIMIT:
        raise CvarSynthError(
            "controller_loop_singular",
            f"I - Dyu*K has condition number {cond:.3e} (limit {_DELTA_COND_LIMIT:.1e})",
        )
    L = Theta @ SR  # equals (I - Theta Dyu)^-1 Theta

    Acl = At + But @ L @ Cyt
    Bcl = Bwt + But @ L @ Dywt
    Ccl = Czt + Dzut @ L @ Cyt
    Dcl = Dzw + Dzut @ L @ Dywt
    closed = StateSpace(Acl, Bcl, Ccl, Dcl)
    if not want_jacobian:
        return closed, None

    SL = np.eye(nk + n_ctrl) + L @ Dyut  # equals (I - Theta Dyu)^-1
    rows, cols, signs = template.theta_layout()
    jac = ClosureJacobian(
        BuSL=But @ SL,
        DzuSL=Dzut @ SL,
        SRCy=SR @ Cyt,
        SRDyw=SR @ Dywt,
        rows=rows,
        cols=cols,
        signs=signs,
    )
    return closed, jac


def close_controller(sys: StateSpace, template: ControllerTemplate, k) -> StateSpace:
    """Close the controller loop ``u = -K(s) y`` on an instantiated plant.

    The plant's first ``n_ctrl`` inputs and first ``n_meas`` outputs are
    the controller ports; remaining ports pass through in order, so the
    result maps ``w -> z`` with the model's channel tables unchanged.
    """
    closed, _ = _close(sys, template, np.asarray(k, dtype=float), False)
    return closed


def close_controller_with_jacobian(sys: StateSpace, template: ControllerTemplate, k):
    """Same as close_controller but also returns the ClosureJacobian."""
    return _close(sys, template, np.asarray(k, dtype=float), True)


def close_controller_lfr(model: LfrModel, template: ControllerTemplate, k) -> LfrModel:
    """Close the controller loop while keeping the delta loop open.

    Returns an LfrModel with the same uncertainty structure and channel
    tables but no controller ports.  Instantiating the result at a
    sample gives the same closed loop (up to state coordinates) as
    closing the controller after instantiation; the two loop closures
    commute because they act on disjoint port groups.
    """
    nd = model.delta.total_dim
    M = model.M
    in_perm = (
        list(range(nd, nd + model.n_ctrl))
        + list(range(nd))
        + list(range(nd + model.n_ctrl, M.ninputs))
    )
    out_perm = (
        list(range(nd, nd + model.n_meas))
        + list(range(nd))
        + list(range(nd + model.n_meas, M.noutputs))
    )
    permuted = StateSpace(M.A, M.B[:, in_perm], M.C[out_perm, :], M.D[np.ix_(out_perm, in_perm)])
    closed, _ = _close(permuted, template, np.asarray(k, dtype=float), False)
    return LfrModel(
        M=closed,
        delta=model.delta,
        n_meas=0,
        n_ctrl=0,
        w_channels=dict(model.w_channels),
        z_channels=dict(model.z_channels),
    )


def extract_channel(
    closed: StateSpace,
    model: LfrModel,
    w_name: str,
    z_name: str,
    weight: StateSpace = None,
) -> StateSpace:
    """Select a named w -> z channel of the closed loop, optionally weighted.

    ``closed`` must map the model's full w block to its full z block
    (i.e. both loops already closed).  ``weight`` is connected in series
    on the output side.
    """
    try:
        ws, ww = model.w_channels[w_name]
    except KeyError:
        raise SpecError("w_channel", f"unknown input channel {w_name!r}")
    try:
        zs, zw = model.z_channels[z_name]
    except KeyError:
        raise SpecError("z_channel", f"unknown output channel {z_name!r}")
    if closed.ninputs != model.n_w or closed.noutputs != model.n_z:
        raise CvarSynthError(
            "dim_mismatch",
            f"closed loop is {closed.noutputs}x{closed.ninputs}, model channels expect "
            f"{model.n_z}x{model.n_w}",
        )
    chan = StateSpace(
        closed.A,
        closed.B[:, ws : ws + ww],
        closed.C[zs : zs + zw, :],
        closed.D[zs : zs + zw, ws : ws + ww],
    )
    if weight is not None:
        chan = connect_series(chan, weight)
    return chan


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

_FORMAT_TAG = "cvarsynth-lfr-v1"


def _mat_list(path, raw, dtype=float):
    try:
        arr = np.asarray(raw, dtype=dtype)
    except (TypeError, ValueError):
        raise SpecError(path, "not a rectangular numeric matrix")
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != 2:
        raise SpecError(path, f"expected a matrix (list of equal-length rows), got ndim={arr.ndim}")
    return arr


def _block_to_dict(blk: ControllerBlock) -> dict:
    return {
        "inputs": list(blk.inputs),
        "outputs": list(blk.outputs),
        "order": blk.order,
        "base": {k: getattr(blk, f"base_{k}").tolist() for k in ("a", "b", "c", "d")},
        "free": {k: getattr(blk, f"free_{k}").tolist() for k in ("a", "b", "c", "d")},
    }


def _block_from_dict(path, d: dict) -> ControllerBlock:
    try:
        return ControllerBlock(
            inputs=tuple(d["inputs"]),
            outputs=tuple(d["outputs"]),
            order=int(d["order"]),
            **{f"base_{k}": d["base"][k] for k in ("a", "b", "c", "d")},
            **{f"free_{k}": d["free"][k] for k in ("a", "b", "c", "d")},
        )
    except KeyError as exc:
        raise SpecError(path, f"missing field {exc.args[0]!r}")


def model_to_dict(model: LfrModel, template: ControllerTemplate = None) -> dict:
    doc = {
        "format": _FORMAT_TAG,
        "state_space": {
            "A": model.M.A.tolist(),
            "B": model.M.B.tolist(),
            "C": model.M.C.tolist(),
            "D": model.M.D.tolist(),
        },
        "delta_blocks": [
            {"name": name, "repetitions": reps} for name, reps in model.delta.blocks
        ],
        "n_meas": model.n_meas,
        "n_ctrl": model.n_ctrl,
        "w_channels": {k: list(v) for k, v in model.w_channels.items()},
        "z_channels": {k: list(v) for k, v in model.z_channels.items()},
    }
    if template is not None:
        doc["controller_template"] = {
            "n_meas": template.n_meas,
            "n_ctrl": template.n_ctrl,
            "blocks": [_block_to_dict(b) for b in template.blocks],
        }
    return doc


def model_from_dict(doc: dict):
    if doc.get("format") != _FORMAT_TAG:
        raise SpecError("format", f"expected {_FORMAT_TAG!r}, got {doc.get('format')!r}")
    try:
        ss = doc["state_space"]
        M = StateSpace(
            _mat_list("state_space.A", ss["A"]),
            _mat_list("state_space.B", ss["B"]),
            _mat_list("state_space.C", ss["C"]),
            _mat_list("state_space.D", ss["D"]),
        )
        delta = DeltaStructure(
            tuple((b["name"], b["repetitions"]) for b in doc["delta_blocks"])
        )
        model = LfrModel(
            M=M,
            delta=delta,
            n_meas=int(doc["n_meas"]),
            n_ctrl=int(doc["n_ctrl"]),
            w_channels={k: tuple(v) for k, v in doc["w_channels"].items()},
            z_channels={k: tuple(v) for k, v in doc["z_channels"].items()},
        )
    except KeyError as exc:
        raise SpecError("model", f"missing field {exc.args[0]!r}")
    template = None
    if "controller_template" in doc:
        tp = doc["controller_template"]
        try:
            template = ControllerTemplate(
                n_meas=int(tp["n_meas"]),
                n_ctrl=int(tp["n_ctrl"]),
                blocks=tuple(
                    _block_from_dict(f"controller_template.blocks[{i}]", b)
                    for i, b in enumerate(tp["blocks"])
                ),
            )
        except KeyError as exc:
            raise SpecError("controller_template", f"missing field {exc.args[0]!r}")
    return model, template


def save_model(path, model: LfrModel, template: ControllerTemplate = None):
    """Write the model (and optional template) as JSON.

    Floats are serialized with shortest round-trip decimal representation
    (up to 17 significant digits), so load(save(m)) is bit-exact.
    """
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, template), fh, indent=1)
        fh.write("\n")


def load_model(path):
    """Read a model file; returns ``(LfrModel, ControllerTemplate or None)``."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecError("model_file", f"invalid JSON: {exc}")
    return model_from_dict(doc)
