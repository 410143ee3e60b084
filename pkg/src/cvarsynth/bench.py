"""Single-axis flexible-spacecraft benchmark.

A rigid body with two lightly damped appendage modes, an actuator lag,
and six uncertain parameters entering the state matrices affinely:

    theta'   = omega
    omega'   = (1 + j_u d_J) T / J0
    eta_i''  = -w_i^2 (1 + 2 f_u d_wi) eta_i
               - 2 z_i w_i (1 + z_u d_zi) eta_i'
               + c_i (1 + c_u d_or) T
    T'       = (u + s - T) / t_a

The sensed attitude is theta + sum kappa_i eta_i (modal superposition)
and the rate gyro sees its derivative.  d_J, d_wi, d_zi are Gaussian
with mean 0 and sd 1/3; d_or (an orientation-like parameter scaling how
strongly the torque excites both appendage modes) is uniform on [-1, 1]
and is repeated across both modes in the uncertainty block.

The inertia and frequency perturbations act on the torque-effectiveness
and stiffness entries, i.e. on 1/J and w^2 to first order, which keeps
every instantiated matrix exactly affine in each parameter (a property
the tests pin down); the quoted fractions are the resulting relative
coefficient changes at d = 1 (the 3-sigma point).

Three requirements at beta = 0.95:

  1. soft  "effort":   squared H2 of noise -> actuator command, weight 1/200
  2. hard  "margin":   H-infinity of input disturbance -> command, weight 1/2
                       (bound 1 means modulus margin >= 0.5)
  3. hard  "tracking": H-infinity of reference -> tracking error behind the
                       bandwidth filter 0.5*(10s+1)/(10s+0.01), bound 1

The default scenario constraint rejects jointly extreme first-mode
perturbations: d_w1^2 + d_z1^2 <= 1.5^2.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import SpecError
from .lfr import (
    ControllerBlock,
    ControllerTemplate,
    DeltaStructure,
    LfrModel,
    close_controller,
    instantiate_delta,
)
from .losses import LossSpec
from .ltisys import StateSpace, spectral_abscissa
from .sampling import Constraint, DistributionSpec, ParamDist
from .synth import ProblemSpec, Requirement, ScenarioConfig

__all__ = ["BenchConfig", "build_benchmark", "build_model", "reference_controller"]


@dataclasses.dataclass(frozen=True)
class BenchConfig:
    """Physical constants and uncertainty fractions of the benchmark."""

    n_flex_modes: int = 2
    inertia: float = 2000.0
    mode_freqs: tuple = (0.5, 2.0)
    dampings: tuple = (0.02, 0.012)
    couplings: tuple = (3.0e-4, 1.5e-4)
    sensor_gains: tuple = (0.5, 0.2)
    actuator_tc: float = 1.0
    bandwidth: float = 0.1
    # relative coefficient change at the 3-sigma point d = 1
    inertia_spread: float = 0.3
    freq_spread: float = 0.2
    damping_spread: float = 0.5
    coupling_spread: float = 0.4
    seed: int = 20240
    schedule: tuple = (100, 500, 2500)
    beta: float = 0.95

    def __post_init__(self):
        n = int(self.n_flex_modes)
        if n < 1:
            raise SpecError("bench.n_flex_modes", f"need at least one mode, got {n}")
        for name in ("mode_freqs", "dampings", "couplings", "sensor_gains"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != n:
                raise SpecError(f"bench.{name}", f"need {n} entries, got {len(vals)}")
            if any(v <= 0.0 for v in vals):
                raise SpecError(f"bench.{name}", "entries must be positive")
            object.__setattr__(self, name, vals)
        if self.inertia <= 0.0 or self.actuator_tc <= 0.0 or self.bandwidth <= 0.0:
            raise SpecError("bench", "inertia, actuator_tc and bandwidth must be positive")
        # every physical coefficient must stay positive out to 3 sigma
        for name in ("inertia_spread", "freq_spread", "damping_spread", "coupling_spread"):
            v = float(getattr(self, name))
            if not 0.0 <= v < 1.0:
                raise SpecError(
                    f"bench.{name}",
                    f"fraction {v} would allow nonpositive physical values at 3 sigma",
                )
        object.__setattr__(self, "schedule", tuple(int(s) for s in self.schedule))


def build_model(cfg: BenchConfig = BenchConfig()) -> LfrModel:
    """Assemble the uncertain plant in LFR form.

    Ports: inputs [delta | u | n, s, r], outputs [delta | y_ang, y_rate |
    z_u, z_e].  The measured angle is theta_m = theta + sum kappa_i eta_i
    and the angle channel closes the tracking loop (y_ang = theta_m - r);
    the rate gyro carries the measurement noise (y_rate = omega_m + n),
    z_u is the total actuator command u + s, and z_e is the tracking
    error r - theta_m.
    """
    n = cfg.n_flex_modes
    ns = 2 + 2 * n + 1          # theta, omega, (eta_i, eta_i') ..., T
    i_T = ns - 1
    nd = 1 + 2 * n + n          # iner + (w_i, z_i) per mode + ori repeated n times

    A = np.zeros((ns, ns))
    A[0, 1] = 1.0
    A[1, i_T] = 1.0 / cfg.inertia
    for i in range(n):
        r = 2 + 2 * i
        w, z, c = cfg.mode_freqs[i], cfg.dampings[i], cfg.couplings[i]
        A[r, r + 1] = 1.0
        A[r + 1, r] = -w * w
        A[r + 1, r + 1] = -2.0 * z * w
        A[r + 1, i_T] = c
    A[i_T, i_T] = -1.0 / cfg.actuator_tc

    # delta channels: input j of B_d injects delta_j * (C_d row j @ x)
    Bd = np.zeros((ns, nd))
    Cd = np.zeros((nd, ns))
    Bd[1, 0] = cfg.inertia_spread / cfg.inertia
    Cd[0, i_T] = 1.0
    for i in range(n):
        r = 2 + 2 * i
        w, z, c = cfg.mode_freqs[i], cfg.dampings[i], cfg.couplings[i]
        jw, jz = 1 + 2 * i, 2 + 2 * i
        Bd[r + 1, jw] = -2.0 * cfg.freq_spread * w * w
        Cd[jw, r] = 1.0
        Bd[r + 1, jz] = -2.0 * cfg.damping_spread * z * w
        Cd[jz, r + 1] = 1.0
        jo = 1 + 2 * n + i
        Bd[r + 1, jo] = cfg.coupling_spread * c
        Cd[jo, i_T] = 1.0

    # exogenous and control inputs: u, n, s, r
    Bu = np.zeros((ns, 4))
    Bu[i_T, 0] = 1.0 / cfg.actuator_tc      # u
    Bu[i_T, 2] = 1.0 / cfg.actuator_tc      # s
    B = np.hstack([Bd, Bu])

    # outputs: measured angle theta_m (+n-r), rate, z_u = u+s, z_e = r-theta_m
    theta_m = np.zeros(ns)
    rate_m = np.zeros(ns)
    theta_m[0] = 1.0
    rate_m[1] = 1.0
    for i in range(n):
        r = 2 + 2 * i
        theta_m[r] = cfg.sensor_gains[i]
        rate_m[r + 1] = cfg.sensor_gains[i]
    Cy = np.vstack([theta_m, rate_m])
    Cz = np.vstack([np.zeros(ns), -theta_m])
    C = np.vstack([Cd, Cy, Cz])

    D = np.zeros((nd + 4, nd + 4))
    col_u, col_n, col_s, col_r = nd, nd + 1, nd + 2, nd + 3
    D[nd + 0, col_r] = -1.0      # angle channel tracks the reference
    D[nd + 1, col_n] = 1.0       # rate gyro carries the noise
    D[nd + 2, col_u] = 1.0       # z_u = u + s
    D[nd + 2, col_s] = 1.0
    D[nd + 3, col_r] = 1.0       # z_e = r - theta_m

    blocks = [("iner", 1)]
    for i in range(n):
        blocks += [(f"w{i + 1}", 1), (f"z{i + 1}", 1)]
    blocks.append(("ori", n))

    return LfrModel(
        M=StateSpace(A, B, C, D),
        delta=DeltaStructure(tuple(blocks)),
        n_meas=2,
        n_ctrl=1,
        w_channels={"n": (0, 1), "s": (1, 1), "r": (2, 1)},
        z_channels={"u": (0, 1), "e": (1, 1)},
    )


def build_template() -> ControllerTemplate:
    """Strictly proper 4th-order two-input one-output controller."""
    blk = ControllerBlock(inputs=(0, 1), outputs=(0,), order=4,
                          free_d=np.zeros((1, 2), dtype=bool))
    return ControllerTemplate(n_meas=2, n_ctrl=1, blocks=(blk,))


def reference_controller(cfg: BenchConfig = BenchConfig()) -> np.ndarray:
    """Filtered-PD starting point lifted into the 4th-order template.

    The PD gains place the rigid-body bandwidth at ``cfg.bandwidth`` with
    damping 0.7; a first-order filter at 1 rad/s rolls the gains off
    above the loop and gain-stabilizes the appendage modes.  Three extra
    controller states start as decoupled stable relaxations so the
    optimizer has somewhere to grow dynamics.  The loop gain is split
    evenly between B and C (input gains over sqrt(kd), output gain
    sqrt(kd)) to keep the closed-loop realization well scaled.  The
    construction is verified to leave the nominal closed loop stable
    with abscissa margin 0.01.
    """
    kp = cfg.inertia * cfg.bandwidth ** 2
    kd = 2.0 * 0.7 * cfg.inertia * cfg.bandwidth
    g = math.sqrt(kd)
    a_k = np.diag([-1.0, -2.0, -3.0, -4.0])
    b_k = np.zeros((4, 2))
    b_k[0] = (kp / g, kd / g)
    c_k = np.array([[g, 0.0, 0.0, 0.0]])
    k0 = np.concatenate([a_k.ravel(), b_k.ravel(), c_k.ravel()])

    nominal = instantiate_delta(build_model(cfg), np.zeros(2 + 2 * cfg.n_flex_modes))
    closed = close_controller(nominal, build_template(), k0)
    margin = spectral_abscissa(closed).abscissa
    if margin > -0.01:
        raise SpecError("bench", f"reference controller margin {margin:.4f} too small")
    return k0


_W3 = StateSpace([[-0.001]], [[1.0]], [[0.0495]], [[0.5]])


def _static(gain: float) -> StateSpace:
    return StateSpace(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)),
                      [[gain]])


def build_benchmark(cfg: BenchConfig = BenchConfig()):
    """Model, template, and the full three-requirement problem."""
    model = build_model(cfg)
    template = build_template()
    nparams = 1 + 2 * cfg.n_flex_modes + 1
    params = [ParamDist("iner", "gaussian", sd=1.0 / 3.0)]
    for i in range(cfg.n_flex_modes):
        params.append(ParamDist(f"w{i + 1}", "gaussian", sd=1.0 / 3.0))
        params.append(ParamDist(f"z{i + 1}", "gaussian", sd=1.0 / 3.0))
    params.append(ParamDist("ori", "uniform", lo=-1.0, hi=1.0))
    weights = np.zeros(nparams)
    weights[1] = 1.0    # d_w1
    weights[2] = 1.0    # d_z1
    constraint = Constraint.quadratic(weights, offset=-2.25)

    requirements = (
        Requirement("effort", LossSpec("h2_squared", "n", "u", weight=_static(1.0 / 200.0)),
                    "soft", beta=cfg.beta),
        Requirement("margin", LossSpec("hinf", "s", "u", weight=_static(0.5)),
                    "hard", bound=1.0, beta=cfg.beta),
        Requirement("tracking", LossSpec("hinf", "r", "e", weight=_W3),
                    "hard", bound=1.0, beta=cfg.beta),
    )
    problem = ProblemSpec(
        model=model,
        template=template,
        requirements=requirements,
        scenario=ScenarioConfig(
            dists=DistributionSpec(tuple(params)),
            constraint=constraint,
            seed=cfg.seed,
            schedule=cfg.schedule,
        ),
        k0=reference_controller(cfg),
    )
    return model, template, problem
