"""
System norms and their design gradients
========================================

The building blocks of everything else in this package: H2 and H-infinity
norms of state-space systems, and exact gradients of those norms with
respect to the free parameters of a structured controller.

Run:  python3 demos/norms_and_gradients.py
"""

import numpy as np

from cvarsynth.lfr import (
    ControllerBlock,
    ControllerTemplate,
    DeltaStructure,
    LfrModel,
)
from cvarsynth.losses import LossSpec, eval_loss, finite_diff_check
from cvarsynth.ltisys import StateSpace, h2_norm, hinf_norm

# ---------------------------------------------------------------------
# Norms against closed forms
# ---------------------------------------------------------------------
# A first-order lag 1/(s+a) has H2 norm 1/sqrt(2a): the impulse response
# is exp(-a t) and the norm integrates its square.

for a in (0.2, 1.0, 5.0):
    sys = StateSpace([[-a]], [[1.0]], [[1.0]], [[0.0]])
    print(f"1/(s+{a}):  h2 = {h2_norm(sys):.10f}   closed form = "
          f"{1.0 / np.sqrt(2.0 * a):.10f}")

# A lightly damped oscillator peaks near its natural frequency; the peak
# gain has the textbook closed form 1/(2 zeta sqrt(1 - zeta^2)).

for zeta in (0.05, 0.2, 0.5):
    sys = StateSpace([[0.0, 1.0], [-1.0, -2.0 * zeta]], [[0.0], [1.0]],
                     [[1.0, 0.0]], [[0.0]])
    res = hinf_norm(sys)
    want = 1.0 / (2.0 * zeta * np.sqrt(1.0 - zeta ** 2))
    print(f"zeta={zeta}:  hinf = {res.value:.8f}  (closed form {want:.8f}), "
          f"peak at {res.peak_freqs[0]:.4f} rad/s")

# ---------------------------------------------------------------------
# A closed loop with a structured controller
# ---------------------------------------------------------------------
# Uncertain oscillator: x'' = -(1 + 0.3 d) x - 0.4 x' + u + w.  The
# model is a linear fractional representation: the uncertain parameter
# d and the controller K both close feedback loops around a fixed
# coefficient system M with port order [delta | u | w] -> [delta | y | z].

A = np.array([[0.0, 1.0], [-1.0, -0.4]])
B = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
C = np.array([[-0.3, 0.0], [1.0, 0.0], [1.0, 0.0]])
model = LfrModel(
    M=StateSpace(A, B, C, np.zeros((3, 3))),
    delta=DeltaStructure((("stiff", 1),)),
    n_meas=1,
    n_ctrl=1,
    w_channels={"w": (0, 1)},
    z_channels={"y": (0, 1)},
)

# One first-order SISO controller block, every entry free: 4 parameters.
template = ControllerTemplate(
    n_meas=1, n_ctrl=1,
    blocks=(ControllerBlock(inputs=(0,), outputs=(0,), order=1),))
k = np.array([-1.0, 1.0, 0.5, 0.3])
print(f"\ncontroller template has dim_k = {template.dim_k} free parameters")

# The squared H2 loss of the w -> y channel at one uncertainty sample,
# with its gradient through the controller closure.
spec = LossSpec("h2_squared", "w", "y")
lv = eval_loss(model, template, k, [0.25], spec, with_grad=True)
print(f"loss at delta=0.25: {lv.value:.6f}, stable={lv.stable}")
print("gradient dL/dk:", np.array2string(lv.grad, precision=5))

# Audit the analytic gradient against central finite differences.
rep = finite_diff_check(
    lambda kk: eval_loss(model, template, kk, [0.25], spec).value,
    k, lv.grad, n_directions=6, step=1e-6, seed=0)
print(f"finite-difference audit: max relative error {rep.max_rel_error:.2e}")
