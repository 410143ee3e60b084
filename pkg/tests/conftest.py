import numpy as np
import pytest

from cvarsynth.lfr import (
    ControllerBlock,
    ControllerTemplate,
    DeltaStructure,
    LfrModel,
)
from cvarsynth.ltisys import StateSpace


def build_oscillator():
    """Force-driven oscillator with uncertain stiffness (affine delta).

    x'' = -(1 + 0.3 d) x - 0.4 x' + u + w, y measures x.
    Ports: in [delta, u, w], out [delta, y, z_y, z_u].
    Controller template: one first-order SISO block, all entries free.
    """
    A = np.array([[0.0, 1.0], [-1.0, -0.4]])
    B = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    C = np.array([
        [-0.3, 0.0],
        [1.0, 0.0],
        [1.0, 0.0],
        [0.0, 0.0],
    ])
    D = np.zeros((4, 3))
    D[3, 1] = 1.0
    model = LfrModel(
        M=StateSpace(A, B, C, D),
        delta=DeltaStructure((("stiff", 1),)),
        n_meas=1,
        n_ctrl=1,
        w_channels={"w": (0, 1)},
        z_channels={"y": (0, 1), "u": (1, 1)},
    )
    blk = ControllerBlock(inputs=(0,), outputs=(0,), order=1)
    tmpl = ControllerTemplate(n_meas=1, n_ctrl=1, blocks=(blk,))
    k0 = np.array([-1.0, 1.0, 0.5, 0.3])
    return model, tmpl, k0


@pytest.fixture
def oscillator():
    return build_oscillator()
