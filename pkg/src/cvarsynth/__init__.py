"""Stochastic robust controller synthesis over sampled parametric uncertainty.

The package minimizes the conditional value at risk (CVaR) of H2/Hinf
loss functions of an uncertain closed loop, with a deterministic
scenario min-max baseline and a Monte-Carlo certification pipeline.
"""

from .errors import CvarSynthError, SpecError
from .ltisys import (
    StateSpace,
    Spectrum,
    HinfResult,
    spectral_abscissa,
    solve_lyapunov,
    h2_norm,
    hinf_norm,
    freq_response,
    connect_series,
)

__version__ = "0.1.0"
