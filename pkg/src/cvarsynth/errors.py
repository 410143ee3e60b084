"""Structured errors raised by the toolkit.

Every error carries a short machine-readable ``code`` (stable across
releases, suitable for dispatch in drivers) and a human-readable message
with the offending quantities spelled out.
"""

from __future__ import annotations


class CvarSynthError(RuntimeError):
    """Base error with a stable diagnostic code.

    Parameters
    ----------
    code : str
        Short identifier, e.g. ``"lyapunov_unstable"`` or
        ``"delta_loop_singular"``.
    message : str
        Human-readable diagnostic.
    """

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


class SpecError(CvarSynthError):
    """Malformed user input (files, shapes, parameter ranges).

    ``field`` names the offending entry, e.g. ``"model.state_space.A"``.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__("bad_input", f"{field}: {message}")
