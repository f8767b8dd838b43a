"""Random stable discrete-time LTI blocks with exact recursive filtering.

Blocks are all-pole filters (plus a constant numerator) specified by their
pole locations. Poles are drawn as conjugate pairs with uniform magnitude in
(0.5, 0.97) and uniform phase in (0, pi/2); odd orders add one positive real
pole. The numerator is the single constant sum(den), which normalizes the DC
gain to one. Filtering runs in transposed direct-form II through the compiled
core when available.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _core
from .errors import ConfigError, ValidationError

POLE_MAG_RANGE = (0.5, 0.97)
POLE_PHASE_RANGE = (0.0, np.pi / 2)


def poles_to_den(poles) -> np.ndarray:
    """Expand a conjugate-closed pole list into a monic real polynomial.

    Returns coefficients a_0..a_n with a_0 = 1, in order of increasing delay.
    Raises ValidationError if the expansion leaves imaginary residue >= 1e-10,
    which is how a non-conjugate-closed input manifests.
    """
    coeffs = np.array([1.0 + 0.0j])
    for p in poles:
        coeffs = np.convolve(coeffs, np.array([1.0, -complex(p)]))
    residue = np.abs(coeffs.imag).max() if len(poles) else 0.0
    if residue >= 1e-10:
        raise ValidationError(
            f"pole list is not conjugate-closed (imaginary residue {residue:.3e})"
        )
    return np.ascontiguousarray(coeffs.real)


@dataclass
class LtiBlock:
    """A stable all-pole filter with unit DC gain and a carried delay line.

    den holds a_0..a_n with a_0 = 1; num holds b_0..b_n (here only b_0 is
    nonzero). state is the transposed direct-form II delay line of length n,
    zero on construction and carried across filter calls unless reset.
    """

    order: int
    poles: np.ndarray
    den: np.ndarray
    num: np.ndarray
    state: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.state is None:
            self.state = np.zeros(self.order, dtype=np.float64)

    def reset(self) -> None:
        self.state[:] = 0.0

    def clone(self) -> "LtiBlock":
        return LtiBlock(
            order=self.order,
            poles=self.poles.copy(),
            den=self.den.copy(),
            num=self.num.copy(),
            state=self.state.copy(),
        )

    def filter(self, u, reset: bool = False) -> np.ndarray:
        """Run the difference equation y_k = sum b_j u_{k-j} - sum a_j y_{k-j}.

        State persists across calls unless reset is set.
        """
        u = np.ascontiguousarray(u, dtype=np.float64)
        if u.ndim != 1:
            raise ValidationError(f"filter input must be 1-D, got shape {u.shape}")
        bad = ~np.isfinite(u)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"filter input is non-finite at index {idx}")
        if reset:
            self.reset()
        return _core.iir_filter(self.num, self.den, u, self.state)

    def impulse_response(self, length: int) -> np.ndarray:
        """Impulse response from zero state; does not disturb carried state."""
        u = np.zeros(length, dtype=np.float64)
        u[0] = 1.0
        zi = np.zeros(self.order, dtype=np.float64)
        return _core.iir_filter(self.num, self.den, u, zi)


def sample_lti(
    rng: np.random.Generator,
    order_min: int = 1,
    order_max: int = 10,
    mag_range: tuple = POLE_MAG_RANGE,
    phase_range: tuple = POLE_PHASE_RANGE,
) -> LtiBlock:
    """Draw a random stable block.

    Order is uniform on [order_min, order_max]. Complex poles come in
    conjugate pairs (uniform magnitude and phase over the given ranges); an
    odd order adds one positive real pole. The numerator constant sum(den)
    gives unit DC gain.
    """
    if not 1 <= order_min <= order_max:
        raise ConfigError(f"invalid order bounds [{order_min}, {order_max}]")
    order = int(rng.integers(order_min, order_max + 1))
    poles = []
    for _ in range(order // 2):
        mag = rng.uniform(*mag_range)
        phase = rng.uniform(*phase_range)
        p = mag * np.exp(1j * phase)
        poles.extend([p, np.conj(p)])
    if order % 2:
        poles.append(complex(rng.uniform(*mag_range)))
    poles = np.array(poles, dtype=np.complex128)
    den = poles_to_den(poles)
    num = np.zeros(order + 1, dtype=np.float64)
    num[0] = den.sum()
    return LtiBlock(order=order, poles=poles, den=den, num=num)
