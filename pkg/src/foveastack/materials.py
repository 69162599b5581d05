"""Glass dispersion via the Sellmeier equation.

Coefficients from the published Schott catalog. Wavelengths in nm,
valid over the visible band used by the simulator.
"""

from __future__ import annotations

import math

from .errors import MaterialError

# (B1, B2, B3), (C1, C2, C3) with C in um^2
SELLMEIER = {
    "N-BK7": ((1.03961212, 0.231792344, 1.01046945),
              (0.00600069867, 0.0200179144, 103.560653)),
    "N-BAF10": ((1.5851495, 0.143559385, 1.08521269),
                (0.00926681282, 0.0424489805, 105.613573)),
    "SF10": ((1.62153902, 0.256287842, 1.64447552),
             (0.0122241457, 0.0595736775, 147.468793)),
}

CONSTANT_INDEX = {"air": 1.0, "vacuum": 1.0}

WAVELENGTH_RANGE_NM = (400.0, 750.0)


def refractive_index(material: str, wavelength_nm: float) -> float:
    """Refractive index at the given wavelength."""
    if material in CONSTANT_INDEX:
        return CONSTANT_INDEX[material]
    if material not in SELLMEIER:
        raise MaterialError(f"unknown material {material!r}")
    lo, hi = WAVELENGTH_RANGE_NM
    if not lo <= wavelength_nm <= hi:
        raise MaterialError(
            f"wavelength {wavelength_nm} nm outside catalog range [{lo}, {hi}]"
        )
    B, C = SELLMEIER[material]
    l2 = (wavelength_nm * 1e-3) ** 2
    n2 = 1.0 + sum(b * l2 / (l2 - c) for b, c in zip(B, C))
    return math.sqrt(n2)
