"""Unit conventions and the prefactor constants used across the pipeline.

Everything runs in natural units: hbar = e = 1, energies in eV, lengths in
Angstrom.  A current of 1 in these units is one electron charge per
(hbar/eV); spectral functions integrate against ``dE / (2 pi)``.

All 2-pi bookkeeping of the energy convolutions and of the observable
integrals lives here so that a convention change touches exactly one file.
"""

from __future__ import annotations

import math

#: Default thermal broadening k_B * T at room temperature, in eV.
KT_DEFAULT = 0.02585

#: Spin degeneracy folded into the current/density prefactors.  The bond
#: current and the Landauer reference integral must share this factor; it is
#: kept at 1 (per-spin observables) so both read 1/(2 pi) in natural units.
SPIN_DEGENERACY = 1

#: Polarization bubble prefactor: P(E) = C_POLARIZATION * sum_E' G(E') G(E'-E) dE.
C_POLARIZATION = -1j / (2.0 * math.pi)

#: Self-energy convolution prefactor: Sigma(E) = C_SIGMA * sum_E' G(E-E') W(E') dE.
C_SIGMA = 1j / (2.0 * math.pi)

#: Observable integrals: density and current carry C_OBSERVABLE * dE per
#: energy sample (spin degeneracy included).
C_OBSERVABLE = SPIN_DEGENERACY / (2.0 * math.pi)
