"""Numerical laboratory for a doubly blown-up scattering calculus.

The package is organised by layer:

* :mod:`bbcalc.geometry` -- cotangent coordinates, blow-up defining functions
  and lifted vector fields.
* :mod:`bbcalc.symbols` -- four-index symbol orders, weights, inclusions,
  empirical order fits and ellipticity checks.
* :mod:`bbcalc.quantize` -- dense kernel matrices for symbols on grids,
  left reduction, adjoints, compositions, parametrices.
* :mod:`bbcalc.dynamics` -- Hamiltonian flows, foliation charts, ray bundles
  and the conjugated normal operator kernel.
* :mod:`bbcalc.normalop` -- numeric symbols of the normal operator and the
  predicted expansion coefficients.
* :mod:`bbcalc.recover` -- the local recovery scheme and contraction estimates.
* :mod:`bbcalc.runner` -- configuration, CLI and artifact emission.
"""

__version__ = "0.1.0"
