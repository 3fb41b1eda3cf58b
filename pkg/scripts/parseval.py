"""Round-trip, Parseval and naive-DFT checks for both FFT backends."""

import sys

from mmlego.experiments import spectral_checks
from mmlego.fft import backend

failed = 0
for name in ("numpy", "native"):
    with backend(name):
        for r in spectral_checks():
            failed += not r["passed"]
            print(f"{name:<7}{r['size']:>8}  {r['check']:<20}{r['value']:>11.2e}  "
                  f"< {r['tol']:.0e}  {'ok' if r['passed'] else 'FAIL'}")
sys.exit(1 if failed else 0)
