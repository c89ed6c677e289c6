"""
Checking gradients against finite differences
=============================================

Every differentiable op is compared with central differences, then the
whole model loss on a tiny configuration. The model check takes under a
minute on one core.
"""

import sys
import time

import numpy as np

from seqpan import gradcheck

rng = np.random.default_rng(0)
errors = gradcheck.primitive_errors(rng)
for name, err in sorted(errors.items(), key=lambda kv: -kv[1]):
    print(f"{name:<22} {err:.2e}")

# the full loss, frozen Gumbel noise, dropout off, float64 model
# checked against an extended-precision copy of itself
if "--skip-model" not in sys.argv:
    t = time.perf_counter()
    err = gradcheck.model_error(seed=0)
    print(f"\nfull model            {err:.2e}   ({time.perf_counter() - t:.0f}s, {gradcheck.TINY})")
