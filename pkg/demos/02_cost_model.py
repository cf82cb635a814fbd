"""
How much compute does adaptive routing save?
============================================

Expert compute scales with the number of expert calls. A step does not get
faster in proportion, because the slowest sequences hold everyone up. The
step-time model captures that with a single overhead parameter omega.
"""

import numpy as np

from adaptmoe.cost import REFERENCE_PAIRS, expert_flops, fit_omega, normalized_compute, step_time_model

print("FLOPs per expert call (hidden 64, intermediate 128):", expert_flops(64, 128))

# %%
# normalized compute against the fraction of single-expert tokens
for f in [1.0, 0.8, 0.5, 0.2, 0.0]:
    print(f"frac_top1={f:.1f}  compute={normalized_compute(f):.2f}")

# %%
# fit omega to the reference (compute, time) measurements
for form in ["straggler", "affine"]:
    fit = fit_omega(REFERENCE_PAIRS, form)
    print(f"\n{form}: omega={fit.omega:.4f}  max |residual|={fit.max_abs_residual:.4f}")
    for (c, t), pred in zip(REFERENCE_PAIRS, fit.predicted):
        print(f"  compute {c:.2f}  measured {t:.2f}  modeled {pred:.3f}")

# %%
# time never falls below compute
omega = fit_omega(REFERENCE_PAIRS).omega
fracs = np.linspace(0, 1, 11)
print("\nfrac_top1  compute  time")
for f in fracs:
    print(f"{f:9.1f}  {normalized_compute(f):7.3f}  {step_time_model(f, omega):.3f}")
