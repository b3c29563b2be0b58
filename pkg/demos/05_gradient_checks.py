"""
Checking every backward pass
============================

Each layer's analytic gradient is compared with central differences at
float64, one line per case. The composite encoder is checked in train and
eval mode, with and without a spatial module.
"""
from nice_eeg.gradcheck import run_suite

reports, seconds = run_suite(n_points=10, seed=0)
for r in reports:
    print(r)
print(f"{sum(r.passed for r in reports)}/{len(reports)} passed in {seconds:.2f}s")
