"""Street-level black carbon estimation from roadside traffic observations.

The pipeline turns a session's raw inputs (microaethalometer CSV, vehicle
detection logs or frames, weather and traffic feeds) into a denoised,
time-aligned feature table, fits boosted-tree regressors against the BC
target, and attributes predictions back to features with exact Shapley
values.
"""

__version__ = "0.1.0"
