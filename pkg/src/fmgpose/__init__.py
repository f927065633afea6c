"""fmgpose: force-myography arm pose estimation toolkit.

Synthetic kinematic/sensor oracle, sliding-window datasets, a tape-based
autodiff engine with four sequence regressors, two-phase training, sensor
importance analysis, and a real-time collision gate for a simulated robot.
"""

__version__ = "0.1.0"
