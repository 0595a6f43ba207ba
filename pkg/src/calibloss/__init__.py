"""Stereo camera calibration with geometric-constraint losses.

Modules:

* :mod:`calibloss.diff`: scalar reverse-mode differentiation
* :mod:`calibloss.geometry`: pinhole model, constraints, stereo reconstruction
* :mod:`calibloss.loss`: set, per-parameter and constraint losses
* :mod:`calibloss.datagen`: synthetic samples and the dataset file format
* :mod:`calibloss.solver`: per-sample solver and the correspondence regressor
* :mod:`calibloss.evaluation`: MAE tables, ablation ladder, recovery experiment
* :mod:`calibloss.gradcheck`: finite-difference gradient verification
* :mod:`calibloss.cli`: command-line interface
"""

__version__ = "0.1.0"
