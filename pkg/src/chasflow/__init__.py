"""chasflow: steady Poiseuille-Couette channel flow at small viscosity.

Builds the multi-scale approximation (Euler correctors plus weak two-scale
boundary-layer correctors), solves the linearized and full steady
Navier-Stokes remainder systems through a stream-function biharmonic
formulation, and verifies the proven eps-convergence rates at desk scale.
"""

__version__ = "0.1.0"
