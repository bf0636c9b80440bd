"""Overlapping Schwarz domain decomposition with a pretrained neural
operator acting as the local solver for -div(a grad u) = 0.

Subpackage layout:

* ``grid``            uniform-grid fields, norms, spline projections
* ``microstructure``  piecewise-constant coefficient generators
* ``boundary``        random Dirichlet data and the kernel extension operator
* ``fd_solver``       finite-difference reference solver (training data + oracle)
* ``operator``        resolution-invariant U-shaped neural operator
* ``training``        dataset generation, loss, optimization loop
* ``schwarz``         overlapping decomposition and the iterative driver
* ``cli``             command-line entry points
"""

__version__ = "0.1.0"
