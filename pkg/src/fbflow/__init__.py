"""Harmonic map heat flow on a half-disk with free boundary on a submanifold.

The package is split by concern:

* :mod:`fbflow.geometry` -- targets, free-boundary pairs and the reflection calculus
* :mod:`fbflow.grid` -- half-disk lattices, fields, gradients and quadrature
* :mod:`fbflow.flow` -- projected explicit time stepping and energy bookkeeping
* :mod:`fbflow.reflect` -- extension across the flat boundary and its potentials
* :mod:`fbflow.analyze` -- concentration, scale selection, necks, Pohozaev checks
* :mod:`fbflow.synth` -- exact solutions and planted bubbling families
* :mod:`fbflow.persist` -- snapshot and report files
* :mod:`fbflow.cli` -- experiment runner
"""

__version__ = "0.1.0"
