"""Implicit transfer operator surrogates trained by conditional flow matching.

Subpackages and modules follow the pipeline order: :mod:`systems` (potentials
and Langevin reference data), :mod:`data`, :mod:`conditioning`, :mod:`model`,
:mod:`training`, :mod:`sampling`, :mod:`analysis` and the :mod:`cli`.
"""

__version__ = "0.1.0"
