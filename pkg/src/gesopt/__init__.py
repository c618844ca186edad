"""Cost-optimal operation of a dual-storage residential heating system.

The package models a heating installation with an internal buffer store (IES)
and a large geothermal store (GES), reduces the distributed GES model to a
low-order linear system, builds an exact-transition Markov decision process on
top of it and solves for the cost-optimal operating policy by backward
induction.  See README.md for the pipeline walk-through and the ``gesopt``
command line entry point.
"""

__version__ = "0.1.0"
