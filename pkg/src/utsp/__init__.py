"""Unsupervised learning for the travelling salesman problem.

Submodules: ``instances`` (data, oracles, baselines), ``subtour`` (violation
detection), ``loss``, ``diffcore`` (autodiff engine), ``gnn`` and ``solver``.
"""

__version__ = "0.1.0"
