"""Neural-symbolic energy-based models over deep hinge-loss Markov random fields.

The package grounds weighted first-order logical/arithmetic rules into deep
hinge-loss MRFs, performs MAP inference by solving a regularized
linearly-constrained quadratic program in the dual, and learns symbolic
weights together with a built-in neural component end to end.

Modules
-------
lang       rule language + data map parsing, validation, canonical printing
grounding  instantiation of rule templates into potentials and constraints
energy     energy evaluation, ranking, detection
lcqp       LCQP assembly and the certified dual coordinate-descent solver
gradients  value-function gradients and finite-difference checking
neural     small MLP, AdamW, supervised losses, checkpoints
learning   training-data model, losses, four learning algorithms
tasks      deterministic desk-scale task generators and metrics
oracle     independent brute-force/analytic oracles used by the check suite
cli        command-line entry point (``nsebm``)
"""

__version__ = "0.1.0"

from . import lang, grounding, energy, lcqp, gradients, neural, learning, tasks, oracle

__all__ = [
    "lang",
    "grounding",
    "energy",
    "lcqp",
    "gradients",
    "neural",
    "learning",
    "tasks",
    "oracle",
    "__version__",
]
