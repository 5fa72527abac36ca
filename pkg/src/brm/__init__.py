"""Bellman residual minimization as a saddle problem, solved by minibatch SGDA.

Modules: ``mdp`` (tabular MDPs, soft Bellman operator, offline data),
``objective`` (per-sample saddle objective and exact population oracles),
``sgda`` (the optimizer), ``stability`` and ``lemmas`` (stability experiments,
bounds and inequality checkers), ``io`` and ``cli`` (artifacts and the ``brm``
command).
"""
from .mdp import TabularMdp, TransitionDataset, generate_dataset, preset_mdp, random_mdp, solve_soft_optimal
from .objective import ParamPoint, Parameterization, for_mdp, full_batch, phi_eval
from .sgda import SgdaRunConfig, run_sgda
from .stability import estimate_constants, estimate_eps_T, solve_saddle

__version__ = "0.1.0"
