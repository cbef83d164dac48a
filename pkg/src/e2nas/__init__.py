"""Off-policy RL engine for generator-cell architecture search.

Core pieces: a discrete cell search space (`genotype`), an MDP environment
over it (`mdp_env`), a soft actor-critic agent (`sac_agent` on top of
`nn_core`), a replay buffer, a deterministic surrogate benchmark with an
exhaustive oracle (`surrogate_bench`), and a search orchestrator plus CLI.
External evaluators speak a line-delimited JSON protocol (`evaluator_iface`).
"""

__version__ = "0.1.0"
