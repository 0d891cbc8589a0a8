"""Named, independent RNG substreams derived from a single experiment seed.

Every stochastic component (weight init, message sampling, exploration noise,
channel noise, feedback bit flips, evaluation) draws from its own substream so
that changing the consumption pattern of one component never perturbs the
others, and any run is exactly reproducible from (seed, stream id).
"""

import numpy as np

# Stream identifiers. Fixed small integers, never reordered: they are part of
# the reproducibility contract.
INIT_TX = 0
INIT_RX = 1
MESSAGES = 2
EXPLORATION = 3
CHANNEL = 4
FEEDBACK_BSC = 5
EVALUATION = 6
VERIFY = 7
SWEEP_EVAL = 8


def substream(seed, *key):
    """Return a Generator for the substream addressed by integer path `key`.

    Substreams with different keys are statistically independent; the same
    (seed, key) always yields the same stream.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))
