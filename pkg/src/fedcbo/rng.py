"""Deterministic random streams.

Every stochastic component draws from a counter-based Philox generator keyed
by (seed, domain, index).  Agents own disjoint streams, so the order in which
agents are processed never changes the numbers each agent sees; a parallel
and a serial sweep over agents produce identical results.
"""

import numpy as np

# Domain tags keep streams for unrelated purposes disjoint even when they
# share a seed and an index.
DATA = 0
INIT = 1
AGENT = 2
ROUND = 3
PROJECTION = 4
SERVER = 5


def stream(seed, domain, index=0):
    """Return a fresh Generator for (seed, domain, index)."""
    ss = np.random.SeedSequence(entropy=(int(seed), int(domain), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def agent_streams(seed, n_agents):
    """One independent stream per agent, keyed by agent id."""
    return [stream(seed, AGENT, i) for i in range(n_agents)]
