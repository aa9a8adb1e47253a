"""Layerwise random-graph Markov chain and the prior-moment estimator.

Vertices are the 2q labels (mu_1..mu_q, nu_1..nu_q); the edge multiset starts
as {(mu_p, nu_p)} and evolves backwards through the layers: each vertex gains
a self-loop with probability (|psi|/L) * degree, and with probability
(2/N) * C(|E|, 2) a uniformly chosen pair of edges is rewired. The estimator
averages sgn(psi)^{s0} c^{(0)} prod_e w_e over chain replicas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ProbabilityOverflow
from .seeding import block_generators, jackknife_mean_se


@dataclass
class GraphState:
    """Edge multiset, per-vertex loop counts, and the running c-accumulator."""

    vertex_data: tuple        # data index of each vertex; first q are mu, last q nu
    edges: list               # list of (i, j) vertex-index pairs, i <= j
    layer: int
    log_c: float = 0.0
    shuffled: int = 0         # number of shuffle events so far
    history: list = field(default_factory=list)

    @property
    def n_vertices(self):
        return len(self.vertex_data)

    @property
    def self_loops(self):
        counts = [0] * self.n_vertices
        for i, j in self.edges:
            if i == j:
                counts[i] += 1
        return counts

    @property
    def total_loops(self):
        return sum(1 for i, j in self.edges if i == j)

    def degree(self, v):
        deg = 0
        for i, j in self.edges:
            if i == j == v:
                deg += 2
            elif v in (i, j):
                deg += 1
        return deg


def initial_state(mubar, nubar, depth):
    """E^{(L)} = {(mu_p, nu_p)}: one edge per factor of the moment."""
    if len(mubar) != len(nubar):
        raise ValueError("index tuples must have equal length q")
    q = len(mubar)
    return GraphState(
        vertex_data=tuple(mubar) + tuple(nubar),
        edges=[(p, q + p) for p in range(q)],
        layer=depth,
    )


def step(state, config, rng, record=False):
    """One backward transition E^{(l+1)} -> E^{(l)}, mutating ``state``.

    Loop births use the actual vertex degree of E^{(l+1)}; the shuffle picks
    a uniform unordered pair from E^{(l+1)} (self-loops eligible) and rewires
    per one of the two non-trivial pairings with probability 1/2 each. The
    c-accumulator gains sigma^{2|E|} (1 + 2|psi||E|/L + (2/N) C(|E|,2)) in
    log space.
    """
    depth = config.depth
    psi = config.psi
    width = config.widths[min(state.layer, depth) - 1]
    edges = state.edges
    m = len(edges)

    state.log_c += m * math.log(config.sigma2) + math.log1p(
        2.0 * abs(psi) * m / depth + m * (m - 1) / width)

    # self-loop births, one Bernoulli per vertex, rates from E^{(l+1)}
    births = []
    ap = abs(psi)
    if ap > 0.0:
        for v in range(state.n_vertices):
            prob = ap / depth * state.degree(v)
            if prob > 1.0:
                raise ProbabilityOverflow(
                    f"self-loop probability {prob:.3f} > 1 at vertex {v}")
            if rng.random() < prob:
                births.append((v, v))

    # edge shuffle among the pre-birth edges
    p_shuffle = m * (m - 1) / width
    if p_shuffle > 1.0:
        raise ProbabilityOverflow(
            f"shuffle probability {p_shuffle:.3f} > 1 (|E| = {m}, N = {width})")
    did_shuffle = m >= 2 and rng.random() < p_shuffle
    if did_shuffle:
        i1 = int(rng.integers(m))
        i2 = int(rng.integers(m - 1))
        if i2 >= i1:
            i2 += 1
        a, b = edges[i1]
        c, d = edges[i2]
        if rng.random() < 0.5:
            new = [(min(a, c), max(a, c)), (min(b, d), max(b, d))]
        else:
            new = [(min(a, d), max(a, d)), (min(b, c), max(b, c))]
        for idx in sorted((i1, i2), reverse=True):
            edges.pop(idx)
        edges.extend(new)
        state.shuffled += 1

    edges.extend(births)
    state.layer -= 1
    if record:
        state.history.append((state.layer, len(edges), state.total_loops,
                              len(births), int(did_shuffle)))
    return state


def run_chain(mubar, nubar, config, rng, record=False):
    """Run the full chain from layer L down to 0 and return the final state."""
    state = initial_state(mubar, nubar, config.depth)
    while state.layer > 0:
        step(state, config, rng, record=record)
    return state


def _readout(state, overlap, config, include_sigma_edge_weight):
    scale = config.sigma2 if include_sigma_edge_weight else 1.0
    value = math.exp(state.log_c)
    if config.psi < 0.0 and state.total_loops % 2 == 1:
        value = -value
    data = state.vertex_data
    for i, j in state.edges:
        value *= scale * overlap[data[i], data[j]]
    return value


def estimate_moment(mubar, nubar, overlap, config, n_samples=10_000, seed=None,
                    include_sigma_edge_weight=True, record=False):
    """MC estimate (and jackknife SE) of the prior moment M_{mubar, nubar}.

    ``overlap`` holds pairwise raw inner products <x_a, x_b>/N0 including
    norms on the diagonal. ``include_sigma_edge_weight`` keeps the sigma^2
    factor each final edge carries in the moment representation; dropping it
    matches the sigma-free moment definition (the two differ by
    sigma^{2q} = 1 + O(1/L)).

    Unbiased up to the O(L/N^2) + O(1/L) error of the representation.
    Returns (estimate, se) or (estimate, se, histories) when ``record``.
    """
    overlap = np.asarray(overlap, dtype=float)
    if seed is None:
        seed = config.seed
    vals = np.empty(n_samples)
    histories = [] if record else None
    for start, stop, rng in block_generators(seed, n_samples):
        for i in range(start, stop):
            state = run_chain(mubar, nubar, config, rng, record=record)
            vals[i] = _readout(state, overlap, config, include_sigma_edge_weight)
            if record:
                histories.append(state.history)
    est, se = jackknife_mean_se(vals)
    if record:
        return float(est), float(se), histories
    return float(est), float(se)
