"""
Enumerable discrete block chains and the exact posterior identities behind the
sentence-minus-word score decomposition, plus a 1-D Langevin sampler check.

All arithmetic is numpy float64. Configurations of one layer (D positions, K states each)
are enumerated in lexicographic order, position 0 most significant.
"""

import itertools
from dataclasses import dataclass

import numpy as np

STOCHASTIC_TOLERANCE = 1e-12
IDENTITY_TOLERANCE = 1e-10
MAX_ENUMERATION = 10**6
DIVERGENCE_BOUND = 1e6


def _configs(K, D):
    return np.array(list(itertools.product(range(K), repeat=D)), dtype=np.int64).reshape(K**D, D)


def _check_stochastic(table, what):
    if (table < 0).any():
        raise ValueError(f"Negative probability in {what}")
    if np.abs(table.sum(axis=-1) - 1.0).max() > STOCHASTIC_TOLERANCE:
        raise ValueError(f"Rows of {what} do not sum to 1")


@dataclass
class DiscreteChain:
    """
    Decoder-only block chain.

    prior[d] is p(x^T_d) (positions independent at the top layer). tables[t - 1][d] is the
    conditional of block t at position d, indexed [x^t_0, ..., x^t_{d-1}, x^t_d, x^{t-1}_d].
    """

    K: int
    D: int
    T: int
    prior: np.ndarray
    tables: list

    def validate(self):
        if self.prior.shape != (self.D, self.K):
            raise ValueError(f"Prior must have shape {(self.D, self.K)}, got {self.prior.shape}")
        _check_stochastic(self.prior, "the prior")
        if len(self.tables) != self.T:
            raise ValueError(f"Expected {self.T} block tables, got {len(self.tables)}")
        for t, block in enumerate(self.tables, start=1):
            for d, table in enumerate(block):
                if table.shape != (self.K,) * (d + 2):
                    raise ValueError(f"Block {t} position {d} table has shape {table.shape}")
                _check_stochastic(table, f"block {t} position {d}")
        return self

    def configs(self):
        return _configs(self.K, self.D)

    def top_marginal(self):
        configs = self.configs()
        return np.prod([self.prior[d, configs[:, d]] for d in range(self.D)], axis=0)

    def position_factor(self, t, d):
        """F[s, v] = p_t(x^{t-1}_d = v | x^t = s) for every configuration s of layer t."""
        configs = self.configs()
        table = self.tables[t - 1][d]
        return table[tuple(configs[:, : d + 1].T)]

    def transition(self, t):
        """M[s, u] = p(x^{t-1} = u | x^t = s) for block t."""
        configs = self.configs()
        matrix = np.ones((len(configs), len(configs)))
        for d in range(self.D):
            matrix *= self.position_factor(t, d)[:, configs[:, d]]
        return matrix

    def layer_marginal(self, t):
        marginal = self.top_marginal()
        for block in range(self.T, t, -1):
            marginal = marginal @ self.transition(block)
        return marginal


@dataclass
class EncDecChain:
    """
    Encoder-decoder chain: a code c from a finite set drives every position independently.

    code_prior[m] = p(c = m); prior[d] = p(x^T_d); tables[t - 1] has shape (D, M, K, K),
    indexed [d, c, x^t_d, x^{t-1}_d].
    """

    K: int
    D: int
    T: int
    code_prior: np.ndarray
    prior: np.ndarray
    tables: list

    @property
    def M(self):
        return self.code_prior.shape[0]

    def validate(self):
        _check_stochastic(self.code_prior, "the code prior")
        _check_stochastic(self.prior, "the prior")
        if len(self.tables) != self.T:
            raise ValueError(f"Expected {self.T} decoder tables, got {len(self.tables)}")
        for t, table in enumerate(self.tables, start=1):
            if table.shape != (self.D, self.M, self.K, self.K):
                raise ValueError(f"Decoder table {t} has shape {table.shape}")
            _check_stochastic(table, f"decoder block {t}")
        return self


def _dirichlet(rng, K, shape):
    return rng.dirichlet(np.ones(K), size=shape)


def random_chain(stream, K, D, T, context_free=False):
    """Random DiscreteChain drawn from one generator of `stream`."""
    rng = stream.generator()
    prior = _dirichlet(rng, K, (D,))
    tables = []
    for _ in range(T):
        block = []
        for d in range(D):
            if context_free:
                local = _dirichlet(rng, K, (K,))
                block.append(np.broadcast_to(local, (K,) * d + (K, K)).copy())
            else:
                block.append(_dirichlet(rng, K, (K,) * (d + 1)))
        tables.append(block)
    return DiscreteChain(K=K, D=D, T=T, prior=prior, tables=tables).validate()


def random_encdec_chain(stream, K, D, T, M, code_free=False):
    rng = stream.generator()
    code_prior = rng.dirichlet(np.ones(M))
    prior = _dirichlet(rng, K, (D,))
    tables = []
    for _ in range(T):
        if code_free:
            tables.append(np.broadcast_to(_dirichlet(rng, K, (D, 1, K)), (D, M, K, K)).copy())
        else:
            tables.append(_dirichlet(rng, K, (D, M, K)))
    return EncDecChain(K=K, D=D, T=T, code_prior=code_prior, prior=prior, tables=tables).validate()


def _check_query(chain, t, d, x_t_d, x_tm1_d):
    if not 1 <= t <= chain.T:
        raise ValueError(f"Block t={t} outside 1..{chain.T}")
    if not 0 <= d < chain.D:
        raise ValueError(f"Position d={d} outside 0..{chain.D - 1}")
    if not (0 <= x_t_d < chain.K and 0 <= x_tm1_d < chain.K):
        raise ValueError(f"States must lie in 0..{chain.K - 1}")


def _context_index(configs, d, K):
    weights = K ** np.arange(d - 1, -1, -1)
    return configs[:, :d] @ weights if d else np.zeros(len(configs), dtype=np.int64)


def _normalize(weights):
    total = weights.sum()
    if not total > 0:
        raise ValueError("unreachable evidence")
    return weights / total


def posterior_bruteforce_context(chain, t, d, x_t_d, x_tm1_d):
    """
    p(x^t_{<d} | x^{t-1}_d, x^t_d) by enumerating the joint of layers T..t together with
    x^{t-1}_d and applying Bayes normalization.

    Returns:
    - array of shape (K,) * d over the context configurations.
    """
    chain.validate()
    _check_query(chain, t, d, x_t_d, x_tm1_d)
    n_configs = chain.K**chain.D
    if n_configs ** (chain.T - t + 1) * chain.K > MAX_ENUMERATION:
        raise ValueError("Chain too large for brute-force enumeration")

    joint = chain.top_marginal()
    for block in range(chain.T, t, -1):
        joint = joint[..., :, None] * chain.transition(block)
    joint = joint[..., :, None] * chain.position_factor(t, d)
    layer_t = joint.reshape(-1, n_configs, chain.K).sum(axis=0)

    configs = chain.configs()
    weights = np.where(configs[:, d] == x_t_d, layer_t[:, x_tm1_d], 0.0)
    context = np.zeros(chain.K**d)
    np.add.at(context, _context_index(configs, d, chain.K), weights)
    return _normalize(context).reshape((chain.K,) * d)


def context_factors(chain, t, d, x_t_d, x_tm1_d):
    """
    The three factors of the ratio form, each over context configurations:
    sentence  p(x^{t-1}_d | x^t_d, x^t_{<d}),
    prior     p(x^t_{<d} | x^t_d),
    word      p(x^{t-1}_d | x^t_d) (a scalar).
    """
    chain.validate()
    _check_query(chain, t, d, x_t_d, x_tm1_d)
    configs = chain.configs()
    marginal = chain.layer_marginal(t)
    joint = np.zeros(chain.K**d)
    np.add.at(joint, _context_index(configs, d, chain.K), np.where(configs[:, d] == x_t_d, marginal, 0.0))
    prior = _normalize(joint)
    sentence = chain.tables[t - 1][d][..., x_t_d, x_tm1_d].reshape(-1)
    word = float((sentence * prior).sum())
    return sentence, prior, word


def posterior_ratio_context(chain, t, d, x_t_d, x_tm1_d):
    """sentence · prior / word, renormalized; same layout as posterior_bruteforce_context."""
    sentence, prior, word = context_factors(chain, t, d, x_t_d, x_tm1_d)
    if not word > 0:
        raise ValueError("unreachable evidence")
    return _normalize(sentence * prior / word).reshape((chain.K,) * d)


def _position_marginal_given_code(chain, t, d):
    """p(x^t_d | c) for every code: array of shape (M, K)."""
    marginal = np.broadcast_to(chain.prior[d], (chain.M, chain.K))
    for block in range(chain.T, t, -1):
        marginal = np.einsum("mk,mkj->mj", marginal, chain.tables[block - 1][d])
    return marginal


def posterior_encdec(chain, t, d, x_t_d, x_tm1_d):
    """
    p(c | x^{t-1}_d, x^t_d) through Bayes' rule, checked against the definitional posterior
    obtained by enumerating the joint of c and the position-d path x^T_d..x^{t-1}_d.
    """
    chain.validate()
    _check_query(chain, t, d, x_t_d, x_tm1_d)

    likelihood = _position_marginal_given_code(chain, t, d)[:, x_t_d] * chain.tables[t - 1][d, :, x_t_d, x_tm1_d]
    evidence = float((likelihood * chain.code_prior).sum())
    if not evidence > 0:
        raise ValueError("unreachable evidence")
    bayes = likelihood * chain.code_prior / evidence

    if chain.M * chain.K ** (chain.T - t + 2) > MAX_ENUMERATION:
        raise ValueError("Chain too large for brute-force enumeration")
    joint = chain.code_prior[:, None] * chain.prior[d][None, :]
    for block in range(chain.T, t - 1, -1):
        step = chain.tables[block - 1][d]
        joint = joint[..., None] * step.reshape((chain.M,) + (1,) * (joint.ndim - 2) + (chain.K, chain.K))
    evidence_slice = joint[..., x_t_d, x_tm1_d].reshape(chain.M, -1).sum(axis=1)
    definitional = _normalize(evidence_slice)

    gap = float(np.abs(bayes - definitional).max())
    if gap > IDENTITY_TOLERANCE:
        raise RuntimeError(f"Bayes posterior differs from the enumerated posterior by {gap:.3e}")
    return bayes


@dataclass
class LangevinStats:
    mean: float
    var: float
    final: np.ndarray


def standard_normal_score(c):
    return -c


def langevin_on_chain(grad_log_p, c0, step, n_steps, stream, noise_scale=1.0, burn_in=0, chunk=1000):
    """
    c <- c + step · ∇log p(c) + noise_scale · √(2·step) · ε, run on every entry of c0 in parallel.

    Args:
    - grad_log_p: callable mapping an array of positions to the score at each.
    - c0: array of starting points, one independent chain per entry.
    - step: step size.
    - n_steps: number of updates.
    - stream: RandomStream; one generator is drawn per chunk of steps.
    - noise_scale: 0 turns the sampler into gradient ascent on log p.
    - burn_in: leading steps left out of the statistics.

    Returns:
    - LangevinStats over all chains and retained steps.
    """
    c = np.array(c0, dtype=np.float64, copy=True)
    total = 0.0
    total_sq = 0.0
    kept = 0
    for start in range(0, n_steps, chunk):
        size = min(chunk, n_steps - start)
        eps = stream.generator().standard_normal((size,) + c.shape)
        for i in range(size):
            c = c + step * grad_log_p(c) + noise_scale * np.sqrt(2.0 * step) * eps[i]
            if not np.all(np.abs(c) <= DIVERGENCE_BOUND):
                raise RuntimeError(f"Langevin chain diverged at step {start + i}")
            if start + i >= burn_in:
                total += c.sum()
                total_sq += (c**2).sum()
                kept += c.size
    if kept == 0:
        return LangevinStats(mean=float("nan"), var=float("nan"), final=c)
    mean = total / kept
    return LangevinStats(mean=float(mean), var=float(total_sq / kept - mean**2), final=c)
