"""Reference policies: random, greedy, tabular Q-learning, exhaustive oracle.

``greedy_policy`` is a simple stand-in for a convex-optimization allocator,
not a reimplementation of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent import CandidateSet, JointAction
from .config import ScenarioConfig
from .phy import Allocation, sum_rates

GREEDY_LABEL = "greedy (convex stand-in)"
ORACLE_LIMIT = 10_000_000


class OracleTooLarge(ValueError):
    """Enumeration would exceed the oracle's size limit."""

    def __init__(self, size: int, limit: int = ORACLE_LIMIT):
        self.size = int(size)
        self.limit = int(limit)
        super().__init__(f"exhaustive search needs {self.size} combinations (limit {self.limit}); "
                         "shrink num_sus, num_subchannels or the power grid")


def random_policy(candidates: CandidateSet, rng: np.random.Generator) -> tuple[int, JointAction]:
    """Uniform draw from the candidate menu."""
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    idx = int(rng.integers(len(candidates)))
    return idx, candidates.action(idx)


def greedy_policy(gains: np.ndarray, config: ScenarioConfig) -> JointAction:
    """Sequential greedy on the sum rate, one subchannel per SU at full power.

    SUs are taken in decreasing order of their best gain; each joins the
    subchannel (holding fewer than M SUs) that raises the sum rate most, or
    stays idle when no subchannel raises it. Zero gains mark unusable links.
    """
    gains = np.asarray(gains, dtype=float)
    K, N = gains.shape
    M = config.max_multiplexed
    eta = config.noise_power
    p = np.zeros((K, N))
    order = np.lexsort((np.arange(N), -gains.max(axis=0)))
    for n in order:
        open_k = [k for k in range(K) if gains[k, n] > 0 and np.count_nonzero(p[k]) < M]
        if not open_k:
            continue
        trials = np.repeat(p[None], len(open_k), axis=0)
        trials[np.arange(len(open_k)), open_k, n] = config.p_max
        gain = sum_rates(trials, gains, eta) - sum_rates(p[None], gains, eta)[0]
        j = int(np.argmax(gain))
        if gain[j] > 0:
            p = trials[j]
    return JointAction((p > 0).astype(int), p)


# -- Q-learning ---------------------------------------------------------------

@dataclass
class QTable:
    num_actions: int
    learning_rate: float = 0.1
    discount: float = 0.5
    epsilon0: float = 1.0
    epsilon_decay: float = 0.95
    epsilon_floor: float = 0.05
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("epsilon0", "epsilon_floor"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def row(self, state) -> np.ndarray:
        if state not in self.values:
            self.values[state] = np.zeros(self.num_actions)
        return self.values[state]

    def epsilon(self, episode: int) -> float:
        return max(self.epsilon0 * self.epsilon_decay ** episode, self.epsilon_floor)


def q_learning_policy(qtable: QTable, state, rng: np.random.Generator,
                      epsilon: float | None = None) -> int:
    """Epsilon-greedy action index; ties among maxima broken uniformly."""
    eps = qtable.epsilon0 if epsilon is None else epsilon
    if eps > 0 and rng.random() < eps:
        return int(rng.integers(qtable.num_actions))
    q = qtable.values.get(state)
    if q is None:
        return int(rng.integers(qtable.num_actions))
    best = np.flatnonzero(q == q.max())
    return int(best[0] if best.size == 1 else rng.choice(best))


def q_update(qtable: QTable, state, action: int, reward: float, next_state) -> QTable:
    """One Q-learning backup of ``Q(state, action)``."""
    if qtable.learning_rate == 0:
        return qtable
    q = qtable.row(state)
    nxt = qtable.values.get(next_state)
    future = 0.0 if nxt is None else float(nxt.max())
    q[action] += qtable.learning_rate * (reward + qtable.discount * future - q[action])
    return qtable


# -- exhaustive search -------------------------------------------------------

def _grid_combinations(grid: np.ndarray, cells: int) -> int:
    return int(grid.size) ** int(cells)


def _feasible_batch(P: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    ok = P.sum(axis=1) <= config.p_max * (1 + 1e-12)  # (A, N)
    load = (P > 0).sum(axis=2)  # (A, K)
    return ok.all(axis=1) & (load <= config.max_multiplexed).all(axis=1)


def exhaustive_oracle(gains: np.ndarray, config: ScenarioConfig, power_grid=None,
                      occupied=None, limit: int = ORACLE_LIMIT,
                      chunk: int = 200_000) -> tuple[JointAction, float]:
    """Best feasible allocation over a power grid on every (k, n) cell.

    A cell with power 0 is unassigned. Ties keep the first combination in
    lexicographic grid order, so the all-zero allocation wins only if nothing
    beats it.
    """
    gains = np.asarray(gains, dtype=float)
    K, N = gains.shape
    grid = np.unique(np.asarray(
        power_grid if power_grid is not None else np.linspace(0, config.p_max, 5), dtype=float))
    if grid[0] != 0.0:
        grid = np.concatenate([[0.0], grid])
    size = _grid_combinations(grid, K * N)
    if size > limit:
        raise OracleTooLarge(size, limit)
    eta = config.noise_power
    best_val, best_p = -np.inf, np.zeros((K, N))
    G = grid.size
    for start in range(0, size, chunk):
        idx = np.arange(start, min(start + chunk, size))
        digits = (idx[:, None] // G ** np.arange(K * N - 1, -1, -1)[None, :]) % G
        P = grid[digits].reshape(-1, K, N)
        feas = _feasible_batch(P, config)
        if not feas.any():
            continue
        vals = np.where(feas, sum_rates(P, gains, eta, occupied), -np.inf)
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_val, best_p = float(vals[j]), P[j].copy()
    alloc = Allocation.from_powers(best_p)
    return JointAction(alloc.b, alloc.p), best_val


def random_search(gains: np.ndarray, config: ScenarioConfig, candidates: CandidateSet,
                  rng: np.random.Generator, budget: int = 20_000, occupied=None,
                  ) -> tuple[JointAction, float]:
    """Best of ``budget`` uniformly sampled candidates (all of them if fewer)."""
    if len(candidates) <= budget:
        idx = np.arange(len(candidates))
    else:
        idx = rng.choice(len(candidates), size=budget, replace=False)
    vals = sum_rates(candidates.power_batch()[idx], gains, config.noise_power, occupied)
    j = int(np.argmax(vals))
    return candidates.action(int(idx[j])), float(vals[j])


def best_candidate(gains: np.ndarray, config: ScenarioConfig, candidates: CandidateSet,
                   occupied=None) -> tuple[int, float]:
    """Index and sum rate of the best candidate on the menu."""
    vals = sum_rates(candidates.power_batch(), gains, config.noise_power, occupied)
    j = int(np.argmax(vals))
    return j, float(vals[j])
