"""Active-inference resource allocation agent.

The agent keeps, per discrete context (perceived cluster label of the
superimposed-signal chain, anticipated PU occupancy pattern), a preference
table over joint actions:

* ``Pi_f``: one categorical per SU over {idle, subchannel 0..K-1}; the
  probability of an assignment pattern is the product over SUs,
* ``Pi_p``: one Gaussian preference per SU over its transmit power,
* ``Pi_u``: a Gaussian preference over the UAV heading increment.

The free energy of a candidate is its surprise under these preferences,
plus an anticipation term that steers SUs away from subchannels the PU
predictor expects to be busy, minus an epistemic bonus for rarely tried
choices. Exploitation picks the minimum; exploration samples a Boltzmann
distribution over it. After each slot the realized score (sum rate minus
weighted abnormality) is split per SU and fed back through multiplicative
(exponentiated) updates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig
from .phy import Allocation

IDLE = -1


@dataclass(frozen=True)
class JointAction:
    b: np.ndarray  # (K, N) 0/1
    p: np.ndarray  # (K, N) watts
    heading_increment: float = 0.0

    @property
    def allocation(self) -> Allocation:
        return Allocation(self.b, self.p)

    def choices(self) -> np.ndarray:
        """Subchannel of each SU (first assigned one) or ``IDLE``."""
        b = np.asarray(self.b)
        first = np.argmax(b, axis=0)
        return np.where(b.any(axis=0), first, IDLE)


def power_grid(p_max: float, levels: int = 5) -> np.ndarray:
    """Evenly spaced grid on [0, p_max] including both ends."""
    return np.linspace(0.0, p_max, levels)


class CandidateSet:
    """Finite menu of joint actions satisfying C1-C4 by construction.

    Every SU is either idle or transmits on exactly one subchannel at one of
    the nonzero ``power_levels``; at most ``max_multiplexed`` SUs share a
    subchannel. Index 0 is always the all-idle action.
    """

    def __init__(self, choice: np.ndarray, power: np.ndarray, num_subchannels: int):
        self.choice = np.asarray(choice, dtype=int)  # (A, N)
        self.power = np.asarray(power, dtype=float)  # (A, N)
        self.num_subchannels = int(num_subchannels)
        self._p_batch = None

    def __len__(self) -> int:
        return self.choice.shape[0]

    @property
    def num_sus(self) -> int:
        return self.choice.shape[1]

    def power_batch(self) -> np.ndarray:
        """All candidates as a (A, K, N) power array."""
        if self._p_batch is None:
            A, N = self.choice.shape
            P = np.zeros((A, self.num_subchannels, N))
            a, n = np.nonzero(self.choice >= 0)
            P[a, self.choice[a, n], n] = self.power[a, n]
            self._p_batch = P
        return self._p_batch

    def action(self, index: int, heading_increment: float = 0.0) -> JointAction:
        K, N = self.num_subchannels, self.num_sus
        b = np.zeros((K, N), dtype=int)
        p = np.zeros((K, N))
        for n, k in enumerate(self.choice[index]):
            if k >= 0:
                b[k, n] = 1
                p[k, n] = self.power[index, n]
        return JointAction(b, p, float(heading_increment))


def count_feasible_actions(num_sus: int, num_subchannels: int, max_multiplexed: int,
                           num_levels: int) -> int:
    total = 0
    for pattern in itertools.product(range(-1, num_subchannels), repeat=num_sus):
        load = np.bincount([k for k in pattern if k >= 0], minlength=num_subchannels)
        if load.max(initial=0) <= max_multiplexed:
            total += num_levels ** sum(k >= 0 for k in pattern)
    return total


def enumerate_feasible_actions(config: ScenarioConfig, power_levels=None,
                               max_candidates: int = 200_000,
                               rng: np.random.Generator | None = None) -> CandidateSet:
    """Enumerate the joint-action menu for ``config``.

    ``power_levels`` are the nonzero powers an active SU may use (default:
    the nonzero points of the 5-level grid on [0, p_max]). Menus larger than
    ``max_candidates`` are replaced by a seeded uniform sample of that size
    (plus the idle action).
    """
    N, K, M = config.num_sus, config.num_subchannels, config.max_multiplexed
    levels = power_grid(config.p_max)[1:] if power_levels is None else np.asarray(power_levels, float)
    levels = levels[levels > 0]
    if np.any(levels > config.p_max):
        raise ValueError("power level above p_max")
    patterns = []
    for pattern in itertools.product(range(-1, K), repeat=N):
        load = np.bincount([k for k in pattern if k >= 0], minlength=K)
        if load.max(initial=0) <= M:
            patterns.append(pattern)
    sizes = np.array([levels.size ** sum(k >= 0 for k in p) for p in patterns])
    total = int(sizes.sum())

    # idle pattern is first in product order
    if total <= max_candidates:
        picks = np.arange(total)
    else:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        picks = np.concatenate([[0], np.sort(rng.choice(np.arange(1, total), max_candidates - 1,
                                                        replace=False))])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    pat_idx = np.searchsorted(offsets, picks, side="right") - 1
    within = picks - offsets[pat_idx]
    choice = np.array(patterns, dtype=int)[pat_idx]
    power = np.zeros(choice.shape)
    for a in range(choice.shape[0]):
        r = within[a]
        for n in range(N - 1, -1, -1):
            if choice[a, n] >= 0:
                power[a, n] = levels[r % levels.size]
                r //= levels.size
    return CandidateSet(choice, power, K)


# -- primary-user anticipation ----------------------------------------------

class PuPredictor:
    """Online estimate of each subchannel's 2x2 occupancy chain."""

    def __init__(self, num_subchannels: int, prior: float = 1.0, learning: float = 1.0):
        self.counts = np.full((num_subchannels, 2, 2), float(prior))
        self.learning = float(learning)
        self.belief = self.stationary()

    @property
    def transition(self) -> np.ndarray:
        return self.counts / self.counts.sum(axis=2, keepdims=True)

    def stationary(self) -> np.ndarray:
        T = self.transition
        p01, p10 = T[:, 0, 1], T[:, 1, 0]
        return p01 / np.maximum(p01 + p10, 1e-300)

    def predict(self, previous=None) -> np.ndarray:
        """Probability each subchannel is busy in the coming slot."""
        if previous is None:
            self.belief = self.stationary()
        else:
            prev = np.asarray(previous, dtype=int)
            self.belief = self.transition[np.arange(prev.size), prev, 1]
        return self.belief

    def observe(self, previous, current) -> None:
        if previous is None or self.learning == 0:
            return
        prev = np.asarray(previous, dtype=int)
        cur = np.asarray(current, dtype=int)
        self.counts[np.arange(prev.size), prev, cur] += self.learning


# -- preference tables -------------------------------------------------------

@dataclass
class TableRow:
    logits: np.ndarray  # (N, K+1); column 0 is idle
    counts: np.ndarray  # (N, K+1)
    power_mean: np.ndarray  # (N,)
    power_precision: np.ndarray  # (N,)
    baseline: np.ndarray  # (N,)
    scale: np.ndarray  # (N,)
    seen: np.ndarray  # (N,) bool
    choice_value: np.ndarray  # (N, K+1) running credit of each choice
    choice_spread: np.ndarray  # (N, K+1) running |credit - value|
    heading_mean: float = 0.0
    heading_precision: float = 0.0

    @classmethod
    def uniform(cls, num_sus: int, num_subchannels: int, p_max: float) -> "TableRow":
        N, K = num_sus, num_subchannels
        return cls(np.zeros((N, K + 1)), np.zeros((N, K + 1)), np.full(N, p_max / 2.0),
                   np.zeros(N), np.zeros(N), np.ones(N), np.zeros(N, dtype=bool),
                   np.zeros((N, K + 1)), np.ones((N, K + 1)))

    def copy(self) -> "TableRow":
        return TableRow(self.logits.copy(), self.counts.copy(), self.power_mean.copy(),
                        self.power_precision.copy(), self.baseline.copy(), self.scale.copy(),
                        self.seen.copy(), self.choice_value.copy(), self.choice_spread.copy(),
                        self.heading_mean, self.heading_precision)

    @property
    def probabilities(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    @property
    def power_variance(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.power_precision > 0, 1.0 / self.power_precision, np.inf)


@dataclass
class AgentParams:
    assignment_rate: float = 0.5
    power_rate: float = 0.5
    heading_rate: float = 0.2
    baseline_rate: float = 0.1
    abnormality_weight: float = 1.0
    discrete_abnormality_weight: float = 0.0
    pu_aversion: float = 0.5
    epistemic_bonus: float = 1.0
    temperature0: float = 1.0
    temperature_decay: float = 0.95
    temperature_floor: float = 0.05
    heading_control: bool = False
    heading_step: float = float(np.deg2rad(10.0))
    max_precision: float = 400.0  # per p_max^-2
    logit_span: float = 6.0

    def temperature(self, episode: int) -> float:
        return max(self.temperature0 * self.temperature_decay ** episode, self.temperature_floor)


class ActionTable:
    """Preference rows keyed by context, with an occupancy-only backoff table.

    A context seen for the first time starts from the current row of its
    occupancy pattern, so experience transfers across cluster labels.
    """

    def __init__(self, num_sus: int, num_subchannels: int, p_max: float):
        self.num_sus = int(num_sus)
        self.num_subchannels = int(num_subchannels)
        self.p_max = float(p_max)
        self.rows: dict[tuple, TableRow] = {}
        self.backoff: dict[tuple, TableRow] = {}

    def _fresh(self) -> TableRow:
        return TableRow.uniform(self.num_sus, self.num_subchannels, self.p_max)

    def backoff_row(self, context) -> TableRow:
        occ = tuple(context[1])
        if occ not in self.backoff:
            self.backoff[occ] = self._fresh()
        return self.backoff[occ]

    def row(self, context) -> TableRow:
        key = (int(context[0]), tuple(int(v) for v in context[1]))
        if key not in self.rows:
            self.rows[key] = self.backoff_row(key).copy()
        return self.rows[key]

    def peek(self, context) -> TableRow:
        key = (int(context[0]), tuple(int(v) for v in context[1]))
        if key in self.rows:
            return self.rows[key]
        return self.backoff.get(key[1]) or self._fresh()


def free_energy(candidates: CandidateSet, row: TableRow, busy: np.ndarray | None,
                params: AgentParams, p_max: float) -> np.ndarray:
    """Expected free energy (nats) of every candidate in context ``row``."""
    N = candidates.num_sus
    col = candidates.choice + 1  # idle -> column 0
    n_idx = np.arange(N)[None, :]
    logp = np.log(row.probabilities)
    F = -logp[n_idx, col].sum(axis=1)

    active = candidates.choice >= 0
    prec = row.power_precision[None, :]
    dev = (candidates.power - row.power_mean[None, :]) / p_max
    F = F + 0.5 * np.where(active, prec * dev * dev, 0.0).sum(axis=1)

    if busy is not None and params.pu_aversion:
        rel = np.asarray(busy, dtype=float) - np.mean(busy)
        k = np.where(active, candidates.choice, 0)
        F = F + params.pu_aversion * np.where(active, rel[k], 0.0).sum(axis=1)

    if params.epistemic_bonus:
        novelty = 1.0 / np.sqrt(1.0 + row.counts)
        F = F - params.epistemic_bonus * novelty[n_idx, col].sum(axis=1)
    return F


def select_index(F: np.ndarray, mode: str, temperature: float,
                 rng: np.random.Generator) -> int:
    if F.size == 1:
        return 0
    if mode == "exploit":
        best = np.flatnonzero(F <= F.min() + 1e-12)
        return int(best[0] if best.size == 1 else rng.choice(best))
    if mode != "explore":
        raise ValueError(f"unknown mode {mode!r}")
    w = np.exp(-(F - F.min()) / max(temperature, 1e-12))
    w /= w.sum()
    return int(rng.choice(F.size, p=w))


def select_heading(row: TableRow, params: AgentParams, mode: str, temperature: float,
                   rng: np.random.Generator) -> float:
    if not params.heading_control:
        return 0.0
    options = np.array([-params.heading_step, 0.0, params.heading_step])
    F = 0.5 * row.heading_precision * ((options - row.heading_mean) / params.heading_step) ** 2
    return float(options[select_index(F, mode, temperature, rng)])


def select_action(context, table: ActionTable, pu: PuPredictor, candidates: CandidateSet,
                  params: AgentParams, mode: str, rng: np.random.Generator,
                  temperature: float = 1.0) -> tuple[int, JointAction]:
    """Pick a joint action for ``context``; returns (candidate index, action)."""
    row = table.peek(context)
    F = free_energy(candidates, row, pu.belief, params, table.p_max)
    idx = select_index(F, mode, temperature, rng)
    heading = select_heading(row, params, mode, temperature, rng)
    return idx, candidates.action(idx, heading)


def evaluate_action(sum_rate: float, abnormality, weight: float = 1.0,
                    discrete_weight: float = 0.0) -> float:
    """Slot score: realized sum rate minus weighted total abnormality."""
    cont = float(np.sum(getattr(abnormality, "continuous", abnormality)))
    disc = float(np.sum(getattr(abnormality, "discrete", 0.0)))
    return float(sum_rate) - weight * cont - discrete_weight * disc


def per_su_scores(action: JointAction, rates: np.ndarray, abnormality,
                  weight: float = 1.0, discrete_weight: float = 0.0,
                  contributions: np.ndarray | None = None) -> np.ndarray:
    """Split the slot score across SUs.

    Each SU is credited with its own rate, or with ``contributions`` (e.g.
    its marginal contribution to the sum rate) when given. Abnormality of a
    used subchannel is shared by the SUs on it, that of an unused subchannel
    by the idle SUs.
    """
    b = np.asarray(action.b)
    K, N = b.shape
    cont = np.asarray(getattr(abnormality, "continuous", abnormality), dtype=float).reshape(K)
    disc = np.asarray(getattr(abnormality, "discrete", np.zeros(K)), dtype=float).reshape(K)
    abn = weight * cont + discrete_weight * disc
    if contributions is None:
        out = np.asarray(rates, dtype=float).sum(axis=0).copy()
    else:
        out = np.asarray(contributions, dtype=float).copy()
    idle = ~b.any(axis=0)
    for k in range(K):
        users = np.flatnonzero(b[k])
        if users.size:
            out[users] -= abn[k] / users.size
        elif idle.any():
            out[idle] -= abn[k] / idle.sum()
    return out


@dataclass
class Outcome:
    context: tuple
    action: JointAction
    su_scores: np.ndarray
    score: float
    previous_occupancy: np.ndarray | None = None
    occupancy: np.ndarray | None = None
    candidate_power: np.ndarray | None = None


def _update_row(row: TableRow, choices: np.ndarray, powers: np.ndarray, su_scores: np.ndarray,
                score: float, heading: float, params: AgentParams, p_max: float) -> None:
    N = choices.size
    n = np.arange(N)
    col = choices + 1
    first = ~row.seen
    row.baseline[first] = su_scores[first]
    row.scale[first] = np.maximum(np.abs(su_scores[first]), 1.0)
    row.seen[:] = True
    adv = (su_scores - row.baseline) / row.scale

    row.logits[n, col] += params.assignment_rate * adv
    row.logits -= row.logits.max(axis=1, keepdims=True)
    np.maximum(row.logits, -params.logit_span, out=row.logits)
    row.counts[n, col] += 1.0

    # power: compared against the running credit of the same choice, so the
    # large rate differences between subchannels do not drown the power effect
    active = choices >= 0
    fresh = row.counts[n, col] == 1
    row.choice_value[n[fresh], col[fresh]] = su_scores[fresh]
    padv = (su_scores - row.choice_value[n, col]) / row.choice_spread[n, col]
    padv = np.clip(padv, -1.0, 1.0) * active
    step = params.power_rate * padv
    row.power_mean = np.clip(row.power_mean + step * (powers - row.power_mean), 0.0, p_max)
    row.power_precision = np.minimum(
        row.power_precision + params.power_rate * np.clip(padv, 0.0, None),
        params.max_precision)
    resid = su_scores - row.choice_value[n, col]
    rate = np.maximum(1.0 / row.counts[n, col], params.baseline_rate)
    row.choice_value[n, col] += rate * resid
    row.choice_spread[n, col] += rate * (np.maximum(np.abs(resid), 0.1) - row.choice_spread[n, col])

    if params.heading_control:
        hadv = (score - row.baseline.sum()) / max(row.scale.sum(), 1.0)
        hw = params.heading_rate * max(hadv, 0.0)
        if hw > 0:
            new = row.heading_precision + hw
            row.heading_mean = (row.heading_precision * row.heading_mean + hw * heading) / new
            row.heading_precision = min(new, params.max_precision)

    row.baseline += params.baseline_rate * (su_scores - row.baseline)
    row.scale += params.baseline_rate * (np.maximum(np.abs(su_scores), 1.0) - row.scale)


def update_model(table: ActionTable, pu: PuPredictor, outcome: Outcome,
                 params: AgentParams) -> ActionTable:
    """Fold one slot outcome into the preference tables and the PU predictor."""
    pu.observe(outcome.previous_occupancy, outcome.occupancy)
    if params.assignment_rate == 0 and params.power_rate == 0 and params.heading_rate == 0:
        return table
    choices = outcome.action.choices()
    powers = np.asarray(outcome.action.p).max(axis=0)
    for row in (table.row(outcome.context), table.backoff_row(outcome.context)):
        _update_row(row, choices, powers, outcome.su_scores, outcome.score,
                    outcome.action.heading_increment, params, table.p_max)
    return table


class ActiveGDBNAgent:
    """Candidate menu, preference tables and PU predictor bundled together."""

    def __init__(self, config: ScenarioConfig, params: AgentParams | None = None,
                 candidates: CandidateSet | None = None):
        self.config = config
        self.params = params or AgentParams()
        self.candidates = candidates or enumerate_feasible_actions(config)
        self.table = ActionTable(config.num_sus, config.num_subchannels, config.p_max)
        self.pu = PuPredictor(config.num_subchannels)
        self.episode = 0

    @property
    def temperature(self) -> float:
        return self.params.temperature(self.episode)

    def context(self, label: int, previous_occupancy=None) -> tuple:
        busy = self.pu.predict(previous_occupancy)
        return int(label), tuple(int(v) for v in busy > 0.5)

    def act(self, context, rng: np.random.Generator, mode: str = "explore") -> tuple[int, JointAction]:
        return select_action(context, self.table, self.pu, self.candidates, self.params,
                             mode, rng, self.temperature)

    def learn(self, outcome: Outcome) -> None:
        update_model(self.table, self.pu, outcome, self.params)

    def to_dict(self) -> dict:
        return agent_state_to_dict(self.table, self.pu, self.episode)

    def load_state(self, data: dict) -> None:
        self.table, self.pu, self.episode = agent_state_from_dict(data)


# -- serialization -----------------------------------------------------------

_ROW_ARRAYS = ("logits", "counts", "power_mean", "power_precision", "baseline", "scale",
               "choice_value", "choice_spread")


def _row_to_dict(row: TableRow) -> dict:
    out = {name: np.asarray(getattr(row, name), dtype=float).tolist() for name in _ROW_ARRAYS}
    out["seen"] = [bool(v) for v in row.seen]
    out["heading_mean"] = float(row.heading_mean)
    out["heading_precision"] = float(row.heading_precision)
    return out


def _row_from_dict(d: dict) -> TableRow:
    arrays = {name: np.asarray(d[name], dtype=float) for name in _ROW_ARRAYS}
    return TableRow(seen=np.asarray(d["seen"], dtype=bool), heading_mean=float(d["heading_mean"]),
                    heading_precision=float(d["heading_precision"]), **arrays)


def _occ_key(occ) -> str:
    return "".join(str(int(v)) for v in occ)


def agent_state_to_dict(table: ActionTable, pu: PuPredictor, episode: int = 0) -> dict:
    return {
        "num_sus": table.num_sus, "num_subchannels": table.num_subchannels, "p_max": table.p_max,
        "episode": int(episode),
        "rows": {f"{label}|{_occ_key(occ)}": _row_to_dict(r) for (label, occ), r in table.rows.items()},
        "backoff": {_occ_key(occ): _row_to_dict(r) for occ, r in table.backoff.items()},
        "pu_counts": pu.counts.tolist(), "pu_learning": pu.learning,
    }


def agent_state_from_dict(data: dict) -> tuple[ActionTable, PuPredictor, int]:
    table = ActionTable(data["num_sus"], data["num_subchannels"], data["p_max"])
    for key, row in data["rows"].items():
        label, occ = key.split("|")
        table.rows[(int(label), tuple(int(c) for c in occ))] = _row_from_dict(row)
    for occ, row in data["backoff"].items():
        table.backoff[tuple(int(c) for c in occ)] = _row_from_dict(row)
    counts = np.asarray(data["pu_counts"], dtype=float)
    pu = PuPredictor(counts.shape[0], learning=data.get("pu_learning", 1.0))
    pu.counts = counts
    pu.belief = pu.stationary()
    return table, pu, int(data.get("episode", 0))
