"""Experiment engine: offline training, online episodes, metrics and summaries.

Every random draw comes from :func:`uavnoma.scenario.episode_streams`, so an
identical (config, policy, seeds, episodes) tuple always produces identical
metric files, and training with the same config and seed produces an
identical model file.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import agent as ag
from .baselines import (GREEDY_LABEL, OracleTooLarge, QTable, best_candidate, exhaustive_oracle,
                        greedy_policy, q_learning_policy, q_update, random_search)
from .config import ScenarioConfig, read_sections
from .gdbn import (DEFAULT_SMOOTHING, ClassModel, DiscreteVocabulary, DynamicsParameters,
                   GenerativeModel, GNGParams, dumps_canonical, learn_class_model,
                   observation_features)
from .mmjpf import AbnormalitySignal, JumpFilter
from .phy import (Allocation, channel_gains, check_constraints, marginal_rates, rate_matrix,
                  synthesize_received)
from .scenario import advance_uav, episode_streams, generate_episode

POLICIES = ("agent", "random", "greedy", "qlearning", "idle", "oracle")
POLICY_LABELS = {"greedy": GREEDY_LABEL, "oracle": "oracle (knows occupancy, upper bound)"}
METRIC_COLUMNS = ("policy", "seed", "episode", "slot", "sum_rate", "cum_sum_rate",
                  "abn_cont", "abn_disc", "violations")
TRAINING_EPISODE_OFFSET = 1_000_000
PERCEPTION_CLASS = "su"


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    config: ScenarioConfig = field(default_factory=ScenarioConfig.desk)
    policy: str = "agent"
    episodes: int = 100
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    model_path: str | None = None
    metrics_path: str | None = None
    training_episodes: int = 30
    num_particles: int = 200
    agent_params: ag.AgentParams = field(default_factory=ag.AgentParams)
    search_budget: int = 100_000

    def __post_init__(self):
        if not self.seeds:
            raise SpecError("at least one seed is required")
        if self.policy not in POLICIES:
            raise SpecError(f"unknown policy {self.policy!r}; choose from {', '.join(POLICIES)}")
        if self.episodes < 1 or self.training_episodes < 1:
            raise SpecError("episode counts must be positive")
        self.seeds = tuple(int(s) for s in self.seeds)


@dataclass
class EpisodeMetrics:
    policy: str
    seed: int
    episode: int
    sum_rate: np.ndarray
    abn_cont: np.ndarray
    abn_disc: np.ndarray
    violations: np.ndarray
    duration: float = 0.0

    @property
    def cum_sum_rate(self) -> np.ndarray:
        return np.cumsum(self.sum_rate)

    @property
    def total(self) -> float:
        return float(np.sum(self.sum_rate))


# -- offline training --------------------------------------------------------

def _features(alloc: Allocation, gains, occupied, config: ScenarioConfig,
              rng: np.random.Generator) -> np.ndarray:
    y = synthesize_received(alloc, gains, occupied, config.noise_power, rng,
                            config.block_length, config.pu_rx_power)
    return observation_features(y, config.noise_power)


def oracle_allocation(gains, occupied, config: ScenarioConfig, candidates: ag.CandidateSet,
                      rng: np.random.Generator, budget: int = 100_000) -> ag.JointAction:
    """Offline optimizer used to label training data.

    Exhaustive grid search when small enough, otherwise the best of a random
    search over the candidate menu. Candidates touching an occupied
    subchannel are excluded, so the labels never collide with a PU.
    """
    occ = np.asarray(occupied, dtype=bool)
    try:
        action, _ = exhaustive_oracle(gains, config, occupied=occ, limit=budget)
        keep = ~occ[:, None] | (action.b == 0)
        return ag.JointAction(action.b * keep, action.p * keep)
    except OracleTooLarge:
        pass
    clean = ~np.isin(candidates.choice, np.flatnonzero(occ)).any(axis=1)
    sub = ag.CandidateSet(candidates.choice[clean], candidates.power[clean],
                          candidates.num_subchannels)
    action, _ = random_search(gains, config, sub, rng, budget, occ)
    return action


def feature_noise(config: ScenarioConfig, rng: np.random.Generator, samples: int = 400,
                  candidates: ag.CandidateSet | None = None) -> np.ndarray:
    """Feature-noise covariance from pairs of blocks drawn in identical conditions."""
    cands = candidates or ag.enumerate_feasible_actions(config)
    diffs = []
    for _ in range(samples):
        half = config.cell_radius / np.sqrt(2.0)
        pos = np.column_stack([rng.uniform(-half, half, (config.num_sus, 2)),
                               rng.uniform(0.0, config.su_max_height, config.num_sus)])
        gains = channel_gains(pos, np.zeros(2), config)
        occ = rng.random(config.num_subchannels) < 0.5
        alloc = cands.action(int(rng.integers(len(cands)))).allocation
        f1 = _features(alloc, gains, occ, config, rng)
        f2 = _features(alloc, gains, occ, config, rng)
        diffs.append(f1 - f2)
    D = np.vstack(diffs)
    R = D.T @ D / (2.0 * D.shape[0])
    return 0.5 * (R + R.T) + 1e-6 * np.eye(R.shape[0])


def training_streams(config: ScenarioConfig, seed: int, episodes: int,
                     candidates: ag.CandidateSet, budget: int = 100_000) -> dict:
    """Feature streams (one per episode and subchannel) for every signal class.

    ``noise``: all SUs silent, no PU; ``pu``: PU on every subchannel, SUs
    silent; ``su``: the full received signal under the offline optimizer's
    allocation with the true PU occupancy (returned with it as coupled labels).
    """
    out = {"noise": [], "pu": [], "su": [], "occupancy": []}
    K, N = config.num_subchannels, config.num_sus
    idle = Allocation.idle(K, N)
    for e in range(episodes):
        ep_idx = TRAINING_EPISODE_OFFSET + e
        world = generate_episode(config, seed, ep_idx)
        rngs = episode_streams(seed, ep_idx)
        sig, pol = rngs["signal"], rngs["policy"]
        T = config.num_time_steps
        feats = {name: np.zeros((T, K, 2)) for name in ("noise", "pu", "su")}
        for t in range(T):
            gains = channel_gains(world.su.positions[t], world.uav.position(t), config)
            occ = world.pu.occupied[t]
            feats["noise"][t] = _features(idle, gains, np.zeros(K, bool), config, sig)
            feats["pu"][t] = _features(idle, gains, np.ones(K, bool), config, sig)
            action = oracle_allocation(gains, occ, config, candidates, pol, budget)
            feats["su"][t] = _features(action.allocation, gains, occ, config, sig)
        for name in ("noise", "pu", "su"):
            out[name].extend(feats[name][:, k] for k in range(K))
        out["occupancy"].extend(world.pu.occupied[:, k].astype(int) for k in range(K))
    return out


def train_offline(spec: ExperimentSpec, seed: int | None = None,
                  path: str | Path | None = None) -> GenerativeModel:
    """Learn the generative model of every signal class; optionally save it."""
    config = spec.config
    seed = spec.seeds[0] if seed is None else int(seed)
    candidates = ag.enumerate_feasible_actions(config)
    root = np.random.SeedSequence(entropy=seed, spawn_key=(TRAINING_EPISODE_OFFSET - 1,))
    noise_rng, gng_rng = (np.random.default_rng(s) for s in root.spawn(2))
    R = feature_noise(config, noise_rng, candidates=candidates)
    streams = training_streams(config, seed, spec.training_episodes, candidates,
                               spec.search_budget)
    params = GNGParams(learning_rate=config.gng_learning_rate)
    classes = {}
    for name in ("noise", "pu", "su"):
        other = streams["occupancy"] if name == PERCEPTION_CLASS else None
        classes[name] = learn_class_model(streams[name], R, params, gng_rng, other_streams=other,
                                          num_other=2, smoothing=DEFAULT_SMOOTHING)
    meta = {"scenario": config.to_dict(), "seed": seed,
            "training_episodes": spec.training_episodes, "perception_class": PERCEPTION_CLASS}
    model = GenerativeModel(classes, meta)
    if path is not None:
        model.save(path)
    return model


def static_model(R: np.ndarray, process_var: float = 1.0) -> ClassModel:
    """Untrained single-cluster model whose value simply persists."""
    d = R.shape[0]
    vocab = DiscreteVocabulary(np.zeros((1, 2 * d)), np.eye(2 * d)[None] * 1e6)
    return ClassModel(vocab, np.ones((1, 1)), DynamicsParameters.static(d, process_var, R))


def check_model(model: GenerativeModel, config: ScenarioConfig) -> None:
    cls = model.classes.get(PERCEPTION_CLASS)
    if cls is None:
        raise SpecError(f"model has no {PERCEPTION_CLASS!r} class")
    if cls.dynamics.obs_dim != 2:
        raise SpecError("model observation dimension does not match the feature extractor")
    sc = model.metadata.get("scenario")
    if sc is not None:
        for key in ("num_sus", "num_subchannels"):
            if sc.get(key) != getattr(config, key):
                raise SpecError(f"model trained with {key}={sc.get(key)}, "
                                f"experiment uses {getattr(config, key)}")


# -- policies ----------------------------------------------------------------

@dataclass
class SlotInfo:
    t: int
    gains: np.ndarray
    label: int
    previous_occupancy: np.ndarray | None
    occupancy: np.ndarray  # ground truth; only the oracle may look


class Policy:
    name = "base"

    def __init__(self, config: ScenarioConfig, candidates: ag.CandidateSet):
        self.config = config
        self.candidates = candidates

    def begin_episode(self, episode: int) -> None:
        self.episode = episode

    def act(self, info: SlotInfo, rng: np.random.Generator) -> ag.JointAction:
        raise NotImplementedError

    def learn(self, info: SlotInfo, action: ag.JointAction, rates: np.ndarray,
              abn, next_label: int) -> None:
        pass


class IdlePolicy(Policy):
    name = "idle"

    def act(self, info, rng):
        K, N = self.config.num_subchannels, self.config.num_sus
        return ag.JointAction(np.zeros((K, N), dtype=int), np.zeros((K, N)))


class RandomPolicy(Policy):
    name = "random"

    def act(self, info, rng):
        return self.candidates.action(int(rng.integers(len(self.candidates))))


class GreedyPolicy(Policy):
    name = "greedy"

    def act(self, info, rng):
        # same occupancy knowledge as the learners: last slot's PU pattern
        gains = info.gains
        if info.previous_occupancy is not None:
            gains = np.where(np.asarray(info.previous_occupancy, bool)[:, None], 0.0, gains)
        return greedy_policy(gains, self.config)


class OraclePolicy(Policy):
    name = "oracle"

    def act(self, info, rng):
        idx, _ = best_candidate(info.gains, self.config, self.candidates, info.occupancy)
        return self.candidates.action(idx)


class QLearningPolicy(Policy):
    name = "qlearning"

    def __init__(self, config, candidates, qtable: QTable | None = None):
        super().__init__(config, candidates)
        self.q = qtable or QTable(len(candidates))
        self.last = None

    def state(self, label, occupancy) -> tuple:
        occ = () if occupancy is None else tuple(int(v) for v in occupancy)
        return int(label), occ

    def act(self, info, rng):
        s = self.state(info.label, info.previous_occupancy)
        self.last = (s, q_learning_policy(self.q, s, rng, self.q.epsilon(self.episode)))
        return self.candidates.action(self.last[1])

    def learn(self, info, action, rates, abn, next_label):
        s, a = self.last
        s_next = self.state(next_label, info.occupancy)
        q_update(self.q, s, a, float(np.sum(rates)), s_next)


class AgentPolicy(Policy):
    name = "agent"

    def __init__(self, config, candidates, params: ag.AgentParams | None = None):
        super().__init__(config, candidates)
        self.agent = ag.ActiveGDBNAgent(config, params, candidates)
        self.last = None

    def begin_episode(self, episode):
        super().begin_episode(episode)
        self.agent.episode = episode

    def act(self, info, rng):
        ctx = self.agent.context(info.label, info.previous_occupancy)
        _, action = self.agent.act(ctx, rng, "explore")
        self.last = ctx
        return action

    def learn(self, info, action, rates, abn, next_label):
        p = self.agent.params
        score = ag.evaluate_action(np.sum(rates), abn, p.abnormality_weight,
                                   p.discrete_abnormality_weight)
        contrib = marginal_rates(action.p, info.gains, self.config.noise_power, info.occupancy)
        su = ag.per_su_scores(action, rates, abn, p.abnormality_weight,
                              p.discrete_abnormality_weight, contrib)
        self.agent.learn(ag.Outcome(self.last, action, su, score,
                                    info.previous_occupancy, info.occupancy))


def make_policy(name: str, config: ScenarioConfig, candidates: ag.CandidateSet,
                params: ag.AgentParams | None = None) -> Policy:
    if name == "agent":
        return AgentPolicy(config, candidates, params)
    table = {"random": RandomPolicy, "greedy": GreedyPolicy, "qlearning": QLearningPolicy,
             "idle": IdlePolicy, "oracle": OraclePolicy}
    if name not in table:
        raise SpecError(f"unknown policy {name!r}")
    return table[name](config, candidates)


# -- online episodes ---------------------------------------------------------

def _aggregate_label(filters: list[JumpFilter]) -> int:
    labels = np.array([f.map_label() for f in filters])
    return int(np.argmax(np.bincount(labels)))


def run_episode(policy: Policy, model: GenerativeModel, config: ScenarioConfig, seed: int,
                episode: int, num_particles: int = 200) -> EpisodeMetrics:
    start = time.perf_counter()
    world = generate_episode(config, seed, episode)
    rngs = episode_streams(seed, episode)
    cls = model[PERCEPTION_CLASS]
    filters = [JumpFilter(cls, num_particles, rngs["perception"])
               for _ in range(config.num_subchannels)]
    policy.begin_episode(episode)
    T, K = config.num_time_steps, config.num_subchannels
    out = {key: np.zeros(T) for key in ("sum_rate", "abn_cont", "abn_disc")}
    violations = np.zeros(T, dtype=int)
    q = world.uav.position(0).copy()
    heading = world.uav.heading
    eta = config.noise_power
    previous = None
    label = _aggregate_label(filters)
    for t in range(T):
        gains = channel_gains(world.su.positions[t], q, config)
        occ = world.pu.occupied[t]
        info = SlotInfo(t, gains, label, previous, occ)
        action = policy.act(info, rngs["policy"])
        report = check_constraints(action.allocation, None, config)
        violations[t] = sum(not report.passed[c] for c in ("C1", "C2", "C3", "C4"))
        rates = rate_matrix(action.p, gains, eta, occ)
        feats = _features(action.allocation, gains, occ, config, rngs["signal"])
        cont, disc = np.zeros(K), np.zeros(K)
        for k, f in enumerate(filters):
            other = None if previous is None else int(previous[k])
            a = f.step(feats[k], other)
            cont[k], disc[k] = a.continuous, a.discrete
        abn = AbnormalitySignal(cont, disc)
        label = _aggregate_label(filters)
        policy.learn(info, action, rates, abn, label)
        out["sum_rate"][t] = rates.sum()
        out["abn_cont"][t] = cont.sum()
        out["abn_disc"][t] = disc.sum()
        previous = occ.copy()
        heading += action.heading_increment
        q = advance_uav(q, heading, config)
    return EpisodeMetrics(policy.name, seed, episode, out["sum_rate"], out["abn_cont"],
                          out["abn_disc"], violations, time.perf_counter() - start)


def run_experiment(spec: ExperimentSpec, model: GenerativeModel,
                   policy: str | None = None) -> tuple[list[EpisodeMetrics], dict]:
    """All seeds x episodes for one policy; a policy persists across one seed's episodes."""
    name = policy or spec.policy
    check_model(model, spec.config)
    candidates = ag.enumerate_feasible_actions(spec.config)
    metrics = []
    for seed in spec.seeds:
        pol = make_policy(name, spec.config, candidates, spec.agent_params)
        for e in range(spec.episodes):
            metrics.append(run_episode(pol, model, spec.config, seed, e, spec.num_particles))
    return metrics, summarize(metrics)


# -- metrics I/O and summaries ----------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".12g")


def metric_rows(metrics: list[EpisodeMetrics]) -> list[dict]:
    rows = []
    for m in sorted(metrics, key=lambda m: (m.policy, m.seed, m.episode)):
        cum = m.cum_sum_rate
        for t in range(m.sum_rate.size):
            rows.append({"policy": m.policy, "seed": int(m.seed), "episode": int(m.episode),
                         "slot": t, "sum_rate": float(m.sum_rate[t]), "cum_sum_rate": float(cum[t]),
                         "abn_cont": float(m.abn_cont[t]), "abn_disc": float(m.abn_disc[t]),
                         "violations": int(m.violations[t])})
    return rows


def emit_metrics(metrics: list[EpisodeMetrics], fmt: str, path: str | Path) -> Path:
    """Write per-slot metrics as CSV or JSON (numbers to 12 significant digits)."""
    if not metrics:
        raise ValueError("no metrics to write")
    rows = metric_rows(metrics)
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in rows:
                w.writerow([r["policy"]] + [_fmt(r[c]) for c in METRIC_COLUMNS[1:]])
    elif fmt == "json":
        doc = {"columns": list(METRIC_COLUMNS),
               "rows": [{c: (r[c] if c == "policy" else json.loads(_fmt(r[c])))
                         for c in METRIC_COLUMNS} for r in rows]}
        path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def load_metrics(path: str | Path) -> list[EpisodeMetrics]:
    path = Path(path)
    if path.suffix == ".json":
        rows = json.loads(path.read_text())["rows"]
    else:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    groups: dict[tuple, list] = {}
    for r in rows:
        key = (r["policy"], int(r["seed"]), int(r["episode"]))
        groups.setdefault(key, []).append(r)
    out = []
    for (policy, seed, episode), rs in sorted(groups.items()):
        rs.sort(key=lambda r: int(r["slot"]))
        col = lambda c: np.array([float(r[c]) for r in rs])
        out.append(EpisodeMetrics(policy, seed, episode, col("sum_rate"), col("abn_cont"),
                                  col("abn_disc"), col("violations").astype(int)))
    return out


def convergence_episode(totals, tail: int = 20, tolerance: float = 0.1) -> int | None:
    """First episode whose total is within ``tolerance`` of the final-``tail`` mean."""
    x = np.asarray(totals, dtype=float)
    target = x[-tail:].mean()
    hits = np.flatnonzero(np.abs(x - target) <= tolerance * abs(target))
    return int(hits[0]) if hits.size else None


def episode_totals(metrics: list[EpisodeMetrics]) -> dict[str, dict[int, np.ndarray]]:
    """policy -> seed -> per-episode cumulative sum rate (ordered by episode)."""
    out: dict[str, dict[int, list]] = {}
    for m in sorted(metrics, key=lambda m: (m.policy, m.seed, m.episode)):
        out.setdefault(m.policy, {}).setdefault(m.seed, []).append(m.total)
    return {p: {s: np.array(v) for s, v in d.items()} for p, d in out.items()}


def summarize(metrics: list[EpisodeMetrics], tail: int = 20) -> dict:
    totals = episode_totals(metrics)
    summary = {}
    for policy, by_seed in totals.items():
        mat = np.vstack([by_seed[s] for s in sorted(by_seed)])
        tail_means = mat[:, -tail:].mean(axis=1)
        summary[policy] = {
            "label": POLICY_LABELS.get(policy, policy),
            "seeds": sorted(by_seed),
            "episode_mean": mat.mean(axis=0).tolist(),
            "episode_std": mat.std(axis=0).tolist(),
            "final_mean_per_seed": tail_means.tolist(),
            "final_mean": float(tail_means.mean()),
            "convergence_episode": [convergence_episode(by_seed[s], tail) for s in sorted(by_seed)],
            "violations": int(sum(int(m.violations.sum()) for m in metrics if m.policy == policy)),
        }
    return summary


def compare(summary: dict, better: str, worse: str) -> float:
    """One-sided Mann-Whitney p-value that ``better``'s per-seed final means exceed ``worse``'s."""
    a = summary[better]["final_mean_per_seed"]
    b = summary[worse]["final_mean_per_seed"]
    return float(stats.mannwhitneyu(a, b, alternative="greater").pvalue)


def report_table(summary: dict) -> str:
    lines = [f"{'policy':<40} {'final mean':>12} {'std(seeds)':>11} {'converged':>10} {'viol':>5}"]
    for policy in sorted(summary):
        s = summary[policy]
        conv = [c for c in s["convergence_episode"] if c is not None]
        conv_txt = f"{int(np.median(conv))}" if conv else "-"
        lines.append(f"{s['label']:<40} {s['final_mean']:>12.4f} "
                     f"{np.std(s['final_mean_per_seed']):>11.4f} {conv_txt:>10} {s['violations']:>5}")
    return "\n".join(lines)


def write_plot_csv(summary: dict, path: str | Path) -> Path:
    """Per-episode mean and std of the cumulative sum rate for every policy."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "episode", "mean_cum_sum_rate", "std_cum_sum_rate"])
        for policy in sorted(summary):
            s = summary[policy]
            for e, (m, sd) in enumerate(zip(s["episode_mean"], s["episode_std"])):
                w.writerow([policy, e, _fmt(m), _fmt(sd)])
    return path


def save_agent_state(policy: Policy, path: str | Path) -> None:
    if not isinstance(policy, AgentPolicy):
        raise TypeError("only the agent policy has a serializable state")
    Path(path).write_text(dumps_canonical(policy.agent.to_dict()))


def load_agent_state(policy: Policy, path: str | Path) -> None:
    if not isinstance(policy, AgentPolicy):
        raise TypeError("only the agent policy has a serializable state")
    policy.agent.load_state(json.loads(Path(path).read_text()))


# -- spec files --------------------------------------------------------------

def _parse_value(kind, text: str):
    if kind is bool:
        return str(text).strip().lower() in ("1", "true", "yes", "on")
    return kind(float(text)) if kind is int else kind(text)


def load_spec(path: str | Path | None = None, **overrides) -> ExperimentSpec:
    """Build an :class:`ExperimentSpec` from a config file and keyword overrides.

    ``[scenario]`` feeds :class:`ScenarioConfig` (the desk N=4, K=3 size when
    the file does not set it), ``[experiment]`` the ExperimentSpec fields and
    ``[agent]`` the agent parameters.
    """
    sections = read_sections(path) if path is not None else {}
    scenario = dict(ScenarioConfig.desk().to_dict())
    scenario.update(sections.get("scenario", {}))
    config = ScenarioConfig.from_dict(scenario)

    exp = sections.get("experiment", {})
    kwargs: dict = {"config": config}
    unknown = set(exp) - {"policy", "episodes", "seeds", "training_episodes", "num_particles",
                          "search_budget"}
    if unknown:
        raise SpecError(f"unknown experiment keys: {', '.join(sorted(unknown))}")
    if "policy" in exp:
        kwargs["policy"] = exp["policy"].strip()
    for key in ("episodes", "training_episodes", "num_particles", "search_budget"):
        if key in exp:
            kwargs[key] = int(float(exp[key]))
    if "seeds" in exp:
        kwargs["seeds"] = tuple(int(s) for s in exp["seeds"].replace(";", ",").split(",") if s.strip())

    agent_sec = sections.get("agent", {})
    types = {f.name: f.type for f in dc_fields(ag.AgentParams)}
    params = {}
    for key, text in agent_sec.items():
        if key not in types:
            raise SpecError(f"unknown agent key {key!r}")
        kind = {"float": float, "int": int, "bool": bool}[str(types[key])]
        params[key] = _parse_value(kind, text)
    kwargs["agent_params"] = ag.AgentParams(**params)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentSpec(**kwargs)
