"""Offline perceptual learning of the generative model.

Pipeline for one signal class (noise, primary user, superimposed SUs):

1. per-slot observation features of the received block,
2. a static-evolution Kalman filter turns each feature stream into
   generalized states (filtered value, per-step derivative) and generalized
   errors (innovation, derivative),
3. growing neural gas clusters the generalized states into a discrete
   vocabulary with Voronoi covariances,
4. bigram counts give single-chain and coupled transition matrices,
5. cluster mean derivatives become the control vectors of the switching
   linear dynamics, whose residual covariance is the process noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODEL_FORMAT = "uavnoma-generative-model"
MODEL_VERSION = 1
SIGNAL_CLASSES = ("noise", "pu", "su")
FEATURE_NAMES = ("snr_db", "circularity")


# -- observation features ----------------------------------------------------

def observation_features(block: np.ndarray, eta: float) -> np.ndarray:
    """Features of received blocks: SNR in dB and non-circularity in [0, 1].

    ``block`` is (..., L) complex. Non-circularity ``|E y^2| / E|y|^2`` is
    near 1 for a real (BPSK) signal and near 0 for QPSK or noise.
    """
    y = np.asarray(block)
    power = np.mean(np.abs(y) ** 2, axis=-1)
    ref = eta if eta > 0 else 1e-30
    snr_db = 10.0 * np.log10(np.maximum(power, 1e-300) / ref)
    circ = np.abs(np.mean(y * y, axis=-1)) / np.maximum(power, 1e-300)
    return np.stack([snr_db, circ], axis=-1)


# -- generalized states ------------------------------------------------------

@dataclass(frozen=True)
class GeneralizedState:
    value: np.ndarray
    derivative: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.value, dtype=float))
        d = np.atleast_1d(np.asarray(self.derivative, dtype=float))
        if v.shape != d.shape:
            raise ValueError("value and derivative must have equal dimension")
        object.__setattr__(self, "value", v)
        object.__setattr__(self, "derivative", d)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.value, self.derivative])

    @classmethod
    def from_vector(cls, x) -> "GeneralizedState":
        x = np.asarray(x, dtype=float)
        half = x.size // 2
        return cls(x[:half], x[half:])


def _static_filter(observations, process_var: float, obs_var: float):
    z = np.asarray(observations, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] < 2:
        raise ValueError("need at least two observations")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite observation")
    n, d = z.shape
    x = z[0].copy()
    P = np.full(d, obs_var)
    filtered = np.empty_like(z)
    innov = np.zeros_like(z)
    filtered[0] = x
    for t in range(1, n):
        P = P + process_var  # identity dynamics, no control
        e = z[t] - x
        gain = P / (P + obs_var)
        x = x + gain * e
        P = (1.0 - gain) * P
        filtered[t] = x
        innov[t] = e
    return filtered, innov


def generalized_errors(observations, process_var: float = 1.0,
                       obs_var: float = 1.0) -> list[GeneralizedState]:
    """Innovations of a static-evolution Kalman filter and the filtered drift.

    The filter is initialised on the first observation; one state is emitted
    per later step, pairing the innovation with the change of the filtered
    estimate over that step.
    """
    filtered, innov = _static_filter(observations, process_var, obs_var)
    drift = np.diff(filtered, axis=0)
    return [GeneralizedState(innov[t], drift[t - 1]) for t in range(1, len(filtered))]


def generalized_states(observations, process_var: float = 1.0,
                       obs_var: float = 1.0) -> np.ndarray:
    """Array (T, 2d) of [filtered value, derivative]; derivative is 0 at t=0."""
    filtered, _ = _static_filter(observations, process_var, obs_var)
    drift = np.vstack([np.zeros((1, filtered.shape[1])), np.diff(filtered, axis=0)])
    return np.hstack([filtered, drift])


# -- growing neural gas ------------------------------------------------------

@dataclass
class GNGParams:
    learning_rate: float = 0.01
    neighbor_ratio: float = 0.5  # neighbour step = ratio * learning_rate
    max_nodes: int = 30
    insertion_interval: int = 100
    max_edge_age: int = 50
    error_split: float = 0.5
    error_decay: float = 0.995
    passes: int = 5


@dataclass
class GNGResult:
    nodes: np.ndarray
    edges: list[tuple[int, int]]
    qe_history: list[float]


def quantization_error(samples: np.ndarray, nodes: np.ndarray) -> float:
    """Mean squared distance from each sample to its nearest node."""
    d2 = ((samples[:, None, :] - nodes[None, :, :]) ** 2).sum(-1)
    return float(d2.min(axis=1).mean())


def gng_fit(samples, params: GNGParams, rng: np.random.Generator) -> GNGResult:
    """Fritzke's growing neural gas on (S, D) samples."""
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two samples")
    cap = max(2, int(params.max_nodes))
    D = X.shape[1]
    W = np.zeros((cap, D))
    err = np.zeros(cap)
    alive = np.zeros(cap, dtype=bool)
    age = np.full((cap, cap), -1, dtype=int)  # -1 = no edge

    first = rng.choice(X.shape[0], size=2, replace=False)
    W[:2] = X[first]
    alive[:2] = True
    eps_b = params.learning_rate
    eps_n = params.learning_rate * params.neighbor_ratio
    history = []
    seen = 0

    for _ in range(max(1, params.passes)):
        for i in rng.permutation(X.shape[0]):
            x = X[i]
            idx = np.flatnonzero(alive)
            d2 = ((W[idx] - x) ** 2).sum(axis=1)
            order = np.argsort(d2, kind="stable")
            s1, s2 = idx[order[0]], idx[order[1]]

            nbrs = np.flatnonzero(age[s1] >= 0)
            age[s1, nbrs] += 1
            age[nbrs, s1] += 1
            err[s1] += d2[order[0]]
            W[s1] += eps_b * (x - W[s1])
            if nbrs.size:
                W[nbrs] += eps_n * (x - W[nbrs])
            age[s1, s2] = age[s2, s1] = 0

            stale = age > params.max_edge_age
            age[stale] = -1
            lonely = alive & ~(age >= 0).any(axis=1)
            if lonely.any() and alive.sum() - lonely.sum() >= 2:
                alive[lonely] = False
                err[lonely] = 0.0

            seen += 1
            if seen % params.insertion_interval == 0 and alive.sum() < cap:
                history.append(quantization_error(X, W[alive]))
                q = int(np.flatnonzero(alive)[np.argmax(err[alive])])
                qn = np.flatnonzero(age[q] >= 0)
                if qn.size:
                    f = int(qn[np.argmax(err[qn])])
                    r = int(np.flatnonzero(~alive)[0])
                    W[r] = 0.5 * (W[q] + W[f])
                    alive[r] = True
                    age[r, :] = age[:, r] = -1
                    age[q, f] = age[f, q] = -1
                    age[q, r] = age[r, q] = 0
                    age[f, r] = age[r, f] = 0
                    err[q] *= params.error_split
                    err[f] *= params.error_split
                    err[r] = err[q]
            err[alive] *= params.error_decay
        if alive.sum() >= cap:
            break

    keep = np.flatnonzero(alive)
    remap = {int(old): new for new, old in enumerate(keep)}
    edges = [(remap[int(a)], remap[int(b)]) for a, b in zip(*np.nonzero(np.triu(age >= 0)))
             if a in remap and b in remap]
    return GNGResult(W[keep].copy(), edges, history)


# -- vocabulary --------------------------------------------------------------

@dataclass
class DiscreteVocabulary:
    means: np.ndarray  # (C, D)
    covariances: np.ndarray  # (C, D, D)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(
            self.means.shape[0], self.means.shape[1], self.means.shape[1])
        if self.means.shape[0] < 1:
            raise ValueError("vocabulary needs at least one cluster")
        self._prec = np.linalg.inv(self.covariances)

    @property
    def size(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean_state(self, label: int) -> GeneralizedState:
        return GeneralizedState.from_vector(self.means[label])

    def mahalanobis2(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        diff = X[:, None, :] - self.means[None, :, :]
        return np.einsum("sci,cij,scj->sc", diff, self._prec, diff)


MIN_EIG = 1e-9


def regularize_covariance(S: np.ndarray, floor: float = MIN_EIG) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    w = np.maximum(w, floor)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


def vocabulary_from_nodes(samples: np.ndarray, nodes: np.ndarray,
                          shrink: float | None = None) -> DiscreteVocabulary:
    """Voronoi-cell means and covariances; empty cells are dropped.

    Small cells are shrunk toward the pooled covariance with pseudo-count
    ``shrink`` (default D + 2) so every covariance stays positive-definite.
    """
    X = np.asarray(samples, dtype=float)
    D = X.shape[1]
    d2 = ((X[:, None, :] - nodes[None, :, :]) ** 2).sum(-1)
    member = np.argmin(d2, axis=1)
    pooled = np.cov(X.T, bias=True).reshape(D, D)
    scale = max(np.trace(pooled) / D, 1.0)
    pooled = regularize_covariance(pooled, floor=1e-6 * scale)
    kappa = D + 2.0 if shrink is None else shrink
    means, covs = [], []
    for c in range(nodes.shape[0]):
        pts = X[member == c]
        if pts.shape[0] == 0:
            continue
        mu = pts.mean(axis=0)
        diff = pts - mu
        S = diff.T @ diff
        cov = (S + kappa * pooled) / (pts.shape[0] + kappa)
        means.append(mu)
        covs.append(regularize_covariance(cov, floor=max(MIN_EIG, 1e-6 * scale)))
    return DiscreteVocabulary(np.array(means), np.array(covs))


def gng_learn(samples, params: GNGParams | None = None,
              rng: np.random.Generator | None = None) -> DiscreteVocabulary:
    """Cluster generalized states into a discrete vocabulary with GNG."""
    params = params or GNGParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.asarray([s.as_vector() if isinstance(s, GeneralizedState) else s for s in samples],
                   dtype=float)
    result = gng_fit(X, params, rng)
    return vocabulary_from_nodes(X, result.nodes)


def assign_cluster(x, vocab: DiscreteVocabulary) -> int:
    """Label of the cluster nearest in Mahalanobis distance (lowest label on ties)."""
    v = x.as_vector() if isinstance(x, GeneralizedState) else np.asarray(x, dtype=float)
    return int(np.argmin(vocab.mahalanobis2(v)[0]))


def assign_clusters(X, vocab: DiscreteVocabulary) -> np.ndarray:
    return np.argmin(vocab.mahalanobis2(X), axis=1)


# -- transitions -------------------------------------------------------------

DEFAULT_SMOOTHING = 1e-3


def _as_sequences(labels) -> list[np.ndarray]:
    if len(labels) and np.ndim(labels[0]) > 0:
        return [np.asarray(s, dtype=int) for s in labels]
    return [np.asarray(labels, dtype=int)]


def _normalize_rows(counts: np.ndarray, smoothing: float) -> np.ndarray:
    counts = counts + smoothing
    totals = counts.sum(axis=1, keepdims=True)
    width = counts.shape[1]
    return np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / width)


def estimate_transitions(labels, num_clusters: int,
                         smoothing: float = DEFAULT_SMOOTHING) -> np.ndarray:
    """Row-stochastic bigram matrix from one label sequence or a list of them."""
    seqs = _as_sequences(labels)
    if sum(max(len(s) - 1, 0) for s in seqs) < 1:
        raise ValueError("need a sequence of length >= 2")
    counts = np.zeros((num_clusters, num_clusters))
    for s in seqs:
        np.add.at(counts, (s[:-1], s[1:]), 1.0)
    return _normalize_rows(counts, smoothing)


def estimate_coupled_transitions(labels_self, labels_other, num_self: int | None = None,
                                 num_other: int | None = None,
                                 smoothing: float = DEFAULT_SMOOTHING) -> np.ndarray:
    """Transition rows indexed by the previous (self, other) pair.

    Row ``s * num_other + o`` is the distribution of the next self label given
    previous self label ``s`` and previous other-chain label ``o``.
    """
    selfs, others = _as_sequences(labels_self), _as_sequences(labels_other)
    if len(selfs) != len(others) or any(len(a) != len(b) for a, b in zip(selfs, others)):
        raise ValueError("self and other sequences must have equal lengths")
    if sum(max(len(s) - 1, 0) for s in selfs) < 1:
        raise ValueError("need a sequence of length >= 2")
    ns = num_self if num_self is not None else int(max(s.max() for s in selfs)) + 1
    no = num_other if num_other is not None else int(max(o.max() for o in others)) + 1
    counts = np.zeros((ns * no, ns))
    for s, o in zip(selfs, others):
        np.add.at(counts, (s[:-1] * no + o[:-1], s[1:]), 1.0)
    return _normalize_rows(counts, smoothing)


# -- generative model --------------------------------------------------------

@dataclass
class DynamicsParameters:
    """Switching linear-Gaussian dynamics ``x' = C x + D u_S + w``, ``z = H x + v``."""

    C: np.ndarray
    D: np.ndarray
    U: np.ndarray  # (num_clusters, control_dim)
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ("C", "D", "U", "Q", "H", "R"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        n = self.C.shape[0]
        if self.C.shape != (n, n) or self.Q.shape != (n, n):
            raise ValueError("C and Q must be square with the state dimension")
        if self.D.shape[0] != n or self.U.shape[1] != self.D.shape[1]:
            raise ValueError("control matrix and control vectors disagree")
        if self.H.shape[1] != n or self.R.shape != (self.H.shape[0],) * 2:
            raise ValueError("observation model dimensions disagree")

    @property
    def state_dim(self) -> int:
        return self.C.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.H.shape[0]

    @classmethod
    def generalized(cls, U_derivative: np.ndarray, Q: np.ndarray, R: np.ndarray) -> "DynamicsParameters":
        """Value advances by the cluster derivative; derivative is reset to it."""
        U = np.atleast_2d(U_derivative)
        d = U.shape[1]
        I, Z = np.eye(d), np.zeros((d, d))
        C = np.block([[I, Z], [Z, Z]])
        D = np.vstack([I, I])
        H = np.hstack([I, Z])
        return cls(C, D, U, Q, H, R)

    @classmethod
    def static(cls, d: int, process_var: float, R: np.ndarray) -> "DynamicsParameters":
        """Untrained static-evolution model: value persists, no control."""
        I, Z = np.eye(d), np.zeros((d, d))
        C = np.block([[I, Z], [Z, Z]])
        return cls(C, np.zeros((2 * d, 1)), np.zeros((1, 1)),
                   process_var * np.eye(2 * d), np.hstack([I, Z]), R)


@dataclass
class ClassModel:
    """Learned model of one signal class."""

    vocabulary: DiscreteVocabulary
    transition: np.ndarray
    dynamics: DynamicsParameters
    coupled_transition: np.ndarray | None = None
    num_other: int = 0
    initial: np.ndarray | None = None  # initial label distribution

    def __post_init__(self):
        C = self.vocabulary.size
        self.transition = np.asarray(self.transition, dtype=float)
        if self.transition.shape != (C, C):
            raise ValueError("transition matrix must be C x C")
        if self.dynamics.U.shape[0] != C:
            raise ValueError("one control vector per cluster required")
        if self.coupled_transition is not None:
            self.coupled_transition = np.asarray(self.coupled_transition, dtype=float)
            if self.coupled_transition.shape != (C * self.num_other, C):
                raise ValueError("coupled transition must be (C * num_other) x C")
        if self.initial is None:
            self.initial = np.full(C, 1.0 / C)
        self.initial = np.asarray(self.initial, dtype=float)

    @property
    def num_clusters(self) -> int:
        return self.vocabulary.size

    def transition_rows(self, labels: np.ndarray, other=None) -> np.ndarray:
        labels = np.asarray(labels, dtype=int)
        if other is None or self.coupled_transition is None:
            return self.transition[labels]
        return self.coupled_transition[labels * self.num_other + np.asarray(other, dtype=int)]


@dataclass
class GenerativeModel:
    classes: dict[str, ClassModel]
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> ClassModel:
        return self.classes[name]

    def to_dict(self) -> dict:
        out = {"format": MODEL_FORMAT, "version": MODEL_VERSION,
               "feature_names": list(FEATURE_NAMES),
               "metadata": self.metadata, "classes": {}}
        for name in sorted(self.classes):
            out["classes"][name] = _class_to_dict(self.classes[name])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GenerativeModel":
        if data.get("format") != MODEL_FORMAT:
            raise ValueError("not a generative model file")
        if data.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {data.get('version')}")
        classes = {name: _class_from_dict(c) for name, c in data["classes"].items()}
        return cls(classes, data.get("metadata", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(dumps_canonical(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "GenerativeModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def dumps_canonical(obj) -> str:
    """Deterministic JSON (sorted keys, shortest round-trip floats)."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _arr(x):
    return None if x is None else np.asarray(x, dtype=float).tolist()


def _class_to_dict(m: ClassModel) -> dict:
    dyn = m.dynamics
    return {
        "means": _arr(m.vocabulary.means),
        "covariances": _arr(m.vocabulary.covariances),
        "transition": _arr(m.transition),
        "coupled_transition": _arr(m.coupled_transition),
        "num_other": int(m.num_other),
        "initial": _arr(m.initial),
        "dynamics": {k: _arr(getattr(dyn, k)) for k in ("C", "D", "U", "Q", "H", "R")},
    }


def _class_from_dict(d: dict) -> ClassModel:
    vocab = DiscreteVocabulary(np.array(d["means"]), np.array(d["covariances"]))
    dyn = DynamicsParameters(**{k: np.array(v) for k, v in d["dynamics"].items()})
    coupled = None if d.get("coupled_transition") is None else np.array(d["coupled_transition"])
    return ClassModel(vocab, np.array(d["transition"]), dyn, coupled,
                      int(d.get("num_other", 0)), np.array(d["initial"]))


# -- learning one class ------------------------------------------------------

def learn_class_model(streams, obs_noise: np.ndarray, params: GNGParams,
                      rng: np.random.Generator, other_streams=None,
                      num_other: int = 2, smoothing: float = DEFAULT_SMOOTHING,
                      static_var: float = 1.0) -> ClassModel:
    """Learn vocabulary, transitions and dynamics from feature streams.

    ``streams`` is a list of (T, d) feature sequences (one per episode and
    subchannel). ``other_streams`` optionally gives the aligned label sequence
    of a coupled chain (e.g. primary-user occupancy) for each stream.
    """
    states = [generalized_states(s, static_var, static_var) for s in streams]
    X = np.vstack(states)
    vocab = gng_learn(X, params, rng)
    labels = [assign_clusters(s, vocab) for s in states]
    C = vocab.size
    trans = estimate_transitions(labels, C, smoothing)
    coupled = None
    if other_streams is not None:
        coupled = estimate_coupled_transitions(labels, other_streams, C, num_other, smoothing)

    d = X.shape[1] // 2
    U = vocab.means[:, d:]
    proto = DynamicsParameters.generalized(U, np.eye(2 * d), obs_noise)
    resid = []
    for s, lab in zip(states, labels):
        pred = s[:-1] @ proto.C.T + U[lab[1:]] @ proto.D.T
        resid.append(s[1:] - pred)
    resid = np.vstack(resid)
    Q = resid.T @ resid / max(resid.shape[0], 1)
    # residuals of smoothed states understate how much a filter driven by raw
    # observations moves; add the observation noise on the value block
    Q[:d, :d] += obs_noise
    Q = regularize_covariance(Q, floor=1e-6)
    initial = np.bincount(np.concatenate([lab[:1] for lab in labels]), minlength=C) + smoothing
    return ClassModel(vocab, trans, DynamicsParameters.generalized(U, Q, obs_noise),
                      coupled, num_other if coupled is not None else 0,
                      initial / initial.sum())
