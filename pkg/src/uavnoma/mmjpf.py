"""Markov jump particle filter with a Kalman filter per particle.

Particles carry a discrete cluster label; each has its own Gaussian belief
over the continuous generalized state. Prediction samples labels from the
(possibly coupled) transition rows and pushes every Gaussian through the
label's linear dynamics. Update runs one Kalman correction per particle,
reweights particles by their predictive likelihood and resamples
systematically when the effective sample size drops below half.

Abnormality compares the top-down predictive message with the bottom-up
observation message in observation space using the Bhattacharyya distance
``-ln BC``; the discrete abnormality is the KL divergence of the updated
label distribution from the predicted one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gdbn import ClassModel

_LOG2PI = np.log(2.0 * np.pi)


class FilterDivergence(RuntimeError):
    """All particle weights vanished; the belief must be reinitialised."""


@dataclass
class BeliefState:
    labels: np.ndarray  # (L,)
    weights: np.ndarray  # (L,)
    means: np.ndarray  # (L, n)
    covs: np.ndarray  # (L, n, n)

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def copy(self) -> "BeliefState":
        return BeliefState(self.labels.copy(), self.weights.copy(),
                           self.means.copy(), self.covs.copy())

    def label_distribution(self, num_clusters: int) -> np.ndarray:
        return np.bincount(self.labels, weights=self.weights, minlength=num_clusters)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Weighted mean and covariance of the Gaussian mixture."""
        w = self.weights
        m = w @ self.means
        diff = self.means - m
        P = np.einsum("l,lij->ij", w, self.covs) + np.einsum("l,li,lj->ij", w, diff, diff)
        return m, 0.5 * (P + P.T)


@dataclass(frozen=True)
class Abnormality:
    continuous: float
    discrete: float


@dataclass
class AbnormalitySignal:
    """Per-subchannel abnormality of one slot."""

    continuous: np.ndarray
    discrete: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.continuous))


def init_belief(model: ClassModel, num_particles: int, rng: np.random.Generator,
                mean: np.ndarray | None = None, cov: np.ndarray | None = None) -> BeliefState:
    """L equally weighted particles; labels drawn from the model's initial law.

    Without an explicit ``mean``/``cov`` each particle starts at its cluster's
    mean and covariance.
    """
    L = int(num_particles)
    if L < 1:
        raise ValueError("need at least one particle")
    labels = _sample_rows(np.broadcast_to(model.initial, (L, model.num_clusters)), rng)
    if mean is None:
        means = model.vocabulary.means[labels].copy()
    else:
        means = np.tile(np.asarray(mean, dtype=float), (L, 1))
    if cov is None:
        covs = model.vocabulary.covariances[labels].copy()
    else:
        covs = np.tile(np.asarray(cov, dtype=float), (L, 1, 1))
    if means.shape[1] != model.dynamics.state_dim:
        raise ValueError("initial mean does not match the dynamics state dimension")
    return BeliefState(labels, np.full(L, 1.0 / L), means, covs)


def _sample_rows(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(rows, axis=1)
    u = rng.random(rows.shape[0]) * cum[:, -1]
    return np.minimum((u[:, None] >= cum).sum(axis=1), rows.shape[1] - 1)


def predict(belief: BeliefState, model: ClassModel, rng: np.random.Generator,
            other=None) -> BeliefState:
    """Prior for the next step; weights are carried over unchanged.

    ``other`` is the previous label of the coupled chain (scalar or per
    particle); without it the single-chain transition matrix is used.
    """
    dyn = model.dynamics
    if belief.means.shape[1] != dyn.state_dim:
        raise ValueError("belief and model state dimensions differ")
    rows = model.transition_rows(belief.labels, other)
    labels = _sample_rows(rows, rng)
    means = belief.means @ dyn.C.T + dyn.U[labels] @ dyn.D.T
    covs = dyn.C @ belief.covs @ dyn.C.T + dyn.Q
    return BeliefState(labels, belief.weights.copy(), means, 0.5 * (covs + np.swapaxes(covs, 1, 2)))


def abnormality(mean1, cov1, mean2, cov2) -> float:
    """Bhattacharyya distance between two Gaussians (closed form)."""
    m1 = np.atleast_1d(np.asarray(mean1, dtype=float))
    m2 = np.atleast_1d(np.asarray(mean2, dtype=float))
    S1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    S2 = np.atleast_2d(np.asarray(cov2, dtype=float))
    if m1.shape != m2.shape or S1.shape != S2.shape or S1.shape != (m1.size, m1.size):
        raise ValueError("dimension mismatch")
    for S in (S1, S2):
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive-definite") from exc
    S = 0.5 * (S1 + S2)
    diff = m1 - m2
    maha = diff @ np.linalg.solve(S, diff)
    _, ld = np.linalg.slogdet(S)
    _, ld1 = np.linalg.slogdet(S1)
    _, ld2 = np.linalg.slogdet(S2)
    return float(max(0.125 * maha + 0.5 * (ld - 0.5 * (ld1 + ld2)), 0.0))


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), 1e-300)
    mask = p > 0
    return float(max(np.sum(p[mask] * np.log(p[mask] / q[mask])), 0.0))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn by systematic resampling."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0 or not np.isfinite(total):
        raise FilterDivergence("all particle weights are zero")
    L = w.size
    positions = (rng.random() + np.arange(L)) / L
    cum = np.cumsum(w / total)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right").clip(max=L - 1)


def resample(belief: BeliefState, rng: np.random.Generator) -> BeliefState:
    idx = systematic_resample(belief.weights, rng)
    L = belief.size
    return BeliefState(belief.labels[idx].copy(), np.full(L, 1.0 / L),
                       belief.means[idx].copy(), belief.covs[idx].copy())


def update(belief: BeliefState, observation, model: ClassModel,
           rng: np.random.Generator | None = None,
           resample_below: float = 0.5) -> tuple[BeliefState, Abnormality]:
    """Posterior for this step and the abnormality of the observation.

    Observation dimensions with infinite noise variance are treated as
    missing. Resampling (systematic) needs ``rng`` and triggers when the
    effective sample size falls below ``resample_below * L``.
    """
    z = np.atleast_1d(np.asarray(observation, dtype=float))
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite observation")
    dyn = model.dynamics
    if z.shape[0] != dyn.obs_dim:
        raise ValueError("observation dimension does not match the observation model")
    keep = np.isfinite(np.diag(dyn.R))
    if not keep.any():
        return belief.copy(), Abnormality(0.0, 0.0)
    H = dyn.H[keep]
    R = dyn.R[np.ix_(keep, keep)]
    z = z[keep]

    # top-down message vs bottom-up message, before reweighting
    m, P = belief.moments()
    cont = abnormality(H @ m, H @ P @ H.T + 1e-12 * np.eye(H.shape[0]), z, R)

    C = model.num_clusters
    prior_labels = belief.label_distribution(C)

    Hm = belief.means @ H.T  # (L, d)
    PHt = belief.covs @ H.T  # (L, n, d)
    S = H @ PHt + R  # (L, d, d)
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    e = z - Hm
    Sinv_e = np.linalg.solve(S, e[..., None])[..., 0]
    gain = np.swapaxes(np.linalg.solve(S, np.swapaxes(PHt, 1, 2)), 1, 2)  # (L, n, d)
    means = belief.means + np.einsum("lnd,ld->ln", gain, e)
    n = belief.means.shape[1]
    IKH = np.eye(n) - gain @ H
    covs = IKH @ belief.covs
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))

    _, logdet = np.linalg.slogdet(S)
    loglik = -0.5 * (np.einsum("ld,ld->l", e, Sinv_e) + logdet + H.shape[0] * _LOG2PI)
    with np.errstate(divide="ignore"):
        logw = np.log(belief.weights) + loglik
    top = np.max(logw)
    if not np.isfinite(top):
        raise FilterDivergence("observation has zero likelihood under every particle")
    w = np.exp(logw - top)
    w /= w.sum()

    post = BeliefState(belief.labels.copy(), w, means, covs)
    disc = _kl(post.label_distribution(C), prior_labels)
    if rng is not None and post.ess < resample_below * post.size:
        post = resample(post, rng)
    return post, Abnormality(cont, disc)


class JumpFilter:
    """Stateful convenience wrapper: one M-MJPF tracking one signal stream."""

    def __init__(self, model: ClassModel, num_particles: int, rng: np.random.Generator):
        self.model = model
        self.num_particles = int(num_particles)
        self.rng = rng
        self.belief = init_belief(model, self.num_particles, rng)
        self.started = False

    def reset(self) -> None:
        self.belief = init_belief(self.model, self.num_particles, self.rng)
        self.started = False

    def step(self, z, other=None) -> Abnormality:
        if self.started:
            prior = predict(self.belief, self.model, self.rng, other)
        else:
            prior = self.belief
        try:
            self.belief, abn = update(prior, z, self.model, self.rng)
        except FilterDivergence:
            self.reset()
            self.belief, abn = update(self.belief, z, self.model, self.rng)
        self.started = True
        return abn

    def map_label(self) -> int:
        return int(np.argmax(self.belief.label_distribution(self.model.num_clusters)))

    def label_distribution(self) -> np.ndarray:
        return self.belief.label_distribution(self.model.num_clusters)
