"""Physical layer: geometry, free-space gains, noise, uplink NOMA rates.

Gains are *power* gains, so a user's received power on subchannel k is
``p[k, n] * g[k, n]`` and its baseband amplitude ``sqrt(p * g)``. Rates are in
bits/s/Hz. SIC decodes users on a subchannel in descending order of channel
gain (ties by ascending user index); each user sees interference only from
users decoded after it.

A subchannel occupied by a primary user yields zero SU rate: secondary users
may only use vacant spectrum, so a transmission there is a collision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig


class InfeasibleAllocation(ValueError):
    pass


@dataclass(frozen=True)
class Allocation:
    """Subchannel assignment ``b`` (K x N, 0/1) with transmit powers ``p`` (watts)."""

    b: np.ndarray
    p: np.ndarray

    @classmethod
    def from_powers(cls, p) -> "Allocation":
        p = np.asarray(p, dtype=float)
        return cls((p > 0).astype(int), p)

    @classmethod
    def idle(cls, num_subchannels: int, num_sus: int) -> "Allocation":
        return cls(np.zeros((num_subchannels, num_sus), dtype=int),
                   np.zeros((num_subchannels, num_sus)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.p.shape

    def validate(self, p_max: float | None = None, max_multiplexed: int | None = None) -> None:
        b, p = np.asarray(self.b), np.asarray(self.p, dtype=float)
        if b.shape != p.shape or b.ndim != 2:
            raise InfeasibleAllocation(f"b {b.shape} and p {p.shape} must be matching K x N")
        if not np.all(np.isfinite(p)):
            raise InfeasibleAllocation("non-finite power")
        if np.any(p < 0):
            raise InfeasibleAllocation("negative power")
        if not np.all((b == 0) | (b == 1)):
            raise InfeasibleAllocation("b must be binary")
        if np.any(p[b == 0] != 0):
            raise InfeasibleAllocation("power on an unassigned (k, n) pair")
        if p_max is not None and np.any(p.sum(axis=0) > p_max * (1 + 1e-12)):
            raise InfeasibleAllocation("per-SU power budget exceeded")
        if max_multiplexed is not None and np.any(b.sum(axis=1) > max_multiplexed):
            raise InfeasibleAllocation("too many SUs multiplexed on a subchannel")


def distance(q, H: float) -> float:
    """UAV-to-user distance from horizontal offset ``q`` and height ``H``."""
    q = np.asarray(q, dtype=float)
    if not (np.all(np.isfinite(q)) and np.isfinite(H)):
        raise ValueError("non-finite input")
    if H <= 0:
        raise ValueError("height must be positive")
    return float(np.sqrt(H * H + np.dot(q.ravel(), q.ravel())))


def channel_gain(mu, xi, beta, d, alpha):
    """Power gain ``mu * xi * beta * d**(-alpha)``; vectorised over ``d``."""
    d = np.asarray(d, dtype=float)
    if np.any(~(d > 0)):
        raise ValueError("distance must be positive")
    g = mu * xi * beta * d ** (-alpha)
    return float(g) if g.ndim == 0 else g


def noise_power(density_dbm_hz: float, subchannel_bandwidth: float) -> float:
    """Noise power in watts for a dBm/Hz density over ``subchannel_bandwidth`` Hz."""
    if subchannel_bandwidth < 0:
        raise ValueError("bandwidth must be non-negative")
    return 10.0 ** ((density_dbm_hz - 30.0) / 10.0) * subchannel_bandwidth


def link_distances(su_positions: np.ndarray, uav_q: np.ndarray, height: float) -> np.ndarray:
    """Distances (N,) between the UAV at ``(uav_q, height)`` and each SU."""
    su = np.asarray(su_positions, dtype=float)
    horiz = np.linalg.norm(su[:, :2] - np.asarray(uav_q)[None, :], axis=1)
    dz = height - su[:, 2]
    return np.sqrt(dz * dz + horiz * horiz)


def channel_gains(su_positions: np.ndarray, uav_q: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    """Gain matrix (K, N); free-space, so identical across subchannels."""
    d = link_distances(su_positions, uav_q, config.uav_height)
    g = channel_gain(config.fading, config.shadowing, config.reference_gain, d,
                     config.path_loss_exponent)
    return np.repeat(np.atleast_1d(g)[None, :], config.num_subchannels, axis=0)


# -- SIC ---------------------------------------------------------------------

def sic_order(gains_on_k) -> tuple[int, ...]:
    """Decoding order for ``[(su, gain), ...]``: strongest gain first."""
    pairs = list(gains_on_k)
    if not pairs:
        raise ValueError("no SU assigned to this subchannel")
    return tuple(n for n, _ in sorted(pairs, key=lambda ng: (-ng[1], ng[0])))


def sic_permutation(gains: np.ndarray) -> np.ndarray:
    """Per-row decoding permutation of all N users, shape (K, N)."""
    gains = np.asarray(gains, dtype=float)
    K, N = gains.shape
    idx = np.broadcast_to(np.arange(N), gains.shape)
    # lexsort: last key is primary
    return np.stack([np.lexsort((idx[k], -gains[k])) for k in range(K)])


def achievable_rate(k: int, n: int, alloc: Allocation, gains: np.ndarray,
                    order=None, eta: float = 0.0) -> float:
    """Rate of SU ``n`` on subchannel ``k`` under SIC ``order`` (users assigned to k)."""
    b, p = np.asarray(alloc.b), np.asarray(alloc.p, dtype=float)
    if b[k, n] == 0:
        return 0.0
    if order is None:
        order = sic_order((j, gains[k, j]) for j in np.flatnonzero(b[k]))
    order = list(order)
    pos = order.index(n)
    interference = sum(p[k, j] * gains[k, j] for j in order[pos + 1:])
    return float(np.log2(1.0 + p[k, n] * gains[k, n] / (interference + eta)))


def rate_matrix(p: np.ndarray, gains: np.ndarray, eta: float,
                occupied: np.ndarray | None = None) -> np.ndarray:
    """Per-(k, n) SIC rates for one or a batch of power matrices.

    ``p`` has shape (..., K, N); unassigned pairs must carry zero power.
    """
    p = np.asarray(p, dtype=float)
    gains = np.asarray(gains, dtype=float)
    perm = sic_permutation(gains)  # (K, N)
    K, N = gains.shape
    rows = np.arange(K)[:, None]
    g_sorted = gains[rows, perm]
    s = p[..., rows, perm] * g_sorted  # received powers, decoding order
    later = np.cumsum(s[..., ::-1], axis=-1)[..., ::-1] - s  # users decoded after
    with np.errstate(divide="ignore", invalid="ignore"):
        r_sorted = np.where(s > 0, np.log2(1.0 + s / (later + eta)), 0.0)
    out = np.empty_like(r_sorted)
    inv = np.argsort(perm, axis=1)
    out[...] = r_sorted[..., rows, inv]
    if occupied is not None:
        out = out * (~np.asarray(occupied, dtype=bool))[:, None]
    return out


def sum_rate(alloc: Allocation, gains: np.ndarray, eta: float,
             occupied: np.ndarray | None = None) -> float:
    """Cell sum rate over all subchannels and users."""
    alloc.validate()
    return float(rate_matrix(alloc.p, gains, eta, occupied).sum())


def sum_rates(p_batch: np.ndarray, gains: np.ndarray, eta: float,
              occupied: np.ndarray | None = None) -> np.ndarray:
    """Sum rate of each allocation in a (A, K, N) power batch."""
    return rate_matrix(p_batch, gains, eta, occupied).sum(axis=(-2, -1))


def marginal_rates(p: np.ndarray, gains: np.ndarray, eta: float,
                   occupied: np.ndarray | None = None) -> np.ndarray:
    """Drop in sum rate when each SU alone is silenced, shape (N,)."""
    p = np.asarray(p, dtype=float)
    K, N = p.shape
    batch = np.repeat(p[None], N, axis=0)
    batch[np.arange(N), :, np.arange(N)] = 0.0
    full = rate_matrix(p, gains, eta, occupied).sum()
    return full - rate_matrix(batch, gains, eta, occupied).sum(axis=(1, 2))


# -- feasibility -------------------------------------------------------------

CONSTRAINTS = ("C1", "C2", "C3", "C4", "C5", "C6")


@dataclass
class FeasibilityReport:
    passed: dict[str, bool]
    sic_unreliable: list[int] = field(default_factory=list)

    @property
    def violations(self) -> list[str]:
        return [c for c in CONSTRAINTS if not self.passed.get(c, True)]

    @property
    def feasible(self) -> bool:
        return not self.violations

    @property
    def allocation_ok(self) -> bool:
        return all(self.passed[c] for c in ("C1", "C2", "C3", "C4"))


def check_constraints(alloc: Allocation, trajectory, config: ScenarioConfig,
                      gains: np.ndarray | None = None) -> FeasibilityReport:
    """Evaluate C1..C6 for one slot; violations are reported, never raised.

    ``trajectory`` is a :class:`~uavnoma.scenario.UavTrajectory` or ``None``
    (C5 then passes vacuously). With ``gains`` the report also lists
    subchannels whose consecutive SIC received powers differ by less than
    ``power_diff_threshold * eta`` (flagged only).
    """
    b = np.asarray(alloc.b)
    p = np.asarray(alloc.p, dtype=float)
    eff = np.where(b == 1, p, 0.0)
    passed = {
        "C1": bool(np.all(np.nan_to_num(eff, nan=np.inf).sum(axis=0) <= config.p_max * (1 + 1e-12))),
        "C2": bool(np.all(p >= 0)),
        "C3": bool(np.all((b == 0) | (b == 1))),
        "C4": bool(np.all(b.sum(axis=1) <= config.max_multiplexed)),
        "C5": True,
        "C6": bool(config.flight_time <= config.t_max),
    }
    if trajectory is not None:
        q1 = np.asarray(trajectory.horizontal[0])
        ok = np.allclose(q1, trajectory.initial, rtol=0, atol=1e-9)
        if config.uav_start is not None:
            ok = ok and np.allclose(q1, config.uav_start, rtol=0, atol=1e-9)
        passed["C5"] = bool(ok)
    unreliable = []
    if gains is not None and passed["C2"] and passed["C3"]:
        eta = config.noise_power
        margin = config.power_diff_threshold * eta
        for k in range(b.shape[0]):
            users = np.flatnonzero(b[k])
            if users.size < 2:
                continue
            order = sic_order((j, gains[k, j]) for j in users)
            rx = np.array([p[k, j] * gains[k, j] for j in order])
            if np.any(np.abs(np.diff(rx)) < margin):
                unreliable.append(k)
    return FeasibilityReport(passed, unreliable)


# -- received signal ---------------------------------------------------------

_QPSK = np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4)))


def su_phase_offsets(num_sus: int) -> np.ndarray:
    """Distinct constellation rotation per SU, spread over one QPSK quadrant."""
    return np.arange(num_sus) * np.pi / (2.0 * num_sus)


def synthesize_received(alloc: Allocation, gains: np.ndarray, occupied, eta: float,
                        rng: np.random.Generator, block_length: int = 64,
                        pu_power: float = 0.0) -> np.ndarray:
    """Complex baseband block (K, L) received at the UAV on every subchannel.

    Each assigned SU contributes ``sqrt(p g)`` times its own rotated QPSK
    symbols; an occupied subchannel adds a BPSK primary signal of received
    power ``pu_power``; circular Gaussian noise has variance ``eta``. All
    random draws are made for every user regardless of assignment, so the
    noise-free output is exactly linear in the set of active users.
    """
    alloc.validate()
    K, N = alloc.shape
    L = int(block_length)
    sym_idx = rng.integers(0, 4, size=(K, N, L))
    pu_bits = rng.integers(0, 2, size=(K, L))
    noise = (rng.standard_normal((K, L)) + 1j * rng.standard_normal((K, L))) * np.sqrt(eta / 2.0)

    rot = np.exp(1j * su_phase_offsets(N))[None, :, None]
    symbols = _QPSK[sym_idx] * rot
    amp = np.sqrt(np.where(np.asarray(alloc.b) == 1, alloc.p, 0.0) * gains)
    y = (amp[:, :, None] * symbols).sum(axis=1)
    occ = np.asarray(occupied, dtype=bool).reshape(K)
    y = y + occ[:, None] * np.sqrt(pu_power) * (2.0 * pu_bits - 1.0)
    return y + noise
