"""Ground-truth world generation: SU mobility, UAV flight and PU occupancy.

Every generator takes an explicit ``numpy.random.Generator``; use
:func:`episode_streams` to derive independent, reproducible streams for one
(seed, episode) pair.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .config import ScenarioConfig

STREAM_NAMES = ("su", "uav", "pu", "signal", "policy", "perception")


def episode_streams(seed: int, episode: int = 0) -> dict[str, np.random.Generator]:
    """Independent generators for one episode, keyed by purpose."""
    root = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(episode),))
    return {name: np.random.default_rng(child)
            for name, child in zip(STREAM_NAMES, root.spawn(len(STREAM_NAMES)))}


@dataclass(frozen=True)
class SuTrajectory:
    positions: np.ndarray  # (T, N, 3) metres

    @property
    def num_steps(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class UavTrajectory:
    horizontal: np.ndarray  # (T, 2) metres
    height: float
    initial: np.ndarray  # configured q(1)
    heading: float  # radians, first-step direction

    def position(self, t: int) -> np.ndarray:
        return self.horizontal[t]


@dataclass
class PuOccupancy:
    transition: np.ndarray  # (K, 2, 2) row-stochastic, state 1 = occupied
    occupied: np.ndarray  # (T, K) bool

    @property
    def num_steps(self) -> int:
        return self.occupied.shape[0]


def normalized_initial_positions(n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` 3-D positions uniformly in the unit cube."""
    return rng.random((n, 3))


def scale_to_cell(unit: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    # affine: x, y onto the square inscribed in the cell disk, z onto [0, su_max_height]
    half = config.cell_radius / np.sqrt(2.0)
    out = np.empty_like(unit, dtype=float)
    out[..., :2] = (2.0 * unit[..., :2] - 1.0) * half
    out[..., 2] = unit[..., 2] * config.su_max_height
    return out


def clamp_to_cell(pos: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    out = np.array(pos, dtype=float, copy=True)
    r = np.linalg.norm(out[..., :2], axis=-1, keepdims=True)
    scale = np.where(r > config.cell_radius, config.cell_radius / np.maximum(r, 1e-300), 1.0)
    out[..., :2] *= scale
    out[..., 2] = np.clip(out[..., 2], 0.0, config.su_max_height)
    return out


def generate_su_mobility(config: ScenarioConfig, rng: np.random.Generator,
                         perturbation: float | None = None) -> SuTrajectory:
    """Random-walk SU positions: uniform start in the cell, bounded uniform steps.

    ``perturbation`` overrides ``config.su_perturbation`` (half-width, metres,
    per axis). Positions that leave the cell are clamped back onto it.
    """
    s = config.su_perturbation if perturbation is None else perturbation
    T, N = config.num_time_steps, config.num_sus
    pos = np.empty((T, N, 3))
    pos[0] = scale_to_cell(normalized_initial_positions(N, rng), config)
    steps = rng.uniform(-1.0, 1.0, size=(T - 1, N, 3)) * s
    for t in range(1, T):
        pos[t] = clamp_to_cell(pos[t - 1] + steps[t - 1], config)
    return SuTrajectory(pos)


def sample_uav_start(config: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    if config.uav_start is not None:
        return np.asarray(config.uav_start, dtype=float)
    r = config.cell_radius * np.sqrt(rng.random())
    phi = 2.0 * np.pi * rng.random()
    return np.array([r * np.cos(phi), r * np.sin(phi)])


def advance_uav(q: np.ndarray, heading: float, config: ScenarioConfig) -> np.ndarray:
    step = config.uav_speed * config.step_duration
    return q + step * np.array([np.cos(heading), np.sin(heading)])


def generate_uav_trajectory(config: ScenarioConfig, rng: np.random.Generator) -> UavTrajectory:
    """Straight-line flight at constant speed along one uniformly random heading."""
    start = sample_uav_start(config, rng)
    heading = 2.0 * np.pi * rng.random()
    T = config.num_time_steps
    step = config.uav_speed * config.step_duration
    k = np.arange(T)[:, None]
    horizontal = start[None, :] + k * step * np.array([np.cos(heading), np.sin(heading)])[None, :]
    return UavTrajectory(horizontal, float(config.uav_height), start.copy(), float(heading))


def pu_transition_matrices(config: ScenarioConfig) -> np.ndarray:
    row = np.asarray(config.pu_transition, dtype=float).reshape(2, 2)
    return np.repeat(row[None], config.num_subchannels, axis=0)


def stationary_occupancy(transition: np.ndarray) -> np.ndarray:
    """Stationary probability of the occupied state for each 2x2 chain."""
    p01 = transition[..., 0, 1]
    p10 = transition[..., 1, 0]
    denom = p01 + p10
    return np.where(denom > 0, p01 / np.where(denom > 0, denom, 1.0), 0.0)


def step_pu_occupancy(model: PuOccupancy, t: int, rng: np.random.Generator) -> np.ndarray:
    """Sample occupancy at ``t + 1`` given the occupancy stored at ``t``."""
    if not 0 <= t < model.num_steps:
        raise IndexError(f"time index {t} outside [0, {model.num_steps})")
    current = model.occupied[t].astype(int)
    k = np.arange(model.transition.shape[0])
    p_busy = model.transition[k, current, 1]
    return rng.random(k.size) < p_busy


def generate_pu_occupancy(config: ScenarioConfig, rng: np.random.Generator,
                          num_steps: int | None = None,
                          transition: np.ndarray | None = None) -> PuOccupancy:
    """Roll K independent two-state chains, starting from their stationary law."""
    T = config.num_time_steps if num_steps is None else int(num_steps)
    trans = pu_transition_matrices(config) if transition is None else np.asarray(transition, float)
    K = trans.shape[0]
    model = PuOccupancy(trans, np.zeros((T, K), dtype=bool))
    model.occupied[0] = rng.random(K) < stationary_occupancy(trans)
    for t in range(T - 1):
        model.occupied[t + 1] = step_pu_occupancy(model, t, rng)
    return model


@dataclass(frozen=True)
class Episode:
    config: ScenarioConfig
    su: SuTrajectory
    uav: UavTrajectory
    pu: PuOccupancy


def generate_episode(config: ScenarioConfig, seed: int, episode: int = 0) -> Episode:
    rngs = episode_streams(seed, episode)
    return Episode(config,
                   generate_su_mobility(config, rngs["su"]),
                   generate_uav_trajectory(config, rngs["uav"]),
                   generate_pu_occupancy(config, rngs["pu"]))


def write_trajectories_csv(path, su: SuTrajectory, uav: UavTrajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["entity", "t", "x", "y", "z"])
        for t in range(su.num_steps):
            for n, (x, y, z) in enumerate(su.positions[t]):
                w.writerow([f"su{n}", t, repr(float(x)), repr(float(y)), repr(float(z))])
        for t, (x, y) in enumerate(uav.horizontal):
            w.writerow(["uav", t, repr(float(x)), repr(float(y)), repr(float(uav.height))])


def write_occupancy_csv(path, pu: PuOccupancy) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", "occupied"])
        for t in range(pu.num_steps):
            for k, occ in enumerate(pu.occupied[t]):
                w.writerow([k, t, int(occ)])
