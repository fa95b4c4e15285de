#!/usr/bin/env python
"""Offline perceptual learning, then online abnormality tracking.

Trains the generative models of the three signal classes on desk-scale
episodes, then runs a trained filter and an untrained static filter side by
side on a held-out stream of the superimposed SU signal.
"""
import numpy as np

from uavnoma import agent as ag
from uavnoma.config import ScenarioConfig
from uavnoma.harness import ExperimentSpec, static_model, train_offline, training_streams
from uavnoma.mmjpf import JumpFilter

cfg = ScenarioConfig.desk()
model = train_offline(ExperimentSpec(config=cfg, training_episodes=30))
for name, cls in model.classes.items():
    print(f"{name:>5}: {cls.num_clusters} clusters, "
          f"feature noise diag {np.round(np.diag(cls.dynamics.R), 4)}")

held = training_streams(cfg, seed=2024, episodes=1, candidates=ag.enumerate_feasible_actions(cfg))
z, occ = held["su"][0], held["occupancy"][0]
trained = JumpFilter(model["su"], 200, np.random.default_rng(0))
static = JumpFilter(static_model(model["su"].dynamics.R), 200, np.random.default_rng(0))

print("\nslot  PU  snr_dB  circ   trained  static  label")
for t, zt in enumerate(z):
    other = None if t == 0 else int(occ[t - 1])
    a = trained.step(zt, other).continuous
    b = static.step(zt).continuous
    print(f"{t:>4}  {occ[t]:>2}  {zt[0]:>6.1f}  {zt[1]:.2f}  {a:>8.3f}  {b:>6.3f}  "
          f"{trained.map_label():>5}")
