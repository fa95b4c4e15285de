#!/usr/bin/env python
"""One time slot seen by every allocation policy.

Draws a desk-scale slot, lets each baseline allocate, and compares against
the exhaustive optimum on a coarse power grid for a tiny instance.
"""
import numpy as np

from uavnoma.agent import enumerate_feasible_actions
from uavnoma.baselines import GREEDY_LABEL, best_candidate, exhaustive_oracle, greedy_policy, random_policy
from uavnoma.config import ScenarioConfig
from uavnoma.phy import channel_gains, check_constraints, sum_rate
from uavnoma.scenario import generate_episode

cfg = ScenarioConfig.desk()
world = generate_episode(cfg, seed=3, episode=0)
gains = channel_gains(world.su.positions[0], world.uav.position(0), cfg)
occ = world.pu.occupied[0]
cands = enumerate_feasible_actions(cfg)
rng = np.random.default_rng(0)

print(f"{len(cands)} feasible candidates; PU occupancy {occ.astype(int)}")
print("gains (dB):\n", np.round(10 * np.log10(gains), 1))
vacant_gains = np.where(occ[:, None], 0.0, gains)
choices = {"random": random_policy(cands, rng)[1], GREEDY_LABEL: greedy_policy(vacant_gains, cfg),
           "best candidate": cands.action(best_candidate(gains, cfg, cands, occ)[0])}
for name, action in choices.items():
    ok = check_constraints(action.allocation, None, cfg).allocation_ok
    rate = sum_rate(action.allocation, gains, cfg.noise_power, occ)
    print(f"{name:<26} sum rate {rate:7.2f} b/s/Hz  C1-C4 ok: {ok}")

tiny = ScenarioConfig.desk(num_sus=3, num_subchannels=2)
g = gains[:2, :3]
for M in (1, 2):
    action, value = exhaustive_oracle(g, tiny.replace(max_multiplexed=M), [0.0, 10.0, 20.0])
    print(f"\ntiny instance, M={M}: optimum {value:.2f} b/s/Hz\n", action.p)
