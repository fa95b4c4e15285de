#!/usr/bin/env python
"""Short benchmark of every policy on the desk configuration.

Prints the summary table and writes per-episode curves to
``benchmark_curves.csv``. Pass a larger episode count for steadier numbers:

    python demos/benchmark.py 100
"""
import sys

from uavnoma.harness import (POLICIES, ExperimentSpec, compare, report_table, run_experiment,
                             summarize, train_offline, write_plot_csv)

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 30
spec = ExperimentSpec(episodes=episodes, seeds=(0, 1, 2))
model = train_offline(spec)
metrics = []
for name in POLICIES:
    run, _ = run_experiment(spec, model, name)
    metrics.extend(run)
    print(f"finished {name}")
summary = summarize(metrics, tail=min(20, episodes))
print(report_table(summary))
print(f"agent > random: one-sided Mann-Whitney p = {compare(summary, 'agent', 'random'):.3f}")
write_plot_csv(summary, "benchmark_curves.csv")
