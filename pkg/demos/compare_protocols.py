"""
Ego, gossip and diffusion on label-skewed shards
================================================

A short 6 s run per protocol. The full 39 s comparison is what the
acceptance tests run; pass ``--full`` to reproduce it here (a few minutes).
"""
import sys

from d2dfl.runner import ExperimentConfig, compare, run

budget = 39.0 if "--full" in sys.argv else 6.0
traces = []
for p in ("ego", "gossip", "diffusion"):
    cfg = ExperimentConfig(protocol=p, partition_mode="non-iid", time_budget_s=budget, eval_stride=30 if p == "ego" else 10)
    t = run(cfg)
    traces.append(t)
    print("%-9s rounds %4d  loss %.4f  kB/agent %.0f" % (p, t.rounds_run, t.final_loss, t.cum_kb_per_agent[-1]))

for s in compare(traces, ["ego", "gossip", "diffusion"]):
    print(s)
