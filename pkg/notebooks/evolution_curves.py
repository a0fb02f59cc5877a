"""
Evolution curves: full method vs plain pseudo-label ERM
=======================================================

Snapshots are taken every 30 stages and each is scored on the whole test
set. These curves are diagnostics only (they look at test data the model
has not reached yet); the protocol metric is the online one.
"""
import numpy as np

from egzsl import (AblationFlags, BaseTrainConfig, EvolverConfig, SynthConfig, evolution_curve,
                   run_protocol, synth_generate, train_base)

bundle = synth_generate(SynthConfig(num_seen=6, num_unseen=3, d_x=32, d_a=12, base_per_class=200,
                                    test_per_class=2000, cluster_spread=22.5, attribute_map_noise=0.25,
                                    map_scale=30.0, attribute_rank=9, seed=0))
base = train_base(bundle.base_features, bundle.base_labels, bundle.attribute_table(),
                  bundle.seen_classes, BaseTrainConfig())


def mean_curve(report):
    curves = [evolution_curve(run.snapshots, bundle.test_features, bundle.test_labels,
                              bundle.seen_classes, bundle.unseen_classes) for run in report.runs]
    steps = [p.time_step for p in curves[0]]
    return steps, np.mean([[p.harmonic for p in c] for c in curves], axis=0)


full = run_protocol(bundle, base, EvolverConfig(), seeds=range(5), stage_size=100, snapshot_stride=30)
erm = run_protocol(bundle, base, EvolverConfig(), AblationFlags(), seeds=range(5), stage_size=100,
                   erm=True, snapshot_stride=30)

steps, h_full = mean_curve(full)
_, h_erm = mean_curve(erm)
print(f"{'t':>5} {'full H':>8} {'ERM H':>8}")
for t, a, b in zip(steps, h_full, h_erm):
    print(f"{t:5d} {a:8.4f} {b:8.4f}")

# ERM drifts: its own mistakes become its training targets
print("online H  full", round(full.mean["harmonic"], 4), " ERM", round(erm.mean["harmonic"], 4))
