"""Few-step consistency sampling and two-expert switching.

Sampling starts from pure noise at sigma_max, predicts the clean
sample, and re-noises down a geometric schedule. Cutting the schedule
from 100 steps to 3 or 4 cuts model calls proportionally; a high/low
noise expert pair adds exactly one switch. Run:

    python demos/03_few_step_sampling.py
"""

import numpy as np

from turbobench.sampler import (
    ToyModel,
    TwoExpertConfig,
    consistency_sample,
    make_random_weights,
    make_schedule,
    two_expert_sample,
)

# geometric schedules: 100-step baseline vs 3-step distilled deployment
for n in (100, 4, 3, 1):
    sched = make_schedule(n, sigma_max=80.0, sigma_min=0.5)
    head = np.array2string(sched.sigmas[:4], precision=3)
    print(f"{n:>3} steps -> {sched.sigmas.size} levels, first {head}")

# a small toy denoiser; call count equals the step count exactly
model = ToyModel(layers=make_random_weights(64, num_layers=2, seed=0), heads=4)
for n in (100, 3):
    model.calls = 0
    sample = consistency_sample(model, make_schedule(n), (64, 64), seed=17)
    print(f"{n:>3}-step sample: model called {model.calls} times, "
          f"output rms {float(np.sqrt(np.mean(sample ** 2))):.3f}")

# fixed seed means bit-identical samples, run after run
a = consistency_sample(model, make_schedule(3), (64, 64), seed=17)
b = consistency_sample(model, make_schedule(3), (64, 64), seed=17)
print("same seed, bit-identical:", np.array_equal(a, b))

# two experts split the schedule at a boundary noise level; a monotone
# schedule crosses the boundary once, so there is exactly one switch
sched = make_schedule(4)
boundary = float(np.sqrt(sched.sigmas[0] * sched.sigmas[-2]))
high = ToyModel(layers=make_random_weights(64, 2, seed=1), heads=4)
low = ToyModel(layers=make_random_weights(64, 2, seed=2), heads=4)
cfg = TwoExpertConfig(boundary_sigma=boundary, high_noise_model=high, low_noise_model=low)
_, switches = two_expert_sample(cfg, sched, (64, 64), seed=17)
print(f"two-expert run with boundary {boundary:.2f}: "
      f"high called {high.calls}x, low called {low.calls}x, switches {switches}")
