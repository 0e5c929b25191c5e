"""
Bayesian search, two ways
=========================

First a toy: the negated Branin function on the unit square, where GP/EI
search is compared with pure random search. Then a dry run over the real
architecture space, with a cheap stand-in objective, to show how the cost
gate filters candidates before anything is trained.
"""
import math

import numpy as np

from phytnet.sweep import BoxSpace, SweepSpace, run_sweep


def neg_branin(p):
    x1, x2 = 15 * p["x0"] - 5, 15 * p["x1"]
    b, c, t = 5.1 / (4 * math.pi**2), 5 / math.pi, 1 / (8 * math.pi)
    return -((x2 - b * x1**2 + c * x1 - 6) ** 2 + 10 * (1 - t) * math.cos(x1) + 10)


box = BoxSpace([(0.0, 1.0), (0.0, 1.0)])
rng = np.random.default_rng(0)
random_best = max(neg_branin(box.sample(rng)) for _ in range(30))
res = run_sweep(30, neg_branin, box, seed=0)
print(f"30 evaluations: GP/EI best {res.best.val_f1:.3f}, random best {random_best:.3f} (optimum -0.398)")
print("GP/EI trajectory:", " ".join(f"{t.val_f1:.1f}" for t in res.trials[10:]))

space = SweepSpace()


def stand_in(point):
    # prefers mid-sized kernels and lr near 1e-4; no training happens here
    return math.exp(-((point["mid_kernel"] - 7) / 6) ** 2 - (math.log10(point["lr"]) + 4) ** 2)


res = run_sweep(20, stand_in, space, seed=1, init_random=8, n_candidates=256)
for t in res.trials:
    tail = f"score {t.val_f1:.3f}" if t.status == "trained" else ",".join(t.reasons)
    print(f"{t.index:>2} k={t.config['mid_kernel']:<2} c={t.config['channels']:<3} "
          f"b={t.config['blocks_per_stage']} size={t.config['input_size']:<3} "
          f"{t.n_params:>9,}p {t.gflops:6.2f}GF {t.status:<9} {tail}")
print("best:", {k: round(v, 6) if isinstance(v, float) else v for k, v in res.best.config.items()})
