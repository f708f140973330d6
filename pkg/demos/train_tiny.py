"""Generate two synthetic clips, fit a small model, and score it.

Runs in well under a minute. The full-size overfit run lives in the
acceptance suite (tests/test_acceptance.py::test_desk_scale_overfit).
"""
import time

import numpy as np

from refquery import LossConfig, ModelConfig, SyntheticSpec, generate_synthetic
from refquery.metrics import jf_score
from refquery.train import train

spec = dict(T=4, base=(32, 32), channels=(16, 16, 16), C_t=16, N_t=4, num_objects=2, radius=(4.0, 7.0))
clips = [generate_synthetic(SyntheticSpec(seed=s, **spec)) for s in range(2)]
model_cfg = ModelConfig(C=16, heads=2, encoder_layers=2, frame_layers=2, video_layers=2, N_f=8, N_v=8,
                        in_channels=[16, 16, 16], text_channels=16)
loss_cfg = LossConfig(lr=2e-3, iterations=80, T=4, batch_size=1)

start = time.perf_counter()


def log(it, rec):
    if it % 10 == 0 or it == loss_cfg.iterations - 1:
        print(f"iter {it + 1:3d}  L_v {rec.L_v:.3f}  L_f {rec.L_f:.3f}  L_sim {rec.L_sim:.3f}  "
              f"L_train {rec.L_train:.3f}  ({time.perf_counter() - start:.0f} s)")


result = train(clips, model_cfg, loss_cfg, seed=0, log=log)
print()
for clip in clips:
    j, f, jf = jf_score(result.model.infer(clip), clip.target_mask())
    print(f"{clip.clip_id}: J {j:.3f}  F {f:.3f}  J&F {jf:.3f}")
first, last = result.history[0].L_train, result.history[-1].L_train
print(f"\nL_train {first:.3f} -> {last:.3f} ({100 * (1 - last / first):.0f}% lower)")
print("mean J&F", round(float(np.mean([jf_score(result.model.infer(c), c.target_mask())[2] for c in clips])), 3))
