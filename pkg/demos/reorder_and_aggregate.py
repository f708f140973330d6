"""Frame queries that describe the same instances in shuffled slot order.

Reordering puts every frame back into frame 0's slot order; aggregation then
fuses each slot over frames into one initial video query.
"""
import numpy as np

from refquery import nn
from refquery import tensor as T
from refquery.matching import aggregate, reorder

rng = np.random.default_rng(0)
n, c, t = 5, 16, 4
instances = rng.normal(size=(n, c))

frames, hidden = [], []
for i in range(t):
    perm = np.arange(n) if i == 0 else rng.permutation(n)
    f = np.empty_like(instances)
    f[perm] = instances + rng.normal(scale=0.05, size=instances.shape)   # small drift per frame
    frames.append(f)
    hidden.append(perm)

r = reorder(np.stack(frames))
for i, (got, want) in enumerate(zip(r.permutations, hidden)):
    print(f"frame {i}: recovered {got.tolist()}  hidden {want.tolist()}  match={np.array_equal(got, want)}")

score = nn.Linear(rng, c, 1)
video, weights = aggregate(r.queries, score, return_weights=True)
print("\nper-slot frame weights (columns sum to 1):")
print(np.round(weights.data, 3))
err = np.abs(video.data - instances).max()
print(f"\nvideo queries vs clean instances: max abs difference {err:.3f}")
