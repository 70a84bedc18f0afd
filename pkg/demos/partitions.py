"""
IID and label-skewed shards
===========================
"""
import numpy as np

from d2dfl import datasets

data = datasets.gen_synthetic(per_class=150, seed=0)
labels = data.train_labels

for mode in ("iid", "non-iid"):
    part = datasets.partition(labels, n_agents=15, mode=mode, seed=0)
    print(mode)
    for i, ix in enumerate(part.indices[:5]):
        counts = np.bincount(labels[ix], minlength=6)
        print("  agent %d  n=%d  per class %s  dropped %s" % (i, len(ix), counts, part.excluded[i]))

# class-mean maps peak at the configured blob centres
for c, (r, a) in enumerate(datasets.SYNTHETIC_CENTERS):
    mean_map = data.train_maps[labels == c].mean(axis=0)
    print("class", c, "centre", (r, a), "peak", tuple(int(i) for i in np.unravel_index(mean_map.argmax(), mean_map.shape)))
