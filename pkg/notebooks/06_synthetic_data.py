"""
Synthetic imbalanced image data
===============================

Grey-level textures with a faint block planted in the positive class, then
majority downsampling, a stratified three-way split, normalisation on the
training statistics, and sharding across clients.
"""
import numpy as np

from splitedge.data import downsample_majority, generate, normalize, shard, stratified_split

raw = generate(2000, seed=0)
print(f"raw: {len(raw)} samples, {raw.labels.mean():.3f} positive")

balanced = downsample_majority(raw, 0.5, seed=0)
print(f"balanced: {len(balanced)} samples, {balanced.labels.mean():.3f} positive")

train, val, test = stratified_split(balanced, seed=0)
(train, val, test), stats = normalize(train, val, test)
for name, ds in (("train", train), ("val", val), ("test", test)):
    print(f"{name}: {len(ds)} samples, {ds.labels.mean():.3f} positive")
print(f"train mean {train.images.mean():+.2e}, std {train.images.std():.3f}")

for mode in ("stratified", "dirichlet"):
    shards = shard(train, 4, seed=0, mode=mode)
    print(mode, [(len(s), int(np.sum(s.labels))) for s in shards])
