"""Pretrain a toy encoder on a generated corpus and look at the pooling
grids: k pools the token-mean vectors of the final k hidden states."""

import numpy as np

from sedkit.encoder import (EncoderArch, PoolingSpec, PretrainConfig, encode,
                            encode_batch, pretrain_base)
from sedkit.synthetic import SyntheticWorldSpec, build_synthetic_world
import sedkit.diffcore as dc

world = build_synthetic_world(
    SyntheticWorldSpec(clusters=4, sentences_per_cluster=12, vocab_size=40,
                       sts_pairs=20, nli_pairs=30, seed=1))
print(f"corpus: {len(world.corpus)} sentences, e.g. {world.corpus[0]!r}")

arch = EncoderArch(layers=2, hidden=32, heads=2, ff=64, max_len=32)
model = pretrain_base(world.corpus, arch,
                      PretrainConfig(steps=120, batch=16, lr=1e-3,
                                     mask_prob=0.15, seed=0))

s = world.corpus[0]
for k in (1, 2, 3):
    e = encode(model, s, PoolingSpec(k))
    print(f"pool k={k}: ||e|| = {np.linalg.norm(e.data):.4f}")

# sequences are always padded to max_len, so batch composition cannot
# change anyone's embedding
with dc.no_grad():
    alone = encode_batch(model, [s], PoolingSpec(2)).data[0]
    crowd = encode_batch(model, [world.corpus[5], s, world.corpus[9]],
                         PoolingSpec(2)).data[1]
print("batch invariance (bitwise):", bool(np.array_equal(alone, crowd)))

spread = np.std(
    [encode(model, t, PoolingSpec(2)).data for t in world.corpus[:20]],
    axis=0).mean()
print(f"mean per-coordinate spread over 20 sentences: {spread:.4f}")
