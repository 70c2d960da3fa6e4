"""
Three ways to encode a patch
============================

We train a K-SVD dictionary (coded with l1 minimisation), a sparse
autoencoder and a diagonal Gaussian mixture on patch features from a small
synthetic corpus, then compare the codes they give for the same patch.
"""

import time

import numpy as np

from lsed.dictionary import KsvdConfig, SannConfig, em_train, ksvd_train, sann_train
from lsed.encoding import make_encoder
from lsed.evaluation import harvest_patch_features, make_synthetic_corpus

corpus = make_synthetic_corpus(8, 2, seed=0)
feats = harvest_patch_features(corpus.images, max_patches=3000, seed=0)
print("training features", feats.shape)

models = {
    "l1": ksvd_train(feats, KsvdConfig(num_atoms=32, max_iters=10, seed=0)),
    "sann": sann_train(feats, SannConfig(hidden_units=32, max_epochs=100, seed=0)),
    "gmm": em_train(feats, 32, seed=0),
}

x = feats[0]
for name, model in models.items():
    enc = make_encoder(model)
    t0 = time.perf_counter()
    code = enc.encode_batch(feats[:200])
    ms = 1000 * (time.perf_counter() - t0) / 200
    c = enc.encode(x).values
    print(f"{name:>4}: {np.sum(np.abs(c) > 1e-6):2d} active of {c.size}, sum {c.sum():7.3f}, {ms:.3f} ms/patch")

# the l1 code zeroes part of the dictionary, the mixture code is a probability vector and the
# autoencoder code lives in (0, 1); all three pool the same way downstream
