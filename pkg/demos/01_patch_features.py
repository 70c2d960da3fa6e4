"""
From a face image to patch features
===================================

A synthetic face is split into a 3x3 grid of regions. Every region is
scanned with overlapping 8x8 patches, each patch is normalised to zero
mean and unit variance, and the low-frequency zig-zag DCT coefficients
(dropping DC) become its 15-dimensional feature.
"""

import numpy as np

from lsed.imaging import PatchGridConfig, extract_patches, image_features, synth_identity_image

img = synth_identity_image(identity_seed=3, variation_seed=0)
print("image", img.shape, "range", img.min().round(3), img.max().round(3))

cfg = PatchGridConfig()
regions = extract_patches(img, cfg)
print("regions:", len(regions), "patches per region:", [r.shape[0] for r in regions])

feats = image_features(img, cfg)
print("feature block of region 0:", feats[0].shape)

# normalised patches lose brightness and contrast, so the features are
# invariant to an affine change of intensity
brighter = 0.5 * img + 0.3
same = all(np.allclose(a, b) for a, b in zip(feats, image_features(brighter, cfg)))
print("features unchanged by affine intensity change:", same)
