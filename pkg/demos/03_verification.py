"""
Face verification with pooled descriptors
=========================================

Train an LSED pipeline with a mixture-model encoder on one set of
identities, then verify same/different pairs drawn from disjoint
identities. The decision threshold of each fold is set at the equal error
rate on the other folds.
"""

import numpy as np

from lsed.evaluation import LsedPipeline, make_synthetic_corpus, make_trials, run_verification, split_identities

corpus = make_synthetic_corpus(40, 4, seed=0)
train, test = split_identities(corpus, 16, seed=0)
ctr, cte = corpus.subset(train), corpus.subset(test)

pipe = LsedPipeline("gmm", n_codes=32, n_cohorts=8, max_patches=5000).fit(ctr.images, ctr.labels)
trials = make_trials(cte.labels, n_folds=5, pairs_per_fold=40, seed=1)
res = run_verification(cte, pipe, trials)

print("fold accuracies", np.round(res.fold_accuracy, 3))
print("thresholds     ", np.round(res.thresholds, 3))
print(f"mean accuracy {res.mean_accuracy:.3f}")
