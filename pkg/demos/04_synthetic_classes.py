"""
When does a sparse code lose to plain distances?
================================================

Points are drawn around random class means with growing spread. We verify
pairs with the Euclidean distance and with the Hamming distance between
the supports of their l1 codes over a dictionary built from training
classes. The sparse support discards magnitude, so it falls behind the
plain distance as the spread grows, and both reach chance once classes
overlap. This reduced run takes a few seconds; the
full grid runs with ``lsed experiment synthetic-class``.
"""

from lsed.evaluation import SyntheticClassConfig, run_synthetic_class_experiment

cfg = SyntheticClassConfig(num_classes=60, samples_per_class=32, train_classes=12, pairs_per_fold=60)
print(run_synthetic_class_experiment(cfg).to_csv())
