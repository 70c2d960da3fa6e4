from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import lsed.evaluation as ev
from lsed.descriptors import FaceDescriptor
from lsed.evaluation import (
    Corpus,
    HolisticPcaPipeline,
    LsedPipeline,
    SyntheticClassConfig,
    accuracy,
    eer_threshold,
    error_rates,
    evaluate_folds,
    make_synthetic_corpus,
    make_trials,
    run_identification,
    run_robustness_grid,
    run_synthetic_class_experiment,
    run_timing_bench,
    run_verification,
    split_identities,
    threshold_grid,
    train_encoder,
    harvest_patch_features,
)
from lsed.imaging import Perturbation
from lsed.matching import raw_distance


def brute_eer(scores, same):
    n_gen, n_imp = int(same.sum()), int((~same).sum())
    best = None
    for tau in threshold_grid(scores):
        far = Fraction(int(np.sum(scores[~same] <= tau)), n_imp)
        frr = Fraction(int(np.sum(scores[same] > tau)), n_gen)
        gap = abs(far - frr)
        if best is None or gap < best[0]:
            best = (gap, tau)
    return best[1]


# --- thresholds and accuracy ---------------------------------------------------------


def test_perfect_separation():
    scores = np.array([0.1, 0.2, 0.3, 0.8, 0.9])
    same = np.array([True, True, True, False, False])
    tau = eer_threshold(scores, same)
    assert error_rates(scores, same, tau) == (0.0, 0.0)
    assert accuracy(scores, same, tau) == 1.0


def test_constant_scores():
    scores = np.full(6, 0.4)
    same = np.array([True, False] * 3)
    tau = eer_threshold(scores, same)
    assert tau == threshold_grid(scores)[0]
    for t in threshold_grid(scores):
        far, frr = error_rates(scores, same, t)
        assert far + frr == 1.0


def test_hand_list_against_sweep():
    scores = np.array([0.1, 0.2, 0.15, 0.3])
    same = np.array([True, True, False, False])
    tau = eer_threshold(scores, same)
    assert tau == brute_eer(scores, same)
    assert 0.15 < tau < 0.2
    assert error_rates(scores, same, tau) == (0.5, 0.5)


@given(st.integers(0, 2**32 - 1))
def test_eer_matches_sweep(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random(30), 2)
    same = rng.random(30) < 0.5
    same[:2] = [True, False]
    assert eer_threshold(scores, same) == brute_eer(scores, same)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        eer_threshold(np.ones(3), np.ones(3, dtype=bool))


def test_accuracy_formula():
    # 5 mismatched (1 accepted), 10 matched (1 rejected): FAR .2, FRR .1
    scores = np.array([0.0] * 1 + [1.0] * 4 + [0.0] * 9 + [1.0])
    same = np.array([False] * 5 + [True] * 10)
    assert accuracy(scores, same, 0.5) == pytest.approx(0.85)


def test_random_scores_accuracy_near_half(rng):
    scores = rng.random(2000)
    same = np.arange(2000) % 2 == 0
    assert abs(accuracy(scores, same, 0.5) - 0.5) <= 0.05


# --- trials -------------------------------------------------------------------------


@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_trials_balanced_and_identity_disjoint(seed, folds):
    labels = np.repeat(np.arange(30), 3)
    t = make_trials(labels, folds, 20, seed)
    ids_per_fold = []
    for k in range(folds):
        m = t.fold == k
        assert abs(int(t.same[m].sum()) - int((~t.same[m]).sum())) <= 1
        ids_per_fold.append(set(labels[t.first[m]]) | set(labels[t.second[m]]))
    for i in range(folds):
        for j in range(i + 1, folds):
            assert not ids_per_fold[i] & ids_per_fold[j]
    assert np.all((labels[t.first] == labels[t.second]) == t.same)
    assert np.all(t.first[t.same] != t.second[t.same])


def test_trials_deterministic():
    labels = np.repeat(np.arange(20), 2)
    a, b = make_trials(labels, 4, 10, 3), make_trials(labels, 4, 10, 3)
    np.testing.assert_array_equal(a.first, b.first)
    np.testing.assert_array_equal(a.fold, b.fold)


def test_trials_need_enough_identities():
    with pytest.raises(ValueError):
        make_trials(np.repeat(np.arange(5), 2), 5, 10)


# --- verification protocol ---------------------------------------------------------------


class LabelPipeline:
    """Scores from ground truth (oracle) or a constant."""

    def __init__(self, labels, constant=None):
        self.labels = labels
        self.constant = constant
        self.images = None

    def describe(self, image):
        return int(image[0, 0])

    def score(self, a, b):
        if self.constant is not None:
            return self.constant
        return 0.0 if self.labels[a] == self.labels[b] else 1.0


def index_corpus(n_ids=20, per_id=3):
    labels = np.repeat(np.arange(n_ids), per_id)
    images = [np.full((2, 2), float(i)) for i in range(labels.size)]
    return Corpus(images, labels)


def test_oracle_pipeline_is_perfect():
    corpus = index_corpus()
    trials = make_trials(corpus.labels, 5, 50, 0)
    res = run_verification(corpus, LabelPipeline(corpus.labels), trials)
    assert res.fold_accuracy == [1.0] * 5


def test_constant_pipeline_is_chance():
    corpus = index_corpus()
    trials = make_trials(corpus.labels, 5, 50, 0)
    res = run_verification(corpus, LabelPipeline(corpus.labels, constant=0.3), trials)
    assert abs(res.mean_accuracy - 0.5) <= 0.01


def test_threshold_sees_only_development_scores(monkeypatch):
    labels = np.repeat(np.arange(20), 3)
    trials = make_trials(labels, 5, 10, 0)
    scores = np.arange(len(trials), dtype=np.float64)  # score identifies its trial
    seen = []
    real = ev.eer_threshold

    def spy(s, same):
        seen.append(np.array(s))
        return real(s, same)

    monkeypatch.setattr(ev, "eer_threshold", spy)
    evaluate_folds(trials, scores)
    assert len(seen) == 5
    for k, s in enumerate(seen):
        idx = s.astype(int)
        assert np.all(trials.fold[idx] != k)
        assert set(idx) == set(np.flatnonzero(trials.fold != k))


def test_threshold_ignores_evaluation_fold_content():
    labels = np.repeat(np.arange(20), 3)
    trials = make_trials(labels, 5, 10, 0)
    rng = np.random.default_rng(0)
    scores = rng.random(len(trials))
    base = evaluate_folds(trials, scores)
    # scrambling fold 0's scores leaves fold 0's threshold untouched
    scrambled = scores.copy()
    scrambled[trials.fold == 0] = rng.random((trials.fold == 0).sum()) * 100
    assert evaluate_folds(trials, scrambled).thresholds[0] == base.thresholds[0]


# --- synthetic image corpus pipelines ---------------------------------------------------------


@pytest.fixture(scope="module")
def small_world():
    corpus = make_synthetic_corpus(30, 4, seed=0)
    train, test = split_identities(corpus, 12, seed=0)
    ctr, cte = corpus.subset(train), corpus.subset(test)
    pipe = LsedPipeline("gmm", n_codes=16, n_cohorts=8, max_patches=4000).fit(ctr.images, ctr.labels)
    trials = make_trials(cte.labels, 3, 30, seed=1)
    return ctr, cte, pipe, trials


def test_cohorts_come_from_training_identities(small_world):
    ctr, _, pipe, _ = small_world
    assert len(pipe.cohorts) == 8
    train_descs = [pipe.describe(im).regions.tobytes() for im in ctr.images]
    assert all(c.regions.tobytes() in train_descs for c in pipe.cohorts.descriptors)


def test_too_few_cohort_identities(small_world):
    ctr, _, pipe, _ = small_world
    with pytest.raises(ValueError):
        LsedPipeline(encoder=pipe.encoder, n_cohorts=50).fit(ctr.images, ctr.labels)


def test_lsed_gmm_beats_chance(small_world):
    _, cte, pipe, trials = small_world
    assert run_verification(cte, pipe, trials).mean_accuracy >= 0.6


def test_robustness_zero_cell_and_trend(small_world):
    _, cte, pipe, trials = small_world
    grid = [Perturbation("shift_x", 0), Perturbation("shift_x", 2), Perturbation("shift_x", 8)]
    res = run_robustness_grid(cte, pipe, trials, grid)
    assert res[("shift_x", 0)] == res[("none", 0)]
    assert res[("shift_x", 8)] <= res[("shift_x", 2)]


def test_holistic_pca_pipeline_runs(small_world):
    ctr, cte, _, trials = small_world
    pipe = HolisticPcaPipeline().fit(ctr.images)
    assert 0.0 <= run_verification(cte, pipe, trials).mean_accuracy <= 1.0


# --- identification ------------------------------------------------------------------------------


def test_identification_exact_probe(small_world):
    _, cte, pipe, _ = small_world
    gallery = [pipe.describe(im) for im in cte.images[:8]]
    rate, preds = run_identification(gallery, cte.labels[:8], [gallery[5]], cte.labels[5:6])
    assert rate == 1.0 and preds[0] == cte.labels[5]


def test_identification_single_class(rng):
    h = b"\x00" * 8
    gallery = [FaceDescriptor(rng.random((2, 3)), "gmm", h) for _ in range(3)]
    probes = [FaceDescriptor(rng.random((2, 3)), "gmm", h) for _ in range(4)]
    rate, _ = run_identification(gallery, [7, 7, 7], probes, [7] * 4)
    assert rate == 1.0


def test_identification_matches_brute_force(small_world):
    _, cte, pipe, _ = small_world
    pick = np.isin(cte.labels, np.unique(cte.labels)[:5])
    images = [im for im, p in zip(cte.images, pick) if p]
    labels = cte.labels[pick]
    descs = [pipe.describe(im) for im in images]
    g_idx = np.arange(0, len(descs), 2)
    p_idx = np.arange(1, len(descs), 2)
    gallery = [descs[i] for i in g_idx]
    probes = [descs[i] for i in p_idx]
    rate, preds = run_identification(gallery, labels[g_idx], probes, labels[p_idx])
    brute = [labels[g_idx][int(np.argmin([raw_distance(p, g) for g in gallery]))] for p in probes]
    np.testing.assert_array_equal(preds, brute)
    assert rate == np.mean(np.array(brute) == labels[p_idx])


def test_identification_src_and_raw_l2(rng):
    centres = rng.standard_normal((4, 20)) * 3
    gallery = np.vstack([c + 0.1 * rng.standard_normal((2, 20)) for c in centres])
    labels = np.repeat(np.arange(4), 2)
    probes = centres + 0.1 * rng.standard_normal((4, 20))
    for method in ("src", "raw_l2"):
        rate, _ = run_identification(gallery, labels, probes, np.arange(4), method)
        assert rate == 1.0


def test_identification_open_probe_rejected(rng):
    with pytest.raises(ValueError):
        run_identification(np.eye(3), [0, 1, 2], np.eye(3)[:1], [9], "raw_l2")


# --- synthetic classes ---------------------------------------------------------------------------


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticClassConfig(num_classes=10, train_classes=10)


def test_synthetic_mean_gap():
    cfg = SyntheticClassConfig()
    means = ev.synthetic_class_means(cfg, np.random.default_rng(0))
    d2 = ((means[:, None] - means[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    assert np.sqrt(d2.min()) == pytest.approx(12 * cfg.min_std)
    assert len({m.tobytes() for m in means}) == cfg.num_classes


def test_small_synthetic_experiment_deterministic():
    cfg = SyntheticClassConfig(num_classes=40, samples_per_class=10, train_classes=10, std_grid=(1.0, 64.0), pairs_per_fold=20)
    a, b = run_synthetic_class_experiment(cfg), run_synthetic_class_experiment(cfg)
    assert a.to_csv() == b.to_csv()
    assert a.baseline[0] >= 0.99
    assert len(a.to_csv().splitlines()) == 3


# --- timing ---------------------------------------------------------------------------------------


def test_timing_bench_smoke():
    corpus = make_synthetic_corpus(3, 1)
    feats = harvest_patch_features(corpus.images, max_patches=500)
    encs = {"gmm": train_encoder("gmm", feats, 4, max_iters=5), "sann": train_encoder("sann", feats, 4, max_epochs=3)}
    report = run_timing_bench(encs, corpus.images, gallery_sizes=(5, 10), repeats=2, id_repeats=1)
    assert set(report.descriptor_seconds) == {"gmm", "sann"}
    assert report.set_matching_calls == {"hausdorff": 20, "mean_descriptor": 1}
    assert len(report.identification_seconds["lsed_nn"]) == 2
    assert "set matching" in report.summary()
