"""Verification/identification protocols and the experiment harnesses.

Verification follows a development/evaluation split: for every fold the
decision threshold is fitted at the equal-error point of the development
trials only and then applied to the held-out evaluation trials, where
accuracy is ``1 - (FAR + FRR) / 2``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .descriptors import (
    FaceDescriptor,
    PcaModel,
    holistic_dictionary,
    lsed_descriptor,
    pca_project,
    pca_train,
)
from .dictionary import KsvdConfig, SannConfig, em_train, ksvd_train, sann_train
from .encoding import Encoder, L1EncoderConfig, L1Encoder, make_encoder
from .imaging import (
    PatchGridConfig,
    Perturbation,
    SynthParams,
    image_features,
    perturb,
    robustness_grid,
    synth_identity_image,
)
from .matching import (
    CohortSet,
    CountingScore,
    LabeledDictionary,
    cohort_normalized_score,
    hausdorff_distance,
    raw_distance,
    raw_l2_classify,
    src_classify,
    sr_similarity,
)

log = logging.getLogger(__name__)


# --- trials and thresholds ----------------------------------------------------


@dataclass(frozen=True)
class TrialList:
    """Sample-index pairs with ground truth and a fold id per trial."""

    first: np.ndarray
    second: np.ndarray
    same: np.ndarray
    fold: np.ndarray

    def __len__(self):
        return len(self.same)

    @property
    def n_folds(self) -> int:
        return int(self.fold.max()) + 1 if len(self.fold) else 0

    def subset(self, mask) -> "TrialList":
        return TrialList(self.first[mask], self.second[mask], self.same[mask], self.fold[mask])


def make_trials(labels, n_folds: int = 5, pairs_per_fold: int = 100, seed: int = 0) -> TrialList:
    """Balanced verification trials with identity-disjoint folds.

    Identities are shuffled into ``n_folds`` groups. Each fold gets
    ``pairs_per_fold`` matched pairs (two different samples of one identity)
    and as many mismatched pairs (samples of two different identities), all
    drawn within the fold's identity group.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    ids = np.unique(labels)
    if ids.size < 2 * n_folds:
        raise ValueError(f"{ids.size} identities cannot fill {n_folds} folds of mismatched pairs")
    groups = np.array_split(rng.permutation(ids), n_folds)
    by_id = {i: np.flatnonzero(labels == i) for i in ids}
    first, second, same, fold = [], [], [], []
    for k, group in enumerate(groups):
        multi = [i for i in group if by_id[i].size >= 2]
        if not multi:
            raise ValueError(f"fold {k} has no identity with two samples")
        for _ in range(pairs_per_fold):
            ident = multi[rng.integers(len(multi))]
            a, b = rng.choice(by_id[ident], size=2, replace=False)
            first.append(a), second.append(b), same.append(True), fold.append(k)
        for _ in range(pairs_per_fold):
            ia, ib = rng.choice(group, size=2, replace=False)
            first.append(rng.choice(by_id[ia])), second.append(rng.choice(by_id[ib]))
            same.append(False), fold.append(k)
    return TrialList(np.array(first), np.array(second), np.array(same), np.array(fold))


def error_rates(scores, same, tau: float) -> tuple[float, float]:
    """``(FAR, FRR)`` when pairs with ``score <= tau`` are accepted as same."""
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    accept = scores <= tau
    far = float(accept[~same].mean()) if (~same).any() else 0.0
    frr = float((~accept[same]).mean()) if same.any() else 0.0
    return far, frr


def accuracy(scores, same, tau: float) -> float:
    far, frr = error_rates(scores, same, tau)
    return 1.0 - 0.5 * (far + frr)


def threshold_grid(scores) -> np.ndarray:
    """Midpoints between adjacent distinct scores, padded below and above."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    pad = (u[-1] - u[0]) if u.size > 1 else 1.0
    ext = np.concatenate([[u[0] - pad], u, [u[-1] + pad]])
    return 0.5 * (ext[:-1] + ext[1:])


def eer_threshold(scores, same) -> float:
    """Threshold minimising ``|FAR - FRR|`` on a development score list.

    Candidates are :func:`threshold_grid` points; ties resolve to the lowest.
    """
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if same.all() or not same.any():
        raise ValueError("EER threshold needs both matched and mismatched trials")
    grid = threshold_grid(scores)
    gen = np.sort(scores[same])
    imp = np.sort(scores[~same])
    false_accepts = np.searchsorted(imp, grid, side="right")
    false_rejects = gen.size - np.searchsorted(gen, grid, side="right")
    # |FAR - FRR| scaled by both class sizes, so ties compare exactly
    gap = np.abs(false_accepts * gen.size - false_rejects * imp.size)
    return float(grid[int(np.argmin(gap))])


@dataclass
class VerificationResult:
    fold_accuracy: list
    thresholds: list

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracy))


def evaluate_folds(trials: TrialList, scores) -> VerificationResult:
    """Per fold: threshold from the other folds' trials, accuracy on this fold's."""
    scores = np.asarray(scores, dtype=np.float64)
    accs, taus = [], []
    for k in range(trials.n_folds):
        evaluation = trials.fold == k
        dev = ~evaluation
        tau = eer_threshold(scores[dev], trials.same[dev])
        taus.append(tau)
        accs.append(accuracy(scores[evaluation], trials.same[evaluation], tau))
    return VerificationResult(accs, taus)


# --- corpora and pipelines ---------------------------------------------------------


@dataclass
class Corpus:
    images: list
    labels: np.ndarray

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx)
        return Corpus([self.images[i] for i in idx], self.labels[idx])


def make_synthetic_corpus(
    n_identities: int, n_variations: int, params: SynthParams = SynthParams(), seed: int = 0
) -> Corpus:
    """Images of ``n_identities`` synthetic people, ``n_variations`` each."""
    images, labels = [], []
    for ident in range(n_identities):
        for v in range(n_variations):
            images.append(synth_identity_image(seed * 100_003 + ident, v, params))
            labels.append(ident)
    return Corpus(images, np.array(labels))


def split_identities(corpus: Corpus, n_train: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sample indices of ``n_train`` training identities and of the rest."""
    ids = np.unique(corpus.labels)
    if n_train >= ids.size:
        raise ValueError("need identities left over for testing")
    train_ids = np.random.default_rng(seed).permutation(ids)[:n_train]
    is_train = np.isin(corpus.labels, train_ids)
    return np.flatnonzero(is_train), np.flatnonzero(~is_train)


class LsedPipeline:
    """Patch-level sparse encoder + pooled descriptor + cohort-normalised L1 score.

    ``encoder_kind`` is one of ``gmm``, ``sann`` or ``l1``; an already trained
    encoder may be supplied instead. Cohort faces come from the training
    identities only, one image per identity.
    """

    def __init__(
        self,
        encoder_kind: str = "gmm",
        n_codes: int = 64,
        grid: PatchGridConfig = PatchGridConfig(),
        n_cohorts: int = 32,
        seed: int = 0,
        max_patches: int = 20_000,
        encoder: Encoder | None = None,
        l1_cfg: L1EncoderConfig = L1EncoderConfig(),
        threads: int = 1,
    ):
        self.encoder_kind = encoder_kind
        self.n_codes = n_codes
        self.grid = grid
        self.n_cohorts = n_cohorts
        self.seed = seed
        self.max_patches = max_patches
        self.encoder = encoder
        self.l1_cfg = l1_cfg
        self.threads = threads
        self.cohorts: CohortSet | None = None

    def fit(self, images, labels) -> "LsedPipeline":
        labels = np.asarray(labels)
        if self.encoder is None:
            feats = harvest_patch_features(images, self.grid, self.max_patches, self.seed)
            self.encoder = train_encoder(
                self.encoder_kind, feats, self.n_codes, self.seed, l1_cfg=self.l1_cfg
            )
        if self.n_cohorts:
            ids = np.unique(labels)
            if ids.size < self.n_cohorts:
                raise ValueError(
                    f"only {ids.size} training identities for {self.n_cohorts} disjoint cohort faces"
                )
            rng = np.random.default_rng(self.seed + 1)
            chosen = rng.choice(ids, size=self.n_cohorts, replace=False)
            picks = [int(rng.choice(np.flatnonzero(labels == i))) for i in chosen]
            self.cohorts = CohortSet(tuple(self.describe(images[i]) for i in picks))
        return self

    def describe(self, image) -> FaceDescriptor:
        return lsed_descriptor(image, self.encoder, self.grid, threads=self.threads)

    def score(self, a: FaceDescriptor, b: FaceDescriptor) -> float:
        if self.cohorts is None:
            return raw_distance(a, b)
        return cohort_normalized_score(a, b, self.cohorts)


class HolisticSrPipeline:
    """PCA features coded over a dictionary of training faces, compared as raw codes."""

    def __init__(self, energy: float = 0.99, distance: str = "hamming", l1_cfg: L1EncoderConfig = L1EncoderConfig()):
        self.energy = energy
        self.distance = distance
        self.l1_cfg = l1_cfg
        self.pca: PcaModel | None = None
        self.encoder: L1Encoder | None = None

    def fit(self, images, labels=None) -> "HolisticSrPipeline":
        self.pca = pca_train(images, self.energy)
        feats = np.array([pca_project(self.pca, im) for im in images])
        self.encoder = L1Encoder(holistic_dictionary(feats), self.l1_cfg)
        return self

    def describe(self, image) -> np.ndarray:
        return self.encoder.encode(pca_project(self.pca, image)).values

    def score(self, a, b) -> float:
        return sr_similarity(a, b, self.distance)


class HolisticPcaPipeline:
    """PCA features compared by Euclidean distance (no sparse coding)."""

    def __init__(self, energy: float = 0.99):
        self.energy = energy
        self.pca: PcaModel | None = None

    def fit(self, images, labels=None) -> "HolisticPcaPipeline":
        self.pca = pca_train(images, self.energy)
        return self

    def describe(self, image) -> np.ndarray:
        return pca_project(self.pca, image)

    def score(self, a, b) -> float:
        return float(np.linalg.norm(a - b))


def harvest_patch_features(images, grid: PatchGridConfig = PatchGridConfig(), max_patches: int = 20_000, seed: int = 0):
    """DCT features of patches from ``images``, randomly subsampled to ``max_patches``."""
    feats = np.vstack([np.vstack(image_features(im, grid)) for im in images])
    if feats.shape[0] > max_patches:
        keep = np.random.default_rng(seed).choice(feats.shape[0], size=max_patches, replace=False)
        feats = feats[np.sort(keep)]
    return feats


def train_encoder(kind: str, feats, n_codes: int, seed: int = 0, l1_cfg=L1EncoderConfig(), **kwargs) -> Encoder:
    """Train the model behind one encoder kind on patch features."""
    if kind == "gmm":
        model = em_train(feats, n_codes, seed=seed, **kwargs)
    elif kind == "sann":
        model = sann_train(feats, SannConfig(hidden_units=n_codes, seed=seed, **kwargs))
    elif kind == "l1":
        model = ksvd_train(feats, KsvdConfig(num_atoms=n_codes, seed=seed, **kwargs))
    else:
        raise ValueError(f"unknown encoder kind {kind!r}")
    return make_encoder(model, l1_cfg)


def score_trials(trials: TrialList, describe_first: Callable, describe_second: Callable, score: Callable) -> np.ndarray:
    """Describe every referenced sample once, then score each trial."""
    cache_a: dict = {}
    cache_b: dict = {}
    out = np.empty(len(trials))
    for t, (i, j) in enumerate(zip(trials.first, trials.second)):
        if i not in cache_a:
            cache_a[i] = describe_first(i)
        if j not in cache_b:
            cache_b[j] = describe_second(j)
        out[t] = score(cache_a[i], cache_b[j])
    return out


def run_verification(corpus: Corpus, pipeline, trials: TrialList) -> VerificationResult:
    """Score all trials with a fitted pipeline and evaluate fold by fold."""
    describe = lambda i: pipeline.describe(corpus.images[i])  # noqa: E731
    cache: dict = {}

    def cached(i):
        if i not in cache:
            cache[i] = describe(i)
        return cache[i]

    scores = score_trials(trials, cached, cached, pipeline.score)
    return evaluate_folds(trials, scores)


# --- identification ---------------------------------------------------------------


def run_identification(gallery, gallery_labels, probes, probe_labels, method: str = "lsed_nn", l1_cfg=L1EncoderConfig()):
    """Closed-set rank-1 identification rate and the predicted labels.

    ``lsed_nn`` takes :class:`FaceDescriptor` lists and picks the nearest
    gallery descriptor (raw distance, lowest index on ties). ``src`` and
    ``raw_l2`` take holistic feature vectors and use the class-residual rule.
    """
    gallery_labels = np.asarray(gallery_labels)
    probe_labels = np.asarray(probe_labels)
    missing = set(probe_labels.tolist()) - set(gallery_labels.tolist())
    if missing:
        raise ValueError(f"probe identities absent from the gallery: {sorted(missing)}")
    preds = []
    if method == "lsed_nn":
        stack = np.array([g.regions for g in gallery])
        for p in probes:
            if not p.compatible_with(gallery[0]):
                raise ValueError("probe descriptor incompatible with gallery")
            dist = np.abs(stack - p.regions).sum(axis=(1, 2)) / p.n_regions
            preds.append(gallery_labels[int(np.argmin(dist))])
    elif method in ("src", "raw_l2"):
        lab = LabeledDictionary.from_samples(np.asarray(gallery, dtype=np.float64), gallery_labels)
        for p in probes:
            if method == "src":
                label, _ = src_classify(lab, p, l1_cfg)
            else:
                label, _ = raw_l2_classify(lab, p)
            preds.append(label)
    else:
        raise ValueError(f"unknown identification method {method!r}")
    preds = np.array(preds)
    return float(np.mean(preds == probe_labels)), preds


# --- synthetic class experiment --------------------------------------------------------


@dataclass(frozen=True)
class SyntheticClassConfig:
    num_classes: int = 232
    dim: int = 16
    samples_per_class: int = 128
    train_classes: int = 32
    # class std as multiples of the smallest one; the nearest class means sit
    # 12 smallest-stds apart
    std_grid: tuple = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
    mean_radius: float = 1.0
    n_folds: int = 5
    pairs_per_fold: int = 100
    epsilon: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.train_classes >= self.num_classes:
            raise ValueError("train_classes must be smaller than num_classes")
        if 2**self.dim < self.num_classes:
            raise ValueError("too few orthants for distinct class means")

    @property
    def min_std(self) -> float:
        # means are +-s per axis, nearest pair differs by 2 s on one axis
        return 2.0 * self.mean_radius / np.sqrt(self.dim) / 12.0


def synthetic_class_means(cfg: SyntheticClassConfig, rng) -> np.ndarray:
    """Distinct random orthant corners of a cube, scaled onto the mean radius."""
    seen: set = set()
    rows = []
    while len(rows) < cfg.num_classes:
        signs = rng.choice([-1.0, 1.0], size=cfg.dim)
        key = signs.tobytes()
        if key in seen:
            continue
        seen.add(key)
        rows.append(signs)
    return np.array(rows) * cfg.mean_radius / np.sqrt(cfg.dim)


@dataclass
class SyntheticClassResult:
    stds: list
    baseline: list
    sparse: list
    baseline_folds: list = field(default_factory=list)
    sparse_folds: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["std,baseline_euclidean,holistic_sr_hamming"]
        for s, b, h in zip(self.stds, self.baseline, self.sparse):
            lines.append(f"{s!r},{b!r},{h!r}")
        return "\n".join(lines) + "\n"


def run_synthetic_class_experiment(cfg: SyntheticClassConfig = SyntheticClassConfig()) -> SyntheticClassResult:
    """Euclidean baseline vs holistic sparse codes under growing class variance.

    Class means stay fixed while the class spread grows. For each spread the
    training classes' samples form the dictionary and the held-out classes
    supply identity-disjoint verification folds.
    """
    rng = np.random.default_rng(cfg.seed)
    means = synthetic_class_means(cfg, rng)
    noise = rng.standard_normal((cfg.num_classes, cfg.samples_per_class, cfg.dim))
    order = rng.permutation(cfg.num_classes)
    train_cls, test_cls = order[: cfg.train_classes], order[cfg.train_classes :]
    test_labels = np.repeat(np.arange(test_cls.size), cfg.samples_per_class)
    trials = make_trials(test_labels, cfg.n_folds, cfg.pairs_per_fold, seed=cfg.seed + 1)
    l1_cfg = L1EncoderConfig(epsilon=cfg.epsilon)

    result = SyntheticClassResult([], [], [])
    for mult in cfg.std_grid:
        std = mult * cfg.min_std
        data = means[:, None, :] + std * noise
        train = data[train_cls].reshape(-1, cfg.dim)
        test = data[test_cls].reshape(-1, cfg.dim)
        encoder = L1Encoder(holistic_dictionary(train), l1_cfg)
        codes: dict = {}

        def code(i):
            if i not in codes:
                codes[i] = encoder.encode(test[i]).values
            return codes[i]

        base_scores = np.linalg.norm(test[trials.first] - test[trials.second], axis=1)
        sr_scores = score_trials(trials, code, code, lambda a, b: sr_similarity(a, b, "hamming"))
        base = evaluate_folds(trials, base_scores)
        sr = evaluate_folds(trials, sr_scores)
        log.info("std %.4g baseline %.3f sparse %.3f", std, base.mean_accuracy, sr.mean_accuracy)
        result.stds.append(float(std))
        result.baseline.append(base.mean_accuracy)
        result.sparse.append(sr.mean_accuracy)
        result.baseline_folds.append(base.fold_accuracy)
        result.sparse_folds.append(sr.fold_accuracy)
    return result


# --- robustness grid ----------------------------------------------------------------


def run_robustness_grid(
    corpus: Corpus, pipeline, trials: TrialList, grid: Sequence[Perturbation] | None = None
) -> dict:
    """Mean accuracy per perturbation cell; the second image of every pair is perturbed.

    The result maps ``(kind, magnitude)`` to accuracy and always includes the
    unperturbed cell ``("none", 0)``.
    """
    grid = robustness_grid() if grid is None else list(grid)
    cache: dict = {}

    def clean(i):
        if i not in cache:
            cache[i] = pipeline.describe(corpus.images[i])
        return cache[i]

    out = {}
    scores = score_trials(trials, clean, clean, pipeline.score)
    out[("none", 0)] = evaluate_folds(trials, scores).mean_accuracy
    for p in grid:
        moved: dict = {}

        def shifted(j, p=p, moved=moved):
            if j not in moved:
                moved[j] = pipeline.describe(perturb(corpus.images[j], p))
            return moved[j]

        scores = score_trials(trials, clean, shifted, pipeline.score)
        out[(p.kind, p.magnitude)] = evaluate_folds(trials, scores).mean_accuracy
        log.info("robustness %s %s: %.3f", p.kind, p.magnitude, out[(p.kind, p.magnitude)])
    return out


def robustness_table(results: dict) -> str:
    lines = ["kind,magnitude,accuracy"]
    for (kind, mag), acc in results.items():
        lines.append(f"{kind},{mag},{acc!r}")
    return "\n".join(lines) + "\n"


# --- timing -------------------------------------------------------------------------


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


@dataclass
class TimingReport:
    descriptor_seconds: dict
    identification_seconds: dict  # method -> list of per-probe seconds, one per gallery size
    gallery_sizes: list
    set_matching_calls: dict

    def ratio(self, slow: str, fast: str) -> float:
        return self.descriptor_seconds[slow] / self.descriptor_seconds[fast]

    def slope(self, method: str) -> float:
        """Least-squares slope of per-probe time against gallery size."""
        return float(np.polyfit(self.gallery_sizes, self.identification_seconds[method], 1)[0])

    def summary(self) -> str:
        lines = ["descriptor generation (median ms per image)"]
        for k, v in self.descriptor_seconds.items():
            lines.append(f"  {k:>6}: {1000 * v:10.2f}")
        for method, times in self.identification_seconds.items():
            lines.append(f"per-probe identification, {method} (ms)")
            for n, t in zip(self.gallery_sizes, times):
                lines.append(f"  gallery {n:>6}: {1000 * t:10.3f}")
        lines.append("set matching pairwise calls: " + ", ".join(f"{k}={v}" for k, v in self.set_matching_calls.items()))
        return "\n".join(lines)


def run_timing_bench(
    encoders: dict,
    images: Sequence,
    gallery_sizes: Sequence[int] = (50, 100, 200, 400),
    repeats: int = 20,
    grid: PatchGridConfig = PatchGridConfig(),
    id_repeats: int = 5,
    seed: int = 0,
) -> TimingReport:
    """Wall-clock medians for descriptor generation and per-probe identification.

    Per-encoder descriptor timing cycles through ``images``. Identification
    galleries are built from random descriptors/features of the right shape.
    Set matching is counted, not timed.
    """
    desc_t = {}
    for name, enc in encoders.items():
        it = iter(range(10**9))
        desc_t[name] = _median_time(lambda: lsed_descriptor(images[next(it) % len(images)], enc, grid), repeats)

    rng = np.random.default_rng(seed)
    first = next(iter(encoders.values()))
    probe = lsed_descriptor(images[0], first, grid)
    id_t: dict = {"lsed_nn": [], "src": []}
    for n in gallery_sizes:
        labels = np.arange(n)
        gallery = [FaceDescriptor(rng.random(probe.regions.shape), probe.encoder_kind, probe.config_hash) for _ in range(n)]
        gallery[0] = probe
        id_t["lsed_nn"].append(
            _median_time(lambda: run_identification(gallery, labels, [probe], labels[:1], "lsed_nn"), id_repeats)
        )
        feats = rng.standard_normal((n, 32))
        id_t["src"].append(
            _median_time(lambda: run_identification(feats, labels, feats[:1], labels[:1], "src"), id_repeats)
        )

    counter_h = CountingScore(raw_distance)
    counter_m = CountingScore(raw_distance)
    set_a = [probe] * 4
    set_b = [probe] * 5
    hausdorff_distance(set_a, set_b, counter_h)
    from .matching import mean_descriptor_distance

    mean_descriptor_distance(set_a, set_b, counter_m)
    calls = {"hausdorff": counter_h.calls, "mean_descriptor": counter_m.calls}
    return TimingReport(desc_t, id_t, list(gallery_sizes), calls)
