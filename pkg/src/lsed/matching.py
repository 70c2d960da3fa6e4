"""Distances and decision rules between descriptors, codes and image sets.

Every score here is a distance: smaller means more alike.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .descriptors import FaceDescriptor, mean_set_descriptor
from .dictionary import AtomDictionary
from .encoding import SUPPORT_THRESHOLD, L1EncoderConfig, encode_l1

REJECT = None


class IncompatibleDescriptors(ValueError):
    pass


def _check_pair(a: FaceDescriptor, b: FaceDescriptor):
    if not a.compatible_with(b):
        raise IncompatibleDescriptors(
            f"descriptors differ in shape/encoder/config: {a.regions.shape} {a.encoder_kind} "
            f"vs {b.regions.shape} {b.encoder_kind}"
        )


def raw_distance(a: FaceDescriptor, b: FaceDescriptor) -> float:
    """Mean over regions of the L1 distance between pooled region vectors."""
    _check_pair(a, b)
    return float(np.abs(a.regions - b.regions).sum() / a.n_regions)


@dataclass(frozen=True)
class CohortSet:
    descriptors: tuple

    def __post_init__(self):
        if not self.descriptors:
            raise ValueError("cohort set is empty")
        first = self.descriptors[0]
        for d in self.descriptors[1:]:
            if not first.compatible_with(d):
                raise IncompatibleDescriptors("cohort descriptors are not homogeneous")
        object.__setattr__(self, "descriptors", tuple(self.descriptors))
        object.__setattr__(self, "_stack", np.array([d.regions for d in self.descriptors]))

    def __len__(self):
        return len(self.descriptors)

    def distance_sum(self, a: FaceDescriptor) -> float:
        """Sum of raw distances from ``a`` to every cohort descriptor."""
        _check_pair(a, self.descriptors[0])
        return float(np.abs(self._stack - a.regions).sum() / a.n_regions)


def cohort_normalized_score(a: FaceDescriptor, b: FaceDescriptor, cohorts: CohortSet) -> float:
    """Raw distance divided by both faces' summed distances to the cohort."""
    raw = raw_distance(a, b)
    denom = cohorts.distance_sum(a) + cohorts.distance_sum(b)
    if denom < 1e-12:
        raise ValueError("degenerate cohort: summed cohort distance is zero")
    return raw / denom


def same_person(score: float, tau: float) -> bool:
    return score <= tau


def sr_similarity(a, b, kind: str = "euclidean", threshold: float = SUPPORT_THRESHOLD) -> float:
    """Distance between two sparse codes.

    ``euclidean`` is the L2 norm of the difference; ``hamming`` counts the
    entries where exactly one of the codes is non-zero.
    """
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"code lengths differ: {a.shape} vs {b.shape}")
    if kind == "euclidean":
        return float(np.linalg.norm(a - b))
    if kind == "hamming":
        return float(np.count_nonzero((np.abs(a) > threshold) != (np.abs(b) > threshold)))
    raise ValueError(f"unknown distance {kind!r}")


# --- residual-based classifiers ------------------------------------------------


@dataclass(frozen=True)
class LabeledDictionary:
    """Gallery dictionary: unit-norm atoms (columns) with one class label each."""

    atoms: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        D = _gallery_dictionary(self.atoms).atoms
        labels = np.asarray(self.labels)
        if labels.shape != (D.shape[1],):
            raise ValueError("need exactly one label per atom")
        object.__setattr__(self, "atoms", D)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_samples(cls, samples, labels) -> "LabeledDictionary":
        """Build from gallery feature vectors given as rows."""
        cols = np.asarray(samples, dtype=np.float64).T
        norms = np.linalg.norm(cols, axis=0)
        if np.any(norms == 0):
            raise ValueError("gallery contains a zero sample")
        return cls(cols / norms, labels)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def dictionary(self) -> AtomDictionary:
        return _gallery_dictionary(self.atoms)


def _gallery_dictionary(atoms) -> AtomDictionary:
    # galleries are often undercomplete (raw+l2 even requires it), so no warning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return AtomDictionary(atoms)


def class_residuals(gallery: LabeledDictionary, x, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Residual ``||x - D delta_i(alpha)||^2`` for every class, in sorted class order."""
    classes = gallery.classes
    x = np.asarray(x, dtype=np.float64)
    res = np.empty(len(classes))
    for k, c in enumerate(classes):
        keep = np.where(gallery.labels == c, alpha, 0.0)
        r = x - gallery.atoms @ keep
        res[k] = r @ r
    return classes, res


def src_classify(
    gallery: LabeledDictionary,
    x,
    cfg: L1EncoderConfig = L1EncoderConfig(),
    reject_threshold: float | None = None,
):
    """Sparse-representation classification.

    Returns ``(label, residuals)``; ``label`` is ``None`` when a reject
    threshold is given and the smallest residual exceeds it. Ties go to the
    lowest class label.
    """
    alpha = encode_l1(gallery.dictionary, x, cfg).values
    classes, res = class_residuals(gallery, x, alpha)
    k = int(np.argmin(res))
    if reject_threshold is not None and res[k] > reject_threshold:
        return REJECT, res
    return classes[k], res


def qr_least_squares(D, x) -> np.ndarray:
    """``R^{-1} Q^T x`` from the thin QR factorisation of ``D``."""
    Q, R = np.linalg.qr(D, mode="reduced")
    diag = np.abs(np.diag(R))
    if D.shape[1] > D.shape[0] or diag.min(initial=np.inf) <= 1e-10 * max(diag.max(initial=0), 1.0):
        raise np.linalg.LinAlgError(
            f"gallery matrix {D.shape} is rank deficient; QR least squares needs full column rank"
        )
    return solve_triangular(R, Q.T @ x)


def raw_l2_classify(gallery: LabeledDictionary, x):
    """Least-squares coding over the whole gallery, then the class-residual rule."""
    x = np.asarray(x, dtype=np.float64)
    alpha = qr_least_squares(gallery.atoms, x)
    classes, res = class_residuals(gallery, x, alpha)
    return classes[int(np.argmin(res))], res


# --- set matching -------------------------------------------------------------


def directed_hausdorff(A: Sequence, B: Sequence, pairwise: Callable) -> float:
    """``max_a min_b s(a, b)``."""
    if len(A) == 0 or len(B) == 0:
        raise ValueError("Hausdorff distance needs non-empty sets")
    return max(min(pairwise(a, b) for b in B) for a in A)


def hausdorff_distance(A: Sequence, B: Sequence, pairwise: Callable = raw_distance) -> float:
    """Symmetric Hausdorff distance under an arbitrary pairwise score.

    Each pair is scored once; both directed distances are read off the same
    ``len(A) x len(B)`` grid.
    """
    if len(A) == 0 or len(B) == 0:
        raise ValueError("Hausdorff distance needs non-empty sets")
    grid = np.array([[pairwise(a, b) for b in B] for a in A], dtype=np.float64)
    return float(max(grid.min(axis=1).max(), grid.min(axis=0).max()))


def mean_descriptor_distance(A: Sequence, B: Sequence, pairwise: Callable = raw_distance) -> float:
    """Compare two sets through their mean descriptors (a single pairwise call)."""
    return pairwise(mean_set_descriptor(A), mean_set_descriptor(B))


class CountingScore:
    """Wrap a pairwise score and count how often it is evaluated."""

    def __init__(self, fn: Callable = raw_distance):
        self.fn = fn
        self.calls = 0

    def __call__(self, a, b):
        self.calls += 1
        return self.fn(a, b)


# --- reports ------------------------------------------------------------------


def score_rows_to_csv(rows, tau: float | None = None) -> str:
    """``probe_id,gallery_id,score,decision`` lines; decision is same/different."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["probe_id", "gallery_id", "score", "decision"])
    for probe, gallery, score in rows:
        if tau is None:
            decision = ""
        else:
            decision = "same" if same_person(score, tau) else "different"
        w.writerow([probe, gallery, repr(float(score)), decision])
    return buf.getvalue()
