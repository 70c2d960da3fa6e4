"""Training of the three patch encoder models.

* K-SVD atom dictionary, coded with orthogonal matching pursuit
* sparse autoencoder (sigmoid encoder, affine decoder, KL sparsity penalty)
* diagonal-covariance Gaussian mixture (k-means initialisation + EM)

Sample matrices are ``(n_samples, d)`` with one sample per row.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

log = logging.getLogger(__name__)

OMP_TOL = 1e-9
COVARIANCE_FLOOR = 1e-6
RHO_CLAMP = 1e-6


# --- models ----------------------------------------------------------------


@dataclass(frozen=True)
class AtomDictionary:
    """Dictionary ``D`` of shape ``(d, N)``; each column is a unit-norm atom."""

    atoms: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.atoms, dtype=np.float64)
        if D.ndim != 2:
            raise ValueError("atoms must be a (d, N) matrix")
        if not np.all(np.isfinite(D)):
            raise ValueError("dictionary contains non-finite entries")
        norms = np.linalg.norm(D, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("dictionary atoms must have unit L2 norm")
        if D.shape[1] < D.shape[0]:
            warnings.warn(
                f"dictionary is undercomplete ({D.shape[1]} atoms in {D.shape[0]} dims)",
                stacklevel=2,
            )
        object.__setattr__(self, "atoms", D)

    @property
    def dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    @classmethod
    def from_columns(cls, columns) -> "AtomDictionary":
        """Normalise arbitrary non-zero columns into a dictionary."""
        D = np.asarray(columns, dtype=np.float64)
        norms = np.linalg.norm(D, axis=0)
        if np.any(norms == 0):
            raise ValueError("cannot normalise a zero column")
        return cls(D / norms)


@dataclass(frozen=True)
class AutoencoderModel:
    """Sparse autoencoder: ``W`` (d, N), ``b`` (N,), ``decode_weights`` (N, d), ``decode_bias`` (d,)."""

    weights: np.ndarray
    bias: np.ndarray
    decode_weights: np.ndarray
    decode_bias: np.ndarray

    def __post_init__(self):
        d, n = np.shape(self.weights)
        shapes = {
            "weights": (d, n),
            "bias": (n,),
            "decode_weights": (n, d),
            "decode_bias": (d,),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class MixtureModel:
    """Diagonal-covariance GMM: ``weights`` (N,), ``means`` (N, d), ``covariances`` (N, d)."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.covariances, dtype=np.float64)
        if mu.ndim != 2 or w.shape != (mu.shape[0],) or var.shape != mu.shape:
            raise ValueError("inconsistent mixture parameter shapes")
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("covariances must be positive and finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


# --- orthogonal matching pursuit ------------------------------------------


def omp(dictionary: AtomDictionary, x, n_nonzero: int, tol: float = OMP_TOL) -> np.ndarray:
    """Greedy sparse code of one vector with at most ``n_nonzero`` atoms."""
    return omp_batch(dictionary, np.atleast_2d(x), n_nonzero, tol)[0]


def omp_batch(dictionary: AtomDictionary, X, n_nonzero: int, tol: float = OMP_TOL) -> np.ndarray:
    """OMP over the rows of ``X``; returns codes of shape ``(n_samples, N)``.

    Each step picks the atom with largest absolute correlation to the current
    residual (lowest index on ties) and refits all selected coefficients by
    least squares. A sample stops early once its residual norm drops to
    ``tol``.
    """
    D = dictionary.atoms
    d, n_atoms = D.shape
    if n_nonzero > d:
        raise ValueError(f"sparsity target {n_nonzero} exceeds signal dimension {d}")
    if n_nonzero < 1:
        raise ValueError("sparsity target must be at least 1")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"samples must have shape (n, {d})")
    M = X.shape[0]
    G = D.T @ D
    proj = X @ D
    codes = np.zeros((M, n_atoms))
    support = np.zeros((M, n_nonzero), dtype=np.int64)
    residual = X.copy()
    active = np.linalg.norm(residual, axis=1) > tol
    rows = np.arange(M)
    for k in range(n_nonzero):
        idx = rows[active]
        if idx.size == 0:
            break
        corr = np.abs(residual[idx] @ D)
        if k:
            np.put_along_axis(corr, support[idx, :k], -1.0, axis=1)
        support[idx, k] = np.argmax(corr, axis=1)
        S = support[idx, : k + 1]
        gram = G[S[:, :, None], S[:, None, :]]
        rhs = np.take_along_axis(proj[idx], S, axis=1)
        try:
            coef = np.linalg.solve(gram, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            coef = (np.linalg.pinv(gram) @ rhs[..., None])[..., 0]
        codes[idx] = 0.0
        codes[idx[:, None], S] = coef
        residual[idx] = X[idx] - codes[idx] @ D.T
        active[idx] = np.linalg.norm(residual[idx], axis=1) > tol
    return codes


# --- K-SVD ----------------------------------------------------------------


@dataclass(frozen=True)
class KsvdConfig:
    num_atoms: int = 1024
    sparsity_target: int = 3
    max_iters: int = 50
    seed: int = 0
    rel_tol: float = 1e-5
    # atoms this coherent with an earlier atom, or used by fewer samples, are
    # offered a replacement that is kept only if the objective drops
    replace_coherence: float = 0.95
    replace_min_usage: int = 3

    def __post_init__(self):
        if self.num_atoms < 1:
            raise ValueError("num_atoms must be >= 1")
        if self.sparsity_target < 1:
            raise ValueError("sparsity_target must be >= 1")


@dataclass
class KsvdResult:
    dictionary: AtomDictionary
    codes: np.ndarray
    history: list


def representation_error(Y, D, codes) -> float:
    """Squared Frobenius norm of ``Y - codes @ D.T`` (samples as rows)."""
    R = np.asarray(Y) - codes @ np.asarray(D).T
    return float(np.einsum("ij,ij->", R, R))


def _row_errors(Y, D, codes):
    R = Y - codes @ D.T
    return np.einsum("ij,ij->i", R, R)


def ksvd_update(Y, D: np.ndarray, codes: np.ndarray):
    """One dictionary-update sweep; returns new ``(D, codes)``.

    Atoms are updated in index order from the rank-1 SVD of their restricted
    error matrix. An atom used by no sample is replaced by the currently
    worst-reconstructed sample.
    """
    Y = np.asarray(Y, dtype=np.float64)
    D = D.copy()
    codes = codes.copy()
    R = Y - codes @ D.T  # residual, kept current as atoms change
    reseeded: set[int] = set()
    for i in range(D.shape[1]):
        users = np.flatnonzero(codes[:, i])
        if users.size == 0:
            err = np.einsum("ij,ij->i", R, R)
            order = np.argsort(-err, kind="stable")
            pick = next((j for j in order if j not in reseeded), None)
            if pick is None or err[pick] == 0:
                continue
            reseeded.add(int(pick))
            D[:, i] = Y[pick] / np.linalg.norm(Y[pick])
            continue
        # restricted error E_i^R = residual + contribution of atom i, on its users
        E = R[users] + np.outer(codes[users, i], D[:, i])
        U, s, Vt = np.linalg.svd(E.T, full_matrices=False)
        atom = U[:, 0]
        new_coef = s[0] * Vt[0]
        D[:, i] = atom
        codes[users, i] = new_coef
        R[users] = E - np.outer(new_coef, atom)
    return D, codes


def _recode(Y, D, codes, n_nonzero):
    # fresh OMP, but never worse than the codes already held
    fresh = omp_batch(AtomDictionary(D), Y, n_nonzero)
    better = _row_errors(Y, D, fresh) <= _row_errors(Y, D, codes)
    return np.where(better[:, None], fresh, codes)


def _replace_weak_atoms(Y, D, codes, cfg: KsvdConfig):
    G = np.abs(D.T @ D)
    usage = np.count_nonzero(codes, axis=0)
    weak = [
        i
        for i in range(D.shape[1])
        if (i and G[i, :i].max() > cfg.replace_coherence) or usage[i] < cfg.replace_min_usage
    ]
    if not weak:
        return D, codes
    R = Y - codes @ D.T
    order = np.argsort(-np.einsum("ij,ij->i", R, R), kind="stable")
    D2, c2 = D.copy(), codes.copy()
    for i, j in zip(weak, order):
        norm = np.linalg.norm(R[j])
        if norm == 0:
            break
        D2[:, i] = R[j] / norm
        c2[:, i] = 0.0
    c2 = _recode(Y, D2, c2, cfg.sparsity_target)
    if representation_error(Y, D2, c2) < representation_error(Y, D, codes):
        return D2, c2
    return D, codes


def ksvd_fit(Y, cfg: KsvdConfig = KsvdConfig()) -> KsvdResult:
    """Learn a dictionary for ``Y`` (rows are samples) with K-SVD.

    Alternates OMP coding and atom-by-atom SVD updates until the relative
    objective change falls below ``cfg.rel_tol`` or ``cfg.max_iters`` sweeps
    ran. A sample's previous code is kept whenever fresh OMP does worse, and
    atom replacements are only accepted when they lower the objective, so the
    objective trace never increases.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] == 0:
        raise ValueError("K-SVD needs a non-empty (n_samples, d) sample matrix")
    M, d = Y.shape
    if cfg.sparsity_target > d:
        raise ValueError(f"sparsity target {cfg.sparsity_target} exceeds dimension {d}")
    if M < cfg.num_atoms:
        warnings.warn(f"only {M} samples for {cfg.num_atoms} atoms", stacklevel=2)
    rng = np.random.default_rng(cfg.seed)
    D = _initial_atoms(Y, cfg.num_atoms, rng)
    codes = omp_batch(AtomDictionary(D), Y, cfg.sparsity_target)
    obj = representation_error(Y, D, codes)
    history = [obj]
    for it in range(cfg.max_iters):
        D, codes = ksvd_update(Y, D, codes)
        # keep atoms exactly unit-norm against round-off
        D /= np.linalg.norm(D, axis=0)
        codes = _recode(Y, D, codes, cfg.sparsity_target)
        D, codes = _replace_weak_atoms(Y, D, codes, cfg)
        new_obj = representation_error(Y, D, codes)
        history.append(new_obj)
        log.debug("ksvd iter %d objective %.6g", it, new_obj)
        converged = obj - new_obj <= cfg.rel_tol * max(obj, 1e-300)
        obj = new_obj
        if obj <= 1e-24 or converged:
            break
    return KsvdResult(AtomDictionary(D), codes, history)


def ksvd_train(Y, cfg: KsvdConfig = KsvdConfig()) -> AtomDictionary:
    return ksvd_fit(Y, cfg).dictionary


def _initial_atoms(Y, n_atoms, rng) -> np.ndarray:
    M, d = Y.shape
    norms = np.linalg.norm(Y, axis=1)
    usable = np.flatnonzero(norms > 0)
    n_from_data = min(n_atoms, usable.size)
    picks = rng.choice(usable, size=n_from_data, replace=False)
    cols = [Y[picks].T / norms[picks]]
    if n_from_data < n_atoms:
        extra = rng.standard_normal((d, n_atoms - n_from_data))
        cols.append(extra / np.linalg.norm(extra, axis=0))
    return np.hstack(cols)


# --- k-means / EM ------------------------------------------------------------


def _sq_dists(X, C):
    # ||x||^2 - 2 x.c + ||c||^2, clipped at zero
    d2 = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def kmeans(Y, n_clusters: int, seed: int = 0, max_iters: int = 100, history: list | None = None):
    """Lloyd's k-means; returns the ``(n_clusters, d)`` centroids.

    Initial centroids are distinct random samples. A cluster that empties is
    re-seeded at the sample farthest from its own centroid. The within-cluster
    sum of squares after each iteration is appended to ``history``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    M = Y.shape[0]
    if n_clusters > M:
        raise ValueError(f"cannot form {n_clusters} clusters from {M} samples")
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    rng = np.random.default_rng(seed)
    C = Y[rng.choice(M, size=n_clusters, replace=False)].copy()
    labels = None
    for _ in range(max_iters):
        d2 = _sq_dists(Y, C)
        new_labels = np.argmin(d2, axis=1)
        own = d2[np.arange(M), new_labels]
        counts = np.bincount(new_labels, minlength=n_clusters)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            taken = set()
            for k in empty:
                order = np.argsort(-own, kind="stable")
                j = next(j for j in order if j not in taken)
                taken.add(j)
                new_labels[j] = k
                own[j] = 0.0
            counts = np.bincount(new_labels, minlength=n_clusters)
        sums = np.zeros_like(C)
        np.add.at(sums, new_labels, Y)
        C = sums / counts[:, None]
        if history is not None:
            history.append(float(np.sum((Y - C[new_labels]) ** 2)))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    return C


def _gaussian_log_terms(X, model_w, means, var):
    # log w_n + log N(x | mu_n, diag var_n) for every sample/component pair
    d = X.shape[1]
    inv = 1.0 / var
    quad = (X * X) @ inv.T - 2.0 * X @ (means * inv).T + np.sum(means * means * inv, axis=1)
    log_norm = -0.5 * (d * np.log(2 * np.pi) + np.sum(np.log(var), axis=1))
    with np.errstate(divide="ignore"):
        return np.log(model_w) + log_norm - 0.5 * np.maximum(quad, 0.0)


def mixture_log_likelihood(model: MixtureModel, Y) -> float:
    terms = _gaussian_log_terms(np.asarray(Y, dtype=np.float64), model.weights, model.means, model.covariances)
    return float(np.sum(logsumexp(terms, axis=1)))


def em_train(
    Y,
    n_components: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    covariance_floor: float = COVARIANCE_FLOOR,
    history: list | None = None,
) -> MixtureModel:
    """Fit a diagonal GMM by EM, initialised from k-means.

    Stops when the relative change of the log-likelihood drops below ``tol``.
    Log-likelihood values (one per E-step) are appended to ``history``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    M, d = Y.shape
    if M < n_components:
        raise ValueError(f"need at least {n_components} samples, got {M}")
    means = kmeans(Y, n_components, seed=seed)
    labels = np.argmin(_sq_dists(Y, means), axis=1)
    counts = np.bincount(labels, minlength=n_components).astype(np.float64)
    global_var = np.maximum(Y.var(axis=0), covariance_floor)
    var = np.tile(global_var, (n_components, 1))
    for k in np.flatnonzero(counts > 1):
        var[k] = np.maximum(Y[labels == k].var(axis=0), covariance_floor)
    counts = np.maximum(counts, 1e-12)
    weights = counts / counts.sum()

    prev = None
    for it in range(max_iters + 1):
        terms = _gaussian_log_terms(Y, weights, means, var)
        norm = logsumexp(terms, axis=1)
        ll = float(np.sum(norm))
        if history is not None:
            history.append(ll)
        log.debug("em iter %d log-likelihood %.10g", it, ll)
        if prev is not None and abs(ll - prev) <= tol * abs(prev):
            break
        if it == max_iters:
            break
        prev = ll
        resp = np.exp(terms - norm[:, None])
        Nk = resp.sum(axis=0)
        live = Nk > 1e-10
        weights = Nk / Nk.sum()
        new_means = (resp.T @ Y) / np.where(live, Nk, 1.0)[:, None]
        means = np.where(live[:, None], new_means, means)
        sq = resp.T @ (Y * Y) / np.where(live, Nk, 1.0)[:, None] - means * means
        var = np.where(live[:, None], np.maximum(sq, covariance_floor), var)
    weights = weights / weights.sum()
    return MixtureModel(weights, means, var)


# --- sparse autoencoder --------------------------------------------------------


@dataclass(frozen=True)
class SannConfig:
    hidden_units: int = 512
    sparsity_target: float = 0.1
    sparsity_weight: float = 3.0
    weight_decay: float = 0.01
    learning_rate: float = 0.5
    max_epochs: int = 400
    min_learning_rate: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.sparsity_target < 1.0:
            raise ValueError("sparsity target must lie in (0, 1)")
        if self.sparsity_weight < 0 or self.weight_decay < 0:
            raise ValueError("sparsity weight and weight decay must be non-negative")
        if self.hidden_units < 1:
            raise ValueError("need at least one hidden unit")


def kl_sparsity(rho: float, rho_hat) -> np.ndarray:
    """Per-unit KL(rho || rho_hat) with ``rho_hat`` clamped into (delta, 1 - delta)."""
    r = np.clip(rho_hat, RHO_CLAMP, 1.0 - RHO_CLAMP)
    return rho * np.log(rho / r) + (1.0 - rho) * np.log((1.0 - rho) / (1.0 - r))


@dataclass
class SannCost:
    """Value and gradient of the autoencoder objective at one parameter point."""

    total: float
    error: float
    weight: float
    sparsity: float
    grads: AutoencoderModel | None = field(default=None, repr=False)


def sann_cost(model: AutoencoderModel, X, cfg: SannConfig, with_grad: bool = True) -> SannCost:
    """Reconstruction + weight-decay + beta * KL-sparsity cost over ``X``."""
    X = np.asarray(X, dtype=np.float64)
    M = X.shape[0]
    W, b, V, c = model.weights, model.bias, model.decode_weights, model.decode_bias
    H = expit(X @ W + b)
    diff = H @ V + c - X
    j_err = 0.5 * np.einsum("ij,ij->", diff, diff) / M
    j_w = 0.5 * cfg.weight_decay * (np.sum(W * W) + np.sum(V * V))
    rho_hat = H.mean(axis=0)
    j_sp = float(np.sum(kl_sparsity(cfg.sparsity_target, rho_hat)))
    total = j_err + j_w + cfg.sparsity_weight * j_sp
    if not with_grad:
        return SannCost(total, j_err, j_w, j_sp)
    d_out = diff / M
    gV = H.T @ d_out + cfg.weight_decay * V
    gc = d_out.sum(axis=0)
    rho = cfg.sparsity_target
    inside = (rho_hat > RHO_CLAMP) & (rho_hat < 1.0 - RHO_CLAMP)
    r = np.clip(rho_hat, RHO_CLAMP, 1.0 - RHO_CLAMP)
    d_rho = np.where(inside, -rho / r + (1.0 - rho) / (1.0 - r), 0.0)
    dH = d_out @ V.T + cfg.sparsity_weight * d_rho / M
    dZ = dH * H * (1.0 - H)
    gW = X.T @ dZ + cfg.weight_decay * W
    gb = dZ.sum(axis=0)
    return SannCost(total, j_err, j_w, j_sp, AutoencoderModel(gW, gb, gV, gc))


def sann_init(d: int, cfg: SannConfig, data_mean=None) -> AutoencoderModel:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.hidden_units
    r = np.sqrt(6.0 / (d + n + 1))
    W = rng.uniform(-r, r, size=(d, n))
    V = rng.uniform(-r, r, size=(n, d))
    c = np.zeros(d) if data_mean is None else np.asarray(data_mean, dtype=np.float64)
    return AutoencoderModel(W, np.zeros(n), V, c)


def _step(model: AutoencoderModel, grads: AutoencoderModel, lr: float) -> AutoencoderModel:
    return AutoencoderModel(
        model.weights - lr * grads.weights,
        model.bias - lr * grads.bias,
        model.decode_weights - lr * grads.decode_weights,
        model.decode_bias - lr * grads.decode_bias,
    )


def sann_train(
    Y, cfg: SannConfig = SannConfig(), history: list | None = None, init: AutoencoderModel | None = None
) -> AutoencoderModel:
    """Train the sparse autoencoder by full-batch gradient descent.

    A step that would raise the cost is rejected and the learning rate halved,
    so the recorded cost trace never increases. Training stops after
    ``cfg.max_epochs`` accepted-or-rejected steps or once the learning rate
    falls below ``cfg.min_learning_rate``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if not np.all(np.isfinite(Y)):
        raise ValueError("training samples must be finite")
    model = init if init is not None else sann_init(Y.shape[1], cfg, Y.mean(axis=0))
    with np.errstate(over="ignore", invalid="ignore"):
        first = sann_cost(model, Y, cfg, with_grad=False).total
    if not np.isfinite(first):
        raise FloatingPointError(f"non-finite initial autoencoder cost {first}")
    cost = sann_cost(model, Y, cfg)
    if history is not None:
        history.append(cost.total)
    lr = cfg.learning_rate
    for epoch in range(cfg.max_epochs):
        try:
            with np.errstate(over="ignore"):
                cand = _step(model, cost.grads, lr)
                new = sann_cost(cand, Y, cfg)
            total = new.total
        except ValueError:  # parameters overflowed
            total = np.inf
        if not np.isfinite(total):
            if lr <= cfg.min_learning_rate:
                raise FloatingPointError(
                    f"autoencoder cost became non-finite at epoch {epoch} (lr={lr:g})"
                )
            lr *= 0.5
            continue
        if new.total > cost.total:
            lr *= 0.5
            if lr < cfg.min_learning_rate:
                break
            continue
        model, cost = cand, new
        if history is not None:
            history.append(cost.total)
        log.debug("sann epoch %d cost %.6g (lr %.3g)", epoch, cost.total, lr)
    return model
