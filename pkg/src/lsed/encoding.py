"""Sparse codes of feature vectors under the three trained models.

All encoders share one small interface (:class:`Encoder`): ``encode`` for a
single vector returning a :class:`SparseCode`, ``encode_batch`` for a stack of
row vectors returning a plain ``(n, N)`` array.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .dictionary import AtomDictionary, AutoencoderModel, MixtureModel, _gaussian_log_terms

log = logging.getLogger(__name__)

# |alpha_i| above this counts as a non-zero entry
SUPPORT_THRESHOLD = 1e-6

KIND_L1 = "l1"
KIND_SANN = "sann"
KIND_GMM = "gmm"


@dataclass(frozen=True)
class SparseCode:
    values: np.ndarray
    model_id: str
    constraint_unmet: bool = False

    def __len__(self):
        return len(self.values)

    def support(self, threshold: float = SUPPORT_THRESHOLD) -> np.ndarray:
        return np.abs(self.values) > threshold


@dataclass(frozen=True)
class L1EncoderConfig:
    """Residual bound and solver settings for l1 encoding.

    ``solver`` is ``"homotopy"`` (exact path following, default) or ``"cd"``
    (coordinate descent on the penalised form with bisection on the penalty).
    """

    epsilon: float = 0.1
    solver: str = "homotopy"
    cd_tol: float = 1e-8
    cd_max_sweeps: int = 10_000
    bisection_iters: int = 100
    max_steps: int | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.solver not in ("homotopy", "cd"):
            raise ValueError(f"unknown l1 solver {self.solver!r}")


def model_fingerprint(model) -> str:
    """Stable 16-hex-digit hash of a model's parameters."""
    h = hashlib.blake2b(digest_size=8)
    h.update(type(model).__name__.encode())
    if isinstance(model, AtomDictionary):
        arrays = [model.atoms]
    elif isinstance(model, AutoencoderModel):
        arrays = [model.weights, model.bias, model.decode_weights, model.decode_bias]
    elif isinstance(model, MixtureModel):
        arrays = [model.weights, model.means, model.covariances]
    else:
        raise TypeError(f"cannot fingerprint {type(model).__name__}")
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


# --- l1 minimisation ---------------------------------------------------------


def _homotopy(D, x, eps, max_steps):
    """Follow the lasso path from alpha = 0 until ||D a - x||^2 reaches eps.

    Returns ``(alpha, feasible)``. On each linear piece of the path the
    residual energy is a quadratic in the step, so the point where it meets
    ``eps`` is found in closed form.
    """
    d, N = D.shape
    alpha = np.zeros(N)
    target = eps * (1.0 - 1e-12)
    rr = float(x @ x)
    if rr <= target:
        return alpha, True
    c = D.T @ x
    lam = float(np.max(np.abs(c)))
    active = [int(np.argmax(np.abs(c)))]
    for _ in range(max_steps):
        A = np.array(active)
        s = np.sign(c[A])
        DA = D[:, A]
        GA = DA.T @ DA
        try:
            u = np.linalg.solve(GA, s)
        except np.linalg.LinAlgError:
            u = np.linalg.lstsq(GA, s, rcond=None)[0]
        q = float(s @ u)
        a = D.T @ (DA @ u)

        step, event, who = lam, "end", -1
        inactive = np.ones(N, dtype=bool)
        inactive[A] = False
        with np.errstate(divide="ignore", invalid="ignore"):
            g1 = (lam - c) / (1.0 - a)
            g2 = (lam + c) / (1.0 + a)
        cand = np.where((g1 > 1e-14) & inactive, g1, np.inf)
        cand = np.minimum(cand, np.where((g2 > 1e-14) & inactive, g2, np.inf))
        j = int(np.argmin(cand))
        if cand[j] < step:
            step, event, who = float(cand[j]), "join", j
        with np.errstate(divide="ignore", invalid="ignore"):
            gd = -alpha[A] / u
        gd = np.where(gd > 1e-14, gd, np.inf)
        k = int(np.argmin(gd)) if gd.size else 0
        if gd.size and gd[k] < step:
            step, event, who = float(gd[k]), "drop", int(A[k])

        # residual energy along this piece: rr - 2 t lam q + t^2 q
        disc = lam * lam - (rr - target) / q if q > 0 else -1.0
        if disc >= 0:
            t = lam - np.sqrt(disc)
            if t <= step:
                alpha[A] += t * u
                return alpha, True

        alpha[A] += step * u
        c = c - step * a
        lam -= step
        r = x - DA @ alpha[A]
        rr = float(r @ r)
        if event == "join":
            active.append(who)
        elif event == "drop":
            alpha[who] = 0.0
            active.remove(who)
        else:
            break
        if rr <= target:
            return alpha, True
        if not active:
            break
    return alpha, rr <= eps


def _soft(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def lasso_cd(D, x, lam, G=None, init=None, tol=1e-8, max_sweeps=10_000) -> np.ndarray:
    """Cyclic coordinate descent for ``min 0.5||D a - x||^2 + lam ||a||_1``.

    Stops when the largest coefficient change in a sweep is below ``tol``.
    Atoms are assumed unit-norm.
    """
    N = D.shape[1]
    G = D.T @ D if G is None else G
    b = D.T @ x
    a = np.zeros(N) if init is None else np.array(init, dtype=np.float64)
    grad = b - G @ a  # D^T (x - D a)
    for _ in range(max_sweeps):
        biggest = 0.0
        for i in range(N):
            old = a[i]
            new = _soft(grad[i] + old, lam)
            if new != old:
                delta = new - old
                grad -= delta * G[:, i]
                a[i] = new
                biggest = max(biggest, abs(delta))
        if biggest < tol:
            break
    return a


def _cd_bisection(D, G, x, cfg: L1EncoderConfig):
    eps = cfg.epsilon
    if x @ x <= eps:
        return np.zeros(D.shape[1]), True

    def resid(a):
        r = D @ a - x
        return float(r @ r)

    hi = float(np.max(np.abs(D.T @ x)))  # alpha = 0 at and above this
    lo = 0.0
    best = lasso_cd(D, x, 1e-12 * hi, G, tol=cfg.cd_tol, max_sweeps=cfg.cd_max_sweeps)
    if resid(best) > eps:
        return best, False
    warm = best
    for _ in range(cfg.bisection_iters):
        mid = 0.5 * (lo + hi)
        a = lasso_cd(D, x, mid, G, init=warm, tol=cfg.cd_tol, max_sweeps=cfg.cd_max_sweeps)
        if resid(a) <= eps:
            lo, best, warm = mid, a, a
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(hi, 1e-300):
            break
    return best, True


def encode_l1(
    dictionary: AtomDictionary, x, cfg: L1EncoderConfig = L1EncoderConfig(), gram=None, model_id: str | None = None
) -> SparseCode:
    """Minimum-l1 code with ``||D a - x||^2 <= epsilon``.

    If no code meets the bound, the minimum-residual code is returned with
    ``constraint_unmet`` set.
    """
    D = dictionary.atoms
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (D.shape[0],):
        raise ValueError(f"feature of shape {x.shape} does not match dictionary dimension {D.shape[0]}")
    if cfg.solver == "homotopy":
        steps = cfg.max_steps or 20 * max(D.shape)
        alpha, ok = _homotopy(D, x, cfg.epsilon, steps)
    else:
        G = D.T @ D if gram is None else gram
        alpha, ok = _cd_bisection(D, G, x, cfg)
    model_id = model_fingerprint(dictionary) if model_id is None else model_id
    return SparseCode(alpha, model_id, constraint_unmet=not ok)


# --- autoencoder / mixture ---------------------------------------------------


def encode_sann(model: AutoencoderModel, x) -> SparseCode:
    """Hidden-layer activations ``sig(W^T x + b)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"feature of shape {x.shape} does not match autoencoder input {model.dim}")
    return SparseCode(expit(x @ model.weights + model.bias), model_fingerprint(model))


def gmm_posteriors(model: MixtureModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Posterior component probabilities for the rows of ``X``.

    Returns ``(posteriors, degenerate)`` where ``degenerate`` marks rows whose
    likelihoods were all zero and got a uniform code instead.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise ValueError(f"features of dimension {X.shape[1]} do not match mixture dimension {model.dim}")
    terms = _gaussian_log_terms(X, model.weights, model.means, model.covariances)
    norm = logsumexp(terms, axis=1)
    bad = ~np.isfinite(norm)
    post = np.exp(terms - np.where(bad, 0.0, norm)[:, None])
    post[bad] = 1.0 / model.n_components
    return post, bad


def encode_gmm(model: MixtureModel, x) -> SparseCode:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"feature of shape {x.shape} does not match mixture dimension {model.dim}")
    post, bad = gmm_posteriors(model, x)
    return SparseCode(post[0], model_fingerprint(model), constraint_unmet=bool(bad[0]))


# --- uniform encoder interface ---------------------------------------------


class Encoder:
    """Common face of the l1, autoencoder and mixture encoders."""

    kind: str

    def __init__(self, model):
        self.model = model
        self.model_id = model_fingerprint(model)

    @property
    def n_codes(self) -> int:
        raise NotImplementedError

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def encode(self, x) -> SparseCode:
        raise NotImplementedError

    def encode_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty((X.shape[0], self.n_codes))
        for i, x in enumerate(X):
            out[i] = self.encode(x).values
        return out

    def __repr__(self):
        return f"{type(self).__name__}(N={self.n_codes}, model_id={self.model_id})"


class L1Encoder(Encoder):
    kind = KIND_L1

    def __init__(self, dictionary: AtomDictionary, cfg: L1EncoderConfig = L1EncoderConfig()):
        super().__init__(dictionary)
        self.cfg = cfg
        self._gram = dictionary.atoms.T @ dictionary.atoms if cfg.solver == "cd" else None

    @property
    def n_codes(self):
        return self.model.n_atoms

    @property
    def dim(self):
        return self.model.dim

    def encode(self, x) -> SparseCode:
        return encode_l1(self.model, x, self.cfg, gram=self._gram, model_id=self.model_id)


class SannEncoder(Encoder):
    kind = KIND_SANN

    @property
    def n_codes(self):
        return self.model.n_hidden

    @property
    def dim(self):
        return self.model.dim

    def encode(self, x) -> SparseCode:
        return SparseCode(encode_sann(self.model, x).values, self.model_id)

    def encode_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"features of dimension {X.shape[1]} do not match autoencoder input {self.dim}")
        return expit(X @ self.model.weights + self.model.bias)


class GmmEncoder(Encoder):
    kind = KIND_GMM

    @property
    def n_codes(self):
        return self.model.n_components

    @property
    def dim(self):
        return self.model.dim

    def encode(self, x) -> SparseCode:
        code = encode_gmm(self.model, x)
        return SparseCode(code.values, self.model_id, code.constraint_unmet)

    def encode_batch(self, X) -> np.ndarray:
        return gmm_posteriors(self.model, X)[0]


def make_encoder(model, l1_cfg: L1EncoderConfig = L1EncoderConfig()) -> Encoder:
    """Wrap a trained model in the matching encoder."""
    if isinstance(model, AtomDictionary):
        return L1Encoder(model, l1_cfg)
    if isinstance(model, AutoencoderModel):
        return SannEncoder(model)
    if isinstance(model, MixtureModel):
        return GmmEncoder(model)
    raise TypeError(f"no encoder for {type(model).__name__}")
