"""RBF-kernel SVM trained from scratch by sequential minimal optimization.

The binary solver optimizes the usual dual with a maximal-violating-pair
working set, then fits a Platt sigmoid on the training decision values so
ensembles can emit the per-class probabilities the fusion stage needs.
Multiclass is one-vs-rest by default (one-vs-one voting is available for
ablation).
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

SVM_MAGIC = b"EGSV"
SVM_VERSION = 1
_ALPHA_KEEP = 1e-12  # multipliers at or below this are not support vectors


@dataclass(frozen=True)
class SvmConfig:
    """Solver and kernel parameters.

    C defaults to 1 (the LPC-descriptor setting); raw-flow features use
    C=10.  gamma is the coefficient in exp(-gamma * ||x - y||^2).
    """

    C: float = 1.0
    gamma: float = 1e-4
    tol: float = 1e-3
    max_passes: int = 200_000
    cache_bytes: int = 512 * 1024 * 1024
    strategy: str = "ovr"  # or "ovo" (voting, ablation only)

    def __post_init__(self):
        if self.C <= 0 or self.gamma <= 0 or self.tol <= 0 or self.max_passes <= 0:
            raise ValueError("C, gamma, tol, max_passes must all be positive")
        if self.strategy not in ("ovr", "ovo"):
            raise ValueError(f"unknown multiclass strategy {self.strategy!r}")


@dataclass
class BinarySvm:
    """A trained binary classifier: support set, bias and Platt sigmoid."""

    support_vectors: np.ndarray  # [n_sv, dim]
    alphas: np.ndarray  # (0, C] per support vector
    labels: np.ndarray  # +-1 per support vector
    bias: float
    platt_a: float
    platt_b: float
    config: SvmConfig


@dataclass
class SvmEnsemble:
    """One-vs-rest (or one-vs-one) multiclass classifier."""

    classes: list
    members: list[BinarySvm]
    pairs: list[tuple[int, int]] | None  # class-index pairs for ovo, else None
    config: SvmConfig


def rbf_kernel(x: np.ndarray, y: np.ndarray, gamma: float) -> float:
    """exp(-gamma * ||x - y||^2), in (0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-gamma * np.dot(d, d)))


def kernel_matrix(X: np.ndarray, Y: np.ndarray, gamma: float) -> np.ndarray:
    """Pairwise RBF kernel values between the rows of X and Y."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    d2 = (
        (X**2).sum(axis=1)[:, None]
        + (Y**2).sum(axis=1)[None, :]
        - 2.0 * (X @ Y.T)
    )
    return np.exp(-gamma * np.maximum(d2, 0.0))


class _KernelCache:
    """Kernel row provider: full matrix when it fits the byte budget,
    otherwise an LRU of rows."""

    def __init__(self, X, gamma, cache_bytes, full=None):
        self.X = X
        self.gamma = gamma
        n = X.shape[0]
        self.sq = (X**2).sum(axis=1)
        if full is not None:
            self.full = full
            self.rows = None
        elif n * n * 8 <= cache_bytes:
            self.full = kernel_matrix(X, X, gamma)
            self.rows = None
        else:
            self.full = None
            self.rows = OrderedDict()
            self.max_rows = max(2, cache_bytes // (8 * n))

    def row(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        row = self.rows.get(i)
        if row is None:
            d2 = self.sq + self.sq[i] - 2.0 * (self.X @ self.X[i])
            row = np.exp(-self.gamma * np.maximum(d2, 0.0))
            self.rows[i] = row
            if len(self.rows) > self.max_rows:
                self.rows.popitem(last=False)
        else:
            self.rows.move_to_end(i)
        return row


def _smo(X, y, cfg, kernel=None, record_objective=False):
    """Maximal-violating-pair SMO on the dual; returns (alpha, bias, history).

    Minimizes f(a) = 1/2 a'Qa - e'a with Q_ij = y_i y_j K_ij subject to
    0 <= a <= C and y'a = 0; stops when the maximal KKT violation drops
    below cfg.tol or the iteration budget runs out.
    """
    n = X.shape[0]
    cache = _KernelCache(X, cfg.gamma, cfg.cache_bytes, full=kernel)
    alpha = np.zeros(n)
    grad = np.full(n, -1.0)  # G = Q a - e at a = 0
    pos = y > 0
    history = []
    check_every = max(1, n)

    for it in range(cfg.max_passes):
        up = (pos & (alpha < cfg.C)) | (~pos & (alpha > 0))
        low = (pos & (alpha > 0)) | (~pos & (alpha < cfg.C))
        crit = -y * grad
        m_val = np.max(crit[up]) if up.any() else -np.inf
        big_m = np.min(crit[low]) if low.any() else np.inf
        if m_val - big_m < cfg.tol:
            break
        i = int(np.flatnonzero(up)[np.argmax(crit[up])])
        j = int(np.flatnonzero(low)[np.argmin(crit[low])])

        ki = cache.row(i)
        kj = cache.row(j)
        quad = max(ki[i] + kj[j] - 2.0 * ki[j], 1e-12)
        t = (crit[i] - crit[j]) / quad
        head_i = (cfg.C - alpha[i]) if pos[i] else alpha[i]
        head_j = alpha[j] if pos[j] else (cfg.C - alpha[j])
        t = min(t, head_i, head_j)
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        grad += y * (t * (ki - kj))
        if record_objective and (it % check_every == 0):
            history.append(0.5 * float(np.dot(alpha, 1.0 - grad)))

    up = (pos & (alpha < cfg.C)) | (~pos & (alpha > 0))
    low = (pos & (alpha > 0)) | (~pos & (alpha < cfg.C))
    crit = -y * grad
    m_val = np.max(crit[up]) if up.any() else 0.0
    big_m = np.min(crit[low]) if low.any() else 0.0
    bias = 0.5 * (m_val + big_m)
    if record_objective:
        history.append(0.5 * float(np.dot(alpha, 1.0 - grad)))
    return np.clip(alpha, 0.0, cfg.C), float(bias), history


def _platt_sigmoid(z: np.ndarray) -> np.ndarray:
    """1 / (1 + exp(z)) without overflow (note: decreasing in z)."""
    q = np.exp(-np.abs(z))
    return np.where(z >= 0, q / (1 + q), 1 / (1 + q))


def fit_platt(decisions, targets, max_iter=100):
    """Regularized sigmoid fit A, B with P(y=1|f) = 1 / (1 + exp(A f + B)).

    Newton iterations with backtracking, following the numerically robust
    formulation of Platt's method (Lin, Lin & Weng).
    """
    f = np.asarray(decisions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    n1 = float((t > 0.5).sum())
    n0 = float(len(t) - n1)
    hi = (n1 + 1.0) / (n1 + 2.0)
    lo = 1.0 / (n0 + 2.0)
    ti = np.where(t > 0.5, hi, lo)

    def nll(a, b):
        # with p = 1/(1+e^z): NLL_i = log(1+e^z) - (1-ti) z, computed stably
        z = a * f + b
        return float(np.sum(np.where(z >= 0, np.log1p(np.exp(-np.abs(z))) + ti * z,
                                     np.log1p(np.exp(-np.abs(z))) - (1 - ti) * z)))

    a, b = 0.0, np.log((n0 + 1.0) / (n1 + 1.0))
    val = nll(a, b)
    sigma = 1e-12
    for _ in range(max_iter):
        z = a * f + b
        p = _platt_sigmoid(z)
        g_a = float(np.dot(f, ti - p))
        g_b = float(np.sum(ti - p))
        if max(abs(g_a), abs(g_b)) < 1e-5:
            break
        w = p * (1 - p)
        h11 = float(np.dot(f * f, w)) + sigma
        h22 = float(np.sum(w)) + sigma
        h12 = float(np.dot(f, w))
        det = h11 * h22 - h12 * h12
        da = -(h22 * g_a - h12 * g_b) / det
        db = -(h11 * g_b - h12 * g_a) / det
        step = 1.0
        while step >= 1e-10:
            na, nb = a + step * da, b + step * db
            nv = nll(na, nb)
            if nv < val + 1e-4 * step * (g_a * da + g_b * db):
                a, b, val = na, nb, nv
                break
            step *= 0.5
        else:
            break
    return float(a), float(b)


def train_binary(X, y, cfg: SvmConfig, seed: int = 0, kernel=None, return_info=False):
    """Train a binary RBF-SVM by SMO and calibrate its Platt sigmoid.

    Args:
        X: [n, dim] feature rows.
        y: +-1 labels (anything >0 counts as +1).
        cfg: solver configuration.
        seed: kept for interface symmetry; the solver is deterministic.
        kernel: optional precomputed [n, n] kernel matrix to share across
            one-vs-rest members.
        return_info: also return a dict with the dual objective history.
    """
    X = np.asarray(X, dtype=np.float64)
    if np.isnan(X).any():
        raise ValueError("NaN feature values in training data")
    y = np.where(np.asarray(y, dtype=np.float64) > 0, 1.0, -1.0)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be [n, dim] with one label per row")
    if (y > 0).all() or (y < 0).all():
        raise ValueError("training data must contain both classes")

    alpha, bias, history = _smo(X, y, cfg, kernel=kernel, record_objective=return_info)
    keep = alpha > _ALPHA_KEEP
    svm = BinarySvm(
        support_vectors=X[keep].copy(),
        alphas=alpha[keep].copy(),
        labels=y[keep].copy(),
        bias=bias,
        platt_a=0.0,
        platt_b=0.0,
        config=cfg,
    )
    dec = decision_values(svm, X)
    a, b = fit_platt(dec, (y > 0).astype(float))
    svm.platt_a, svm.platt_b = a, b
    if return_info:
        return svm, {"objective": np.array(history), "alpha": alpha, "bias": bias}
    return svm


def decision_values(svm: BinarySvm, X) -> np.ndarray:
    """Sum alpha_i y_i k(s_i, x) + b per row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != svm.support_vectors.shape[1]:
        raise ValueError(
            f"feature dimension {X.shape[1]} does not match model "
            f"({svm.support_vectors.shape[1]})"
        )
    k = kernel_matrix(X, svm.support_vectors, svm.config.gamma)
    return k @ (svm.alphas * svm.labels) + svm.bias


def predict_proba_binary(svm: BinarySvm, X) -> np.ndarray:
    """Platt probability of the positive class per row of X."""
    return _platt_sigmoid(svm.platt_a * decision_values(svm, X) + svm.platt_b)


def train_multiclass(X, labels, cfg: SvmConfig, seed: int = 0) -> SvmEnsemble:
    """Train a one-vs-rest (or one-vs-one) ensemble over sorted class labels."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    n = X.shape[0]
    shared = None
    if cfg.strategy == "ovr" and n * n * 8 <= cfg.cache_bytes:
        shared = kernel_matrix(X, X, cfg.gamma)

    members = []
    pairs = None
    if cfg.strategy == "ovr":
        for c in classes:
            y = np.where(labels == c, 1.0, -1.0)
            members.append(train_binary(X, y, cfg, seed=seed, kernel=shared))
    else:
        pairs = []
        for a_idx in range(len(classes)):
            for b_idx in range(a_idx + 1, len(classes)):
                mask = (labels == classes[a_idx]) | (labels == classes[b_idx])
                y = np.where(labels[mask] == classes[a_idx], 1.0, -1.0)
                members.append(train_binary(X[mask], y, cfg, seed=seed))
                pairs.append((a_idx, b_idx))
    return SvmEnsemble(classes=classes, members=members, pairs=pairs, config=cfg)


def predict_proba(ens: SvmEnsemble, X) -> np.ndarray:
    """Probability distribution over ens.classes per row of X.

    One-vs-rest: per-class Platt probabilities, floored at 1e-12 and
    normalized to sum 1.  One-vs-one: normalized pairwise vote fractions.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n_classes = len(ens.classes)
    if ens.pairs is None:
        raw = np.stack([predict_proba_binary(m, X) for m in ens.members], axis=1)
    else:
        raw = np.zeros((X.shape[0], n_classes))
        for (a_idx, b_idx), m in zip(ens.pairs, ens.members):
            wins_a = decision_values(m, X) > 0
            raw[:, a_idx] += wins_a
            raw[:, b_idx] += ~wins_a
    raw = np.maximum(raw, 1e-12)
    return raw / raw.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Model file (magic "EGSV") + JSON sidecar
# ---------------------------------------------------------------------------

_HEAD = struct.Struct("<4sHHI")  # magic, version, reserved, json header length


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_svm(path, ens: SvmEnsemble) -> None:
    """Write the ensemble as a versioned binary plus a .json sidecar."""
    header = {
        "config": {
            "C": ens.config.C,
            "gamma": ens.config.gamma,
            "tol": ens.config.tol,
            "max_passes": ens.config.max_passes,
            "cache_bytes": ens.config.cache_bytes,
            "strategy": ens.config.strategy,
        },
        "classes": list(ens.classes),
        "pairs": ens.pairs,
        "members": [
            {
                "n_sv": int(m.support_vectors.shape[0]),
                "dim": int(m.support_vectors.shape[1]),
                "bias": m.bias,
                "platt_a": m.platt_a,
                "platt_b": m.platt_b,
            }
            for m in ens.members
        ],
    }
    blob = _json_bytes(header)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(SVM_MAGIC, SVM_VERSION, 0, len(blob)))
        fh.write(blob)
        for m in ens.members:
            fh.write(np.ascontiguousarray(m.support_vectors, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(m.alphas, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(m.labels, dtype="<i1").tobytes())
    sidecar = {"format": "EGSV", "version": SVM_VERSION, **header}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_svm(path) -> SvmEnsemble:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size:
        raise FormatError(f"{path}: truncated model header")
    magic, version, _, hlen = _HEAD.unpack_from(blob)
    if magic != SVM_MAGIC:
        raise FormatError(f"{path}: not an SVM model (magic {magic!r})")
    if version != SVM_VERSION:
        raise FormatError(f"{path}: unsupported SVM model version {version}")
    header = json.loads(blob[_HEAD.size : _HEAD.size + hlen])
    cfg = SvmConfig(**header["config"])
    off = _HEAD.size + hlen
    members = []
    for meta in header["members"]:
        n_sv, dim = meta["n_sv"], meta["dim"]
        sv = np.frombuffer(blob, dtype="<f8", count=n_sv * dim, offset=off).reshape(n_sv, dim)
        off += 8 * n_sv * dim
        al = np.frombuffer(blob, dtype="<f8", count=n_sv, offset=off).copy()
        off += 8 * n_sv
        lb = np.frombuffer(blob, dtype="<i1", count=n_sv, offset=off).astype(np.float64)
        off += n_sv
        members.append(
            BinarySvm(
                support_vectors=sv.copy(),
                alphas=al,
                labels=lb,
                bias=meta["bias"],
                platt_a=meta["platt_a"],
                platt_b=meta["platt_b"],
                config=cfg,
            )
        )
    pairs = header["pairs"]
    return SvmEnsemble(
        classes=header["classes"],
        members=members,
        pairs=[tuple(p) for p in pairs] if pairs is not None else None,
        config=cfg,
    )
