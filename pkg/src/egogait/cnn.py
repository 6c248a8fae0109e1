"""Temporal convolutional network over flow windows, trained from scratch.

The net convolves in time only (each kernel spans both flow components and
all grid cells over K_T frames), ReLUs, max-pools heavily in time, then two
fully-connected layers: a sigmoid layer whose activation is the learned
descriptor, and a softmax classifier.  Gradients are derived manually and
optimized with AdaGrad; everything is float64 numpy for checkable
numerics.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError
from .flowgrid import FeatureWindow, sqrt_normalize

CNN_MAGIC = b"EGNN"
CNN_VERSION = 1
_HEAD = struct.Struct("<4sHHI")

ADAGRAD_EPS = 1e-8


@dataclass(frozen=True)
class CnnConfig:
    """Architecture and optimizer parameters (defaults are the working set
    for 60-frame windows at 15 fps)."""

    n_classes: int
    K_T: int = 20
    M: int = 128
    pool_len: int = 20
    pool_stride: int = 15
    N_1: int = 128
    lr: float = 0.01
    batch: int = 200
    epochs: int = 50
    seed: int = 0
    pooling: str = "max"  # or "avg" (ablation)
    plateau_epochs: int = 5
    plateau_rel: float = 1e-4

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.pooling not in ("max", "avg"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if min(self.K_T, self.M, self.pool_len, self.pool_stride, self.N_1, self.batch) < 1:
            raise ValueError("architecture sizes must be positive")

    def conv_len(self, n_frames: int) -> int:
        out = n_frames - self.K_T + 1
        if out < 1:
            raise ValueError(f"kernel length {self.K_T} exceeds window of {n_frames} frames")
        return out

    def pooled_len(self, n_frames: int) -> int:
        out = (self.conv_len(n_frames) - self.pool_len) // self.pool_stride + 1
        if out < 1:
            raise ValueError("pooling produces an empty output for this window length")
        return out


@dataclass
class CnnParams:
    """All learnable tensors, in serialization order."""

    conv_w: np.ndarray  # [M, 2, cells, K_T]
    conv_b: np.ndarray  # [M]
    fc1_w: np.ndarray  # [N_1, M*P]
    fc1_b: np.ndarray  # [N_1]
    fc2_w: np.ndarray  # [n_classes, N_1]
    fc2_b: np.ndarray  # [n_classes]

    def tensors(self):
        return [
            ("conv_w", self.conv_w),
            ("conv_b", self.conv_b),
            ("fc1_w", self.fc1_w),
            ("fc1_b", self.fc1_b),
            ("fc2_w", self.fc2_w),
            ("fc2_b", self.fc2_b),
        ]

    def zeros_like(self) -> "CnnParams":
        return CnnParams(*(np.zeros_like(t) for _, t in self.tensors()))

    def copy(self) -> "CnnParams":
        return CnnParams(*(t.copy() for _, t in self.tensors()))


@dataclass
class CnnModel:
    """Trained network: parameters, training-set input mean and labels."""

    params: CnnParams
    input_mean: np.ndarray  # [2, cells, F]
    config: CnnConfig
    classes: list
    final_loss: float = float("nan")


def init_params(cfg: CnnConfig, n_cells: int, n_frames: int, seed=None) -> CnnParams:
    """Glorot-uniform weights, zero biases, seeded."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p = cfg.pooled_len(n_frames)
    q = 2 * n_cells

    def glorot(shape, fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    return CnnParams(
        conv_w=glorot((cfg.M, 2, n_cells, cfg.K_T), q * cfg.K_T, cfg.M),
        conv_b=np.zeros(cfg.M),
        fc1_w=glorot((cfg.N_1, cfg.M * p), cfg.M * p, cfg.N_1),
        fc1_b=np.zeros(cfg.N_1),
        fc2_w=glorot((cfg.n_classes, cfg.N_1), cfg.N_1, cfg.n_classes),
        fc2_b=np.zeros(cfg.n_classes),
    )


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_batch(params: CnnParams, cfg: CnnConfig, x: np.ndarray, want_cache=False):
    """x: [B, 2, cells, F] preprocessed input. Returns (probs, hidden, cache)."""
    b, _, n_cells, n_frames = x.shape
    l1 = cfg.conv_len(n_frames)
    p = cfg.pooled_len(n_frames)
    q = 2 * n_cells

    flat_x = x.reshape(b, q, n_frames)
    win = sliding_window_view(flat_x, cfg.K_T, axis=2)  # [B, Q, L1, K_T]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b * l1, q * cfg.K_T)
    w2 = params.conv_w.reshape(cfg.M, q * cfg.K_T)
    z1 = (cols @ w2.T).reshape(b, l1, cfg.M).transpose(0, 2, 1) + params.conv_b[None, :, None]
    a1 = np.maximum(z1, 0.0)

    pool_view = sliding_window_view(a1, cfg.pool_len, axis=2)[:, :, :: cfg.pool_stride]
    pool_view = pool_view[:, :, :p]  # [B, M, P, pool_len]
    if cfg.pooling == "max":
        arg = pool_view.argmax(axis=3)
        pooled = np.take_along_axis(pool_view, arg[..., None], axis=3)[..., 0]
    else:
        arg = None
        pooled = pool_view.mean(axis=3)

    flat = pooled.reshape(b, cfg.M * p)
    h_pre = flat @ params.fc1_w.T + params.fc1_b
    hidden = _sigmoid(h_pre)
    logits = hidden @ params.fc2_w.T + params.fc2_b
    probs = _softmax(logits)
    cache = None
    if want_cache:
        cache = {"cols": cols, "z1": z1, "arg": arg, "flat": flat, "hidden": hidden,
                 "l1": l1, "p": p, "q": q, "shape": x.shape}
    return probs, hidden, cache


def preprocess(model_or_mean, w: FeatureWindow) -> np.ndarray:
    """sqrt-normalize then subtract the training-set mean."""
    mean = model_or_mean.input_mean if isinstance(model_or_mean, CnnModel) else model_or_mean
    return sqrt_normalize(w).data - mean


def forward(model: CnnModel, w) -> tuple[np.ndarray, np.ndarray]:
    """Single-window forward pass on an already-preprocessed input.

    Accepts a FeatureWindow (whose data must already be sqrt-normalized and
    mean-subtracted) or a raw [2][cells][F] array; returns (probs, hidden).
    """
    x = w.data if isinstance(w, FeatureWindow) else np.asarray(w, dtype=np.float64)
    if x.shape != model.input_mean.shape:
        raise ValueError(f"window shape {x.shape} does not match model {model.input_mean.shape}")
    probs, hidden, _ = _forward_batch(model.params, model.config, x[None])
    return probs[0], hidden[0]


def forward_batch(model: CnnModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched forward on preprocessed [B, 2, cells, F] input."""
    probs, hidden, _ = _forward_batch(model.params, model.config, x)
    return probs, hidden


def predict_proba(model: CnnModel, windows) -> np.ndarray:
    """End-to-end: preprocess raw windows and return [n, n_classes] probs."""
    x = np.stack([preprocess(model, w) for w in windows])
    probs, _, _ = _forward_batch(model.params, model.config, x)
    return probs


def loss_and_grads(params: CnnParams, cfg: CnnConfig, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradients for a preprocessed batch.

    Max-pool gradients are routed to the argmax position (ties to the lowest
    index); average pooling distributes uniformly.
    """
    b = x.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= cfg.n_classes:
        raise ValueError("label out of range")
    probs, hidden, cache = _forward_batch(params, cfg, x, want_cache=True)
    l1, p, q = cache["l1"], cache["p"], cache["q"]
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(b), y], 1e-300))))

    dlogits = probs.copy()
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b

    g_fc2_w = dlogits.T @ hidden
    g_fc2_b = dlogits.sum(axis=0)
    dhidden = dlogits @ params.fc2_w
    dh_pre = dhidden * hidden * (1.0 - hidden)
    g_fc1_w = dh_pre.T @ cache["flat"]
    g_fc1_b = dh_pre.sum(axis=0)
    dflat = dh_pre @ params.fc1_w
    dpooled = dflat.reshape(b, cfg.M, p)

    da1 = np.zeros((b, cfg.M, l1))
    if cfg.pooling == "max":
        starts = np.arange(p) * cfg.pool_stride
        pos = starts[None, None, :] + cache["arg"]  # [B, M, P] absolute indices
        bi = np.repeat(np.arange(b), cfg.M * p)
        mi = np.tile(np.repeat(np.arange(cfg.M), p), b)
        np.add.at(da1, (bi, mi, pos.ravel()), dpooled.ravel())
    else:
        share = dpooled / cfg.pool_len
        for pi in range(p):
            s = pi * cfg.pool_stride
            da1[:, :, s : s + cfg.pool_len] += share[:, :, pi : pi + 1]

    dz1 = da1 * (cache["z1"] > 0)
    g_conv_b = dz1.sum(axis=(0, 2))
    dz1_cols = np.ascontiguousarray(dz1.transpose(0, 2, 1)).reshape(b * l1, cfg.M)
    g_conv_w = (dz1_cols.T @ cache["cols"]).reshape(cfg.M, 2, q // 2, cfg.K_T)

    grads = CnnParams(
        conv_w=g_conv_w,
        conv_b=g_conv_b,
        fc1_w=g_fc1_w,
        fc1_b=g_fc1_b,
        fc2_w=g_fc2_w,
        fc2_b=g_fc2_b,
    )
    return loss, grads


def adagrad_step(params: CnnParams, grads: CnnParams, accum: CnnParams, lr: float = 0.01):
    """In-place AdaGrad update: accum += g^2; p -= lr * g / (sqrt(accum) + eps)."""
    for (_, p), (_, g), (_, a) in zip(params.tensors(), grads.tensors(), accum.tensors()):
        a += g * g
        p -= lr * g / (np.sqrt(a) + ADAGRAD_EPS)
    return params, accum


def train(windows, labels, cfg: CnnConfig, classes=None, verbose=False) -> CnnModel:
    """Train on labeled windows; deterministic for a fixed cfg.seed.

    Inputs are sqrt-normalized, the per-feature-element training mean is
    subtracted, then AdaGrad minimizes mean cross-entropy over seeded
    mini-batch shuffles.  Stops at cfg.epochs or when the epoch-mean loss
    plateaus (relative improvement < plateau_rel over plateau_epochs).
    """
    if classes is None:
        classes = sorted({w.subject_id for w in windows} if labels is None
                         else set(np.asarray(labels).tolist()))
    if labels is None:
        labels = [w.subject_id for w in windows]
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[l] for l in np.asarray(labels).tolist()], dtype=np.intp)
    if len(classes) != cfg.n_classes:
        raise ValueError(f"config says {cfg.n_classes} classes, data has {len(classes)}")
    if len(set(y.tolist())) < 2:
        raise ValueError("training data must contain at least 2 classes")

    raw = np.stack([sqrt_normalize(w).data for w in windows])
    input_mean = raw.mean(axis=0)
    x = raw - input_mean
    n, _, n_cells, n_frames = x.shape

    params = init_params(cfg, n_cells, n_frames)
    accum = params.zeros_like()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    epoch_losses = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch):
            idx = perm[s : s + cfg.batch]
            loss, grads = loss_and_grads(params, cfg, x[idx], y[idx])
            adagrad_step(params, grads, accum, cfg.lr)
            total += loss * len(idx)
        epoch_losses.append(total / n)
        if verbose:
            print(f"epoch {epoch + 1}: loss {epoch_losses[-1]:.6f}")
        if len(epoch_losses) > cfg.plateau_epochs:
            past = epoch_losses[-1 - cfg.plateau_epochs]
            if (past - epoch_losses[-1]) < cfg.plateau_rel * max(abs(past), 1e-12):
                break

    return CnnModel(
        params=params,
        input_mean=input_mean,
        config=cfg,
        classes=list(classes),
        final_loss=epoch_losses[-1],
    )


def extract_descriptor(model: CnnModel, w) -> np.ndarray:
    """The learned descriptor: fc1 sigmoid activation, components in (0, 1)."""
    _, hidden = forward(model, w)
    return hidden


def visualize_filter(model: CnnModel, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Render kernel m as two [cells, K_T] grayscale matrices in [0, 1].

    Each component image is min/max normalized; a constant kernel maps to
    mid-gray 0.5.
    """
    if not 0 <= m < model.config.M:
        raise ValueError(f"kernel index {m} out of range (M={model.config.M})")
    images = []
    for comp in range(2):
        k = model.params.conv_w[m, comp]
        lo, hi = k.min(), k.max()
        images.append(np.full_like(k, 0.5) if hi == lo else (k - lo) / (hi - lo))
    return images[0], images[1]


def save_filter_images(model: CnnModel, m: int, out_prefix) -> list[str]:
    """Write the two component images as 8-bit grayscale PNGs."""
    from PIL import Image

    paths = []
    for name, img in zip(("u", "v"), visualize_filter(model, m)):
        path = f"{out_prefix}_k{m:03d}_{name}.png"
        Image.fromarray(np.rint(img * 255).astype(np.uint8), mode="L").save(path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Model file (magic "EGNN") + JSON sidecar
# ---------------------------------------------------------------------------

def save_cnn(path, model: CnnModel) -> None:
    """Versioned binary: JSON header, then input_mean and the parameter
    tensors in declared order as little-endian float32."""
    cfg = model.config
    header = {
        "config": {
            "n_classes": cfg.n_classes, "K_T": cfg.K_T, "M": cfg.M,
            "pool_len": cfg.pool_len, "pool_stride": cfg.pool_stride,
            "N_1": cfg.N_1, "lr": cfg.lr, "batch": cfg.batch,
            "epochs": cfg.epochs, "seed": cfg.seed, "pooling": cfg.pooling,
            "plateau_epochs": cfg.plateau_epochs, "plateau_rel": cfg.plateau_rel,
        },
        "classes": list(model.classes),
        "input_shape": list(model.input_mean.shape),
        "final_loss": model.final_loss,
        "tensor_shapes": {name: list(t.shape) for name, t in model.params.tensors()},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(CNN_MAGIC, CNN_VERSION, 0, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(model.input_mean, dtype="<f4").tobytes())
        for _, t in model.params.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    with open(str(path) + ".json", "w") as fh:
        json.dump({"format": "EGNN", "version": CNN_VERSION, **header}, fh,
                  sort_keys=True, indent=2)
        fh.write("\n")


def load_cnn(path) -> CnnModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size:
        raise FormatError(f"{path}: truncated model header")
    magic, version, _, hlen = _HEAD.unpack_from(blob)
    if magic != CNN_MAGIC:
        raise FormatError(f"{path}: not a CNN model (magic {magic!r})")
    if version != CNN_VERSION:
        raise FormatError(f"{path}: unsupported CNN model version {version}")
    header = json.loads(blob[_HEAD.size : _HEAD.size + hlen])
    cfg = CnnConfig(**header["config"])
    off = _HEAD.size + hlen

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        return arr.reshape(shape).astype(np.float64)

    input_mean = take(header["input_shape"])
    shapes = header["tensor_shapes"]
    params = CnnParams(
        conv_w=take(shapes["conv_w"]),
        conv_b=take(shapes["conv_b"]),
        fc1_w=take(shapes["fc1_w"]),
        fc1_b=take(shapes["fc1_b"]),
        fc2_w=take(shapes["fc2_w"]),
        fc2_b=take(shapes["fc2_b"]),
    )
    return CnnModel(
        params=params,
        input_mean=input_mean,
        config=cfg,
        classes=header["classes"],
        final_loss=header["final_loss"],
    )
