"""Sparse optical-flow grid and fixed-length feature windows.

A frame pair is reduced to an m_y x m_x grid of flow vectors (pyramidal
Lucas-Kanade solved at block centers).  Consecutive flow fields are then
stacked into [2 components][cells][frames] windows covering a fixed number
of seconds, the unit consumed by both classifier back ends.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .errors import FormatError

FLOW_MAGIC = b"EGFL"
FLOW_VERSION = 1
_FLOW_HEADER = struct.Struct("<4sHHIHHII")  # magic, version, reserved, N, m_y, m_x, fps num/den

DEFAULT_FPS = Fraction(15)
WINDOW_SECONDS = 4.0
WINDOW_STRIDE_SECONDS = 2.0


def as_fps(value) -> Fraction:
    """Coerce a manifest fps value (int, float, Fraction or [num, den]) to an
    exact positive rational."""
    if isinstance(value, Fraction):
        fps = value
    elif isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ValueError(f"fps pair must have 2 entries, got {value!r}")
        fps = Fraction(int(value[0]), int(value[1]))
    elif isinstance(value, int):
        fps = Fraction(value)
    elif isinstance(value, float):
        fps = Fraction(value).limit_denominator(1_000_000)
    else:
        raise ValueError(f"unsupported fps value: {value!r}")
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {value!r}")
    return fps


@dataclass(frozen=True)
class FlowGridSpec:
    """Grid geometry and Lucas-Kanade solver parameters.

    The 10x5 grid is the fixed feature size of the recognition pipeline;
    the LK parameters are exposed so experiments can vary them.
    """

    m_x: int = 10
    m_y: int = 5
    pyramid_levels: int = 3
    lk_window: int = 21
    lk_iterations: int = 20
    min_eig_threshold: float = 1e-4
    convergence_px: float = 0.01

    def __post_init__(self):
        if self.m_x < 1 or self.m_y < 1:
            raise ValueError("grid dimensions must be positive")
        if self.lk_window < 1 or self.lk_window % 2 == 0:
            raise ValueError("lk_window must be an odd positive integer")
        if self.pyramid_levels < 1 or self.lk_iterations < 1:
            raise ValueError("pyramid_levels and lk_iterations must be positive")
        if self.min_eig_threshold < 0:
            raise ValueError("min_eig_threshold must be non-negative")

    @property
    def n_cells(self) -> int:
        return self.m_x * self.m_y


@dataclass(frozen=True)
class FlowField:
    """One frame pair's grid of flow vectors, in px/frame.

    Invalid (low-texture) cells hold flow 0 with valid=False so the tensor
    shape stays fixed downstream.
    """

    u: np.ndarray  # [m_y, m_x] horizontal flow
    v: np.ndarray  # [m_y, m_x] vertical flow
    valid: np.ndarray  # [m_y, m_x] bool

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.shape != self.valid.shape:
            raise ValueError("u, v, valid must share one shape")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("flow values must be finite")


@dataclass
class FeatureWindow:
    """A [2 components][cells][frames] slab of flow covering a few seconds.

    Cell order is row-major over the grid and identical for both
    components; component 0 is horizontal, 1 vertical.
    """

    data: np.ndarray
    t_start: float
    fps: Fraction
    subject_id: str | None = None
    sequence_id: str | None = None

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ValueError(f"window data must be [2][cells][frames], got {self.data.shape}")

    @property
    def n_cells(self) -> int:
        return self.data.shape[1]

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# Lucas-Kanade at block centers
# ---------------------------------------------------------------------------

def _downsample(img: np.ndarray) -> np.ndarray:
    """Binomial blur then 2x decimation."""
    k = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    pad = np.pad(img, 2, mode="edge")
    blurred = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, pad)
    blurred = np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, blurred)
    return blurred[::2, ::2]


def _pyramid(img: np.ndarray, levels: int, min_size: int) -> list[np.ndarray]:
    pyr = [img.astype(np.float64, copy=False)]
    for _ in range(levels - 1):
        nxt = _downsample(pyr[-1])
        if min(nxt.shape) < min_size:
            break
        pyr.append(nxt)
    return pyr


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample img at float coordinates with border clamping."""
    h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _min_eig(gxx, gxy, gyy):
    half_trace = 0.5 * (gxx + gyy)
    disc = np.sqrt(np.maximum(0.25 * (gxx - gyy) ** 2 + gxy**2, 0.0))
    return half_trace - disc


def compute_grid_flow(prev: np.ndarray, next: np.ndarray, spec: FlowGridSpec) -> FlowField:
    """Solve pyramidal Lucas-Kanade at each grid-cell center.

    Args:
        prev, next: grayscale frames, same H x W, intensities in [0, 1].
        spec: grid geometry and solver parameters.

    Returns:
        FlowField in px/frame; cells whose structure tensor's minimum
        eigenvalue (normalized by patch area) falls below
        spec.min_eig_threshold are invalid with flow 0.
    """
    prev = np.asarray(prev, dtype=np.float64)
    next = np.asarray(next, dtype=np.float64)
    if prev.shape != next.shape:
        raise ValueError(f"frame sizes differ: {prev.shape} vs {next.shape}")
    if prev.ndim != 2:
        raise ValueError("frames must be 2-D grayscale arrays")
    h, w = prev.shape
    if w < spec.m_x * spec.lk_window or h < spec.m_y * spec.lk_window:
        raise ValueError(
            f"frame {w}x{h} too small for a {spec.m_x}x{spec.m_y} grid "
            f"with {spec.lk_window}px windows"
        )

    half = spec.lk_window // 2
    offs = np.arange(-half, half + 1, dtype=np.float64)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    oy = oy.ravel()[None, :]  # [1, win^2]
    ox = ox.ravel()[None, :]
    n_pix = spec.lk_window**2

    # Block centers in pixel-center coordinates, row-major cell order.
    cx = (np.arange(spec.m_x) + 0.5) * w / spec.m_x - 0.5
    cy = (np.arange(spec.m_y) + 0.5) * h / spec.m_y - 0.5
    centers_y, centers_x = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([centers_y.ravel(), centers_x.ravel()], axis=1)  # [cells, 2]
    n_cells = centers.shape[0]

    pyr_prev = _pyramid(prev, spec.pyramid_levels, spec.lk_window + 2)
    pyr_next = _pyramid(next, spec.pyramid_levels, spec.lk_window + 2)
    levels = min(len(pyr_prev), len(pyr_next))

    d = np.zeros((n_cells, 2), dtype=np.float64)  # (dy, dx) accumulated flow
    min_eig_fine = np.zeros(n_cells)
    for lvl in range(levels - 1, -1, -1):
        scale = 2.0**lvl
        img0, img1 = pyr_prev[lvl], pyr_next[lvl]
        gy_img, gx_img = np.gradient(img0)
        pys = centers[:, 0:1] / scale + oy  # [cells, win^2]
        pxs = centers[:, 1:2] / scale + ox
        patch0 = _bilinear(img0, pys, pxs)
        gx = _bilinear(gx_img, pys, pxs)
        gy = _bilinear(gy_img, pys, pxs)
        gxx = (gx * gx).sum(axis=1)
        gxy = (gx * gy).sum(axis=1)
        gyy = (gy * gy).sum(axis=1)
        det = gxx * gyy - gxy * gxy
        solvable = det > 1e-12
        if lvl == 0:
            min_eig_fine = _min_eig(gxx, gxy, gyy) / n_pix

        active = solvable.copy()
        for _ in range(spec.lk_iterations):
            if not active.any():
                break
            idx = np.nonzero(active)[0]
            warped = _bilinear(img1, pys[idx] + d[idx, 0:1], pxs[idx] + d[idx, 1:2])
            it = warped - patch0[idx]
            bx = (gx[idx] * it).sum(axis=1)
            by = (gy[idx] * it).sum(axis=1)
            # 2x2 solve of G * step = -b per cell
            inv_det = 1.0 / det[idx]
            step_x = (-bx * gyy[idx] + by * gxy[idx]) * inv_det
            step_y = (-by * gxx[idx] + bx * gxy[idx]) * inv_det
            d[idx, 0] += step_y
            d[idx, 1] += step_x
            moved = np.hypot(step_x, step_y) >= spec.convergence_px
            active[idx] = moved
        if lvl > 0:
            d *= 2.0

    valid = min_eig_fine >= spec.min_eig_threshold
    u = np.where(valid, d[:, 1], 0.0).reshape(spec.m_y, spec.m_x)
    v = np.where(valid, d[:, 0], 0.0).reshape(spec.m_y, spec.m_x)
    u = np.where(np.isfinite(u), u, 0.0)
    v = np.where(np.isfinite(v), v, 0.0)
    return FlowField(u=u, v=v, valid=valid.reshape(spec.m_y, spec.m_x))


def flow_sequence(frames, spec: FlowGridSpec) -> list[FlowField]:
    """Grid flow for every consecutive frame pair (N frames -> N-1 fields)."""
    return [compute_grid_flow(frames[i], frames[i + 1], spec) for i in range(len(frames) - 1)]


# ---------------------------------------------------------------------------
# Window assembly and per-window normalizations
# ---------------------------------------------------------------------------

def flows_to_array(flows) -> np.ndarray:
    """Stack FlowFields into a [N, 2, cells] array, row-major cell order."""
    if len(flows) == 0:
        return np.zeros((0, 2, 0))
    return np.stack([np.stack([f.u.ravel(), f.v.ravel()]) for f in flows])


def window_count(n_flows: int, fps: Fraction, T: float, stride: float) -> int:
    """Closed-form number of windows: floor((N - F) / stride_frames) + 1."""
    F = frames_per_window(fps, T)
    s = max(1, int(round(stride * float(fps))))
    if n_flows < F:
        return 0
    return (n_flows - F) // s + 1


def frames_per_window(fps: Fraction, T: float = WINDOW_SECONDS) -> int:
    F = int(round(T * float(fps)))
    if F < 1:
        raise ValueError(f"window of {T}s at {fps} fps holds no frames")
    return F


def build_windows(
    flows,
    fps,
    T: float = WINDOW_SECONDS,
    stride: float = WINDOW_STRIDE_SECONDS,
    subject_id: str | None = None,
    sequence_id: str | None = None,
) -> list[FeatureWindow]:
    """Cut a flow sequence into overlapping fixed-length windows.

    Windows start at t = 0, stride, 2*stride, ...; each copies F = round(T*fps)
    consecutive flow fields into the [2][cells][F] layout.
    """
    fps = as_fps(fps)
    F = frames_per_window(fps, T)
    stride_frames = max(1, int(round(stride * float(fps))))
    arr = flows if isinstance(flows, np.ndarray) else flows_to_array(flows)
    n = arr.shape[0]
    if n < F:
        raise ValueError(f"sequence too short: {n} flow fields < one {T}s window ({F})")
    windows = []
    for w_idx in range((n - F) // stride_frames + 1):
        start = w_idx * stride_frames
        data = np.transpose(arr[start : start + F], (1, 2, 0)).copy()  # [2, cells, F]
        windows.append(
            FeatureWindow(
                data=data,
                t_start=float(start / fps),
                fps=fps,
                subject_id=subject_id,
                sequence_id=sequence_id,
            )
        )
    return windows


def resample_to_fps(flows, fps, target_fps=DEFAULT_FPS):
    """Nearest-frame temporal resampling of a flow sequence.

    The window length F = 60 is calibrated to 15 fps; sequences recorded at
    other rates are resampled before windowing.
    """
    fps = as_fps(fps)
    target = as_fps(target_fps)
    if fps == target:
        return flows
    n = len(flows)
    out = []
    k = 0
    while True:
        src = int(round(float(k * fps / target)))
        if src >= n:
            break
        out.append(flows[src])
        k += 1
    return out


def sqrt_normalize(w: FeatureWindow) -> FeatureWindow:
    """Map every value x to sign(x)*sqrt(|x|), damping extreme flows.

    Applied only on the CNN input path.
    """
    data = np.sign(w.data) * np.sqrt(np.abs(w.data))
    return replace(w, data=data)


def stabilize_mean_subtract(w: FeatureWindow) -> FeatureWindow:
    """Subtract the per-frame mean vector from every cell of that frame.

    Approximates 2-D camera stabilization; the output's frame-wise means are
    zero for both components.
    """
    data = w.data - w.data.mean(axis=1, keepdims=True)
    return replace(w, data=data)


# ---------------------------------------------------------------------------
# Flow cache file (magic "EGFL")
# ---------------------------------------------------------------------------

def write_flow_cache(path, flows, fps) -> None:
    """Write a flow sequence as the little-endian binary cache format.

    Layout: 24-byte header (magic "EGFL", version u16, reserved u16, N u32,
    m_y u16, m_x u16, fps numerator u32, fps denominator u32), then float32
    data of shape [N][2][m_y][m_x], then the validity bitmask ([N][m_y][m_x]
    row-major, packed MSB-first).  Documented in docs/formats.md.
    """
    fps = as_fps(fps)
    n = len(flows)
    if n == 0:
        raise ValueError("refusing to write an empty flow cache")
    m_y, m_x = flows[0].u.shape
    data = np.empty((n, 2, m_y, m_x), dtype="<f4")
    valid = np.empty((n, m_y, m_x), dtype=bool)
    for i, f in enumerate(flows):
        if f.u.shape != (m_y, m_x):
            raise ValueError("flow fields in one cache must share a grid shape")
        data[i, 0] = f.u
        data[i, 1] = f.v
        valid[i] = f.valid
    header = _FLOW_HEADER.pack(
        FLOW_MAGIC, FLOW_VERSION, 0, n, m_y, m_x, fps.numerator, fps.denominator
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
        fh.write(np.packbits(valid.ravel()).tobytes())


def read_flow_cache(path):
    """Read a flow cache; returns (list of FlowField, fps)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _FLOW_HEADER.size:
        raise FormatError(f"{path}: truncated flow cache header")
    magic, version, _, n, m_y, m_x, num, den = _FLOW_HEADER.unpack_from(blob)
    if magic != FLOW_MAGIC:
        raise FormatError(f"{path}: not a flow cache (magic {magic!r})")
    if version != FLOW_VERSION:
        raise FormatError(f"{path}: unsupported flow cache version {version}")
    n_vals = n * 2 * m_y * m_x
    data_end = _FLOW_HEADER.size + 4 * n_vals
    mask_len = (n * m_y * m_x + 7) // 8
    if len(blob) < data_end + mask_len:
        raise FormatError(f"{path}: truncated flow cache payload")
    data = np.frombuffer(blob, dtype="<f4", count=n_vals, offset=_FLOW_HEADER.size)
    data = data.reshape(n, 2, m_y, m_x).astype(np.float64)
    bits = np.frombuffer(blob, dtype=np.uint8, count=mask_len, offset=data_end)
    valid = np.unpackbits(bits, count=n * m_y * m_x).reshape(n, m_y, m_x).astype(bool)
    fps = Fraction(int(num), int(den))
    return (
        [FlowField(u=data[i, 0], v=data[i, 1], valid=valid[i]) for i in range(n)],
        fps,
    )
