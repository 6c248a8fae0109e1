"""Deterministic synthetic egocentric gait flow, for desk-scale benchmarks.

Each synthetic walker is a small physical model: vertical bob (fundamental
at twice the step frequency, i.e. one bounce per foot strike), lateral sway
at the step frequency, both with per-subject harmonic mixes, plus an
oscillating roll that moves the right side of the frame up while the left
side moves down.  Translation terms are identical across the flow grid;
the roll term scales with the signed horizontal cell offset.  White noise
is added per cell.  All randomness is derived from (profile seed, session
seed) streams, so sequences are reproducible and independently parallel.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .flowgrid import FlowField, FlowGridSpec, as_fps

N_HARMONICS = 4

_SESSION_CAMERAS = [("D1", "same-day"), ("D2", "same-day"), ("D3", "week-later")]


@dataclass(frozen=True)
class WalkerProfile:
    """Subject-specific gait parameters.

    harmonic_amps / phase_offsets hold one (bob, sway) pair per harmonic
    1..4; amplitudes are px/frame, rotation_amp is the vertical px/frame at
    the frame edge.
    """

    step_freq: float
    harmonic_amps: tuple[tuple[float, float], ...]
    phase_offsets: tuple[tuple[float, float], ...]
    rotation_amp: float
    rotation_phase: float
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if self.step_freq <= 0:
            raise ValueError("step_freq must be positive")
        if len(self.harmonic_amps) != N_HARMONICS or len(self.phase_offsets) != N_HARMONICS:
            raise ValueError(f"need {N_HARMONICS} harmonic entries")
        if any(a < 0 or s < 0 for a, s in self.harmonic_amps) or self.rotation_amp < 0:
            raise ValueError("amplitudes must be non-negative")


@dataclass
class SyntheticSequence:
    sequence_id: str
    camera_id: str
    session_tag: str
    fps: Fraction
    flows: list[FlowField]


@dataclass
class SyntheticSubject:
    subject_id: str
    profile: WalkerProfile
    sequences: list[SyntheticSequence]


@dataclass
class SyntheticDataset:
    subjects: list[SyntheticSubject]
    spec: FlowGridSpec
    fps: Fraction


def _signed_x_offsets(spec: FlowGridSpec) -> np.ndarray:
    """Per-cell horizontal offset from grid center, normalized to [-1, 1],
    row-major cell order; symmetric so its frame mean is zero."""
    offs = np.arange(spec.m_x) - (spec.m_x - 1) / 2.0
    if spec.m_x > 1:
        offs = offs / offs.max()
    return np.tile(offs, spec.m_y)


def gen_flow_sequence(
    profile: WalkerProfile,
    duration: float,
    fps=15,
    spec: FlowGridSpec = FlowGridSpec(),
    session_seed: int = 0,
    amp_jitter: float = 0.0,
) -> list[FlowField]:
    """Generate one session's flow fields, deterministic per
    (profile.seed, session_seed).

    amp_jitter rescales all amplitudes by a factor drawn uniformly from
    1 +- amp_jitter for this session (the "different camera" perturbation).
    """
    fps = as_fps(fps)
    n = int(round(duration * float(fps)))
    if n < 1:
        raise ValueError("duration too short for a single frame")
    rng = np.random.default_rng(np.random.SeedSequence((int(profile.seed), int(session_seed))))
    scale = 1.0 + amp_jitter * rng.uniform(-1.0, 1.0) if amp_jitter else 1.0

    t = np.arange(n) / float(fps)
    f = profile.step_freq
    bob = np.zeros(n)
    sway = np.zeros(n)
    for h, ((bob_a, sway_a), (bob_p, sway_p)) in enumerate(
        zip(profile.harmonic_amps, profile.phase_offsets), start=1
    ):
        bob += scale * bob_a * np.sin(2 * np.pi * h * (2 * f) * t + bob_p)
        sway += scale * sway_a * np.sin(2 * np.pi * h * f * t + sway_p)
    roll = scale * profile.rotation_amp * np.sin(2 * np.pi * f * t + profile.rotation_phase)

    x_off = _signed_x_offsets(spec)  # [cells]
    n_cells = spec.n_cells
    u = sway[:, None] + rng.normal(0.0, profile.noise_sigma, size=(n, n_cells))
    v = (
        bob[:, None]
        + roll[:, None] * x_off[None, :]
        + rng.normal(0.0, profile.noise_sigma, size=(n, n_cells))
    )
    valid = np.ones((spec.m_y, spec.m_x), dtype=bool)
    return [
        FlowField(
            u=u[i].reshape(spec.m_y, spec.m_x),
            v=v[i].reshape(spec.m_y, spec.m_x),
            valid=valid.copy(),
        )
        for i in range(n)
    ]


def separated_frequencies(n, rng, lo, hi, min_sep) -> np.ndarray:
    """n step frequencies in [lo, hi] with pairwise separation >= min_sep.

    Uniform over the separation-constrained set (sorted-uniform plus fixed
    spacing), then randomly assigned to subjects; raises when the band
    cannot hold n frequencies at that spacing.
    """
    span = hi - lo
    slack = span - (n - 1) * min_sep
    if n < 1 or slack < 0:
        raise ValueError(
            f"cannot satisfy step-frequency separation {min_sep} Hz for "
            f"{n} subjects in [{lo}, {hi}]"
        )
    base = np.sort(rng.uniform(0.0, slack, size=n)) + np.arange(n) * min_sep + lo
    return base[rng.permutation(n)]


def sample_profiles(
    n_subjects: int,
    master_seed: int,
    freq_range=(1.4, 2.3),
    min_freq_sep: float = 0.04,
    noise_sigma: float = 0.35,
) -> list[WalkerProfile]:
    """Draw one WalkerProfile per subject from seeded distributions."""
    if n_subjects < 2:
        raise ValueError("need at least 2 subjects")
    rng = np.random.default_rng(np.random.SeedSequence((int(master_seed), 0)))
    freqs = separated_frequencies(n_subjects, rng, freq_range[0], freq_range[1], min_freq_sep)
    decay = np.array([1.0, 0.45, 0.25, 0.12])
    profiles = []
    for i in range(n_subjects):
        bob_base = rng.uniform(0.7, 1.3)
        sway_base = rng.uniform(0.4, 0.9)
        amps = []
        for h in range(N_HARMONICS):
            amps.append(
                (
                    bob_base * decay[h] * rng.uniform(0.5, 1.5),
                    sway_base * decay[h] * rng.uniform(0.5, 1.5),
                )
            )
        phases = tuple(
            (rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi)) for _ in range(N_HARMONICS)
        )
        profiles.append(
            WalkerProfile(
                step_freq=float(freqs[i]),
                harmonic_amps=tuple(amps),
                phase_offsets=phases,
                rotation_amp=float(rng.uniform(0.35, 0.9)),
                rotation_phase=float(rng.uniform(0, 2 * np.pi)),
                noise_sigma=float(noise_sigma),
                seed=int(rng.integers(0, 2**31)),
            )
        )
    return profiles


def gen_population(
    n_subjects: int,
    sessions_per_subject: int = 2,
    duration: float = 60.0,
    master_seed: int = 0,
    fps=15,
    spec: FlowGridSpec = FlowGridSpec(),
    freq_range=(1.4, 2.3),
    min_freq_sep: float = 0.04,
    noise_sigma: float = 0.35,
    amp_jitter: float = 0.05,
) -> SyntheticDataset:
    """Generate a full labeled population of synthetic walking sessions.

    Session s of every subject is tagged as camera D{s+1} so the split
    protocols for real data apply unchanged.
    """
    fps = as_fps(fps)
    profiles = sample_profiles(
        n_subjects, master_seed, freq_range=freq_range,
        min_freq_sep=min_freq_sep, noise_sigma=noise_sigma,
    )
    subjects = []
    for i, profile in enumerate(profiles):
        subject_id = f"s{i:02d}"
        sequences = []
        for s in range(sessions_per_subject):
            camera, tag = (
                _SESSION_CAMERAS[s] if s < len(_SESSION_CAMERAS) else (f"D{s + 1}", "extra")
            )
            sequences.append(
                SyntheticSequence(
                    sequence_id=f"{camera.lower()}",
                    camera_id=camera,
                    session_tag=tag,
                    fps=fps,
                    flows=gen_flow_sequence(
                        profile, duration, fps=fps, spec=spec,
                        session_seed=s, amp_jitter=amp_jitter,
                    ),
                )
            )
        subjects.append(SyntheticSubject(subject_id=subject_id, profile=profile,
                                         sequences=sequences))
    return SyntheticDataset(subjects=subjects, spec=spec, fps=fps)


# ---------------------------------------------------------------------------
# Optional textured-image renderer (end-to-end exercise of the flow solver)
# ---------------------------------------------------------------------------

def periodic_texture(size, seed=0, smooth=3) -> np.ndarray:
    """Tileable smooth random texture in [0, 1] (wrap-around blurred noise)."""
    rng = np.random.default_rng(seed)
    img = rng.random(size)
    for _ in range(smooth):
        img = sum(
            w * np.roll(np.roll(img, dy, axis=0), dx, axis=1)
            for (dy, dx), w in [
                ((0, 0), 0.25), ((0, 1), 0.125), ((0, -1), 0.125),
                ((1, 0), 0.125), ((-1, 0), 0.125),
                ((1, 1), 0.0625), ((1, -1), 0.0625),
                ((-1, 1), 0.0625), ((-1, -1), 0.0625),
            ]
        )
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def render_translation_frames(du, dv, size=(128, 224), seed=0) -> list[np.ndarray]:
    """Frames of a periodic texture translating by (du[k], dv[k]) px/frame.

    Wrap-around bilinear sampling, so the prescribed motion holds across the
    whole frame including borders; feeding consecutive pairs to the flow
    solver should recover (du, dv).
    """
    du = np.asarray(du, dtype=np.float64)
    dv = np.asarray(dv, dtype=np.float64)
    h, w = size
    tex = periodic_texture(size, seed=seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = []
    off_x, off_y = 0.0, 0.0
    for k in range(len(du) + 1):
        sy = ys - off_y
        sx = xs - off_x
        y0 = np.floor(sy).astype(np.intp)
        x0 = np.floor(sx).astype(np.intp)
        wy = sy - y0
        wx = sx - x0
        y0 %= h
        x0 %= w
        y1 = (y0 + 1) % h
        x1 = (x0 + 1) % w
        frame = (
            tex[y0, x0] * (1 - wy) * (1 - wx)
            + tex[y0, x1] * (1 - wy) * wx
            + tex[y1, x0] * wy * (1 - wx)
            + tex[y1, x1] * wy * wx
        )
        frames.append(frame)
        if k < len(du):
            off_x += du[k]
            off_y += dv[k]
    return frames
