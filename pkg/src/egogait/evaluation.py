"""Fusing per-window predictions over a video and biometric metrics.

A classifier back end produces one probability distribution per 4-second
window; a whole video is labeled either by the globally most likely class
(product of per-window posteriors, "MAP") or by the most frequent
single-window prediction ("Mode").  Identification is reported as CMC
curves, verification as ROC/EER, plus a nearest-neighbor gallery/probe
verification mode for descriptors of subjects unseen in training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SequencePrediction:
    """Per-window distributions of one video plus its fused labels."""

    window_probs: np.ndarray  # [n_windows, n_classes]
    map_label: int
    mode_label: int

    def __post_init__(self):
        sums = self.window_probs.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ValueError("window distributions must each sum to 1")


@dataclass(frozen=True)
class RocCurve:
    """Operating points of a score-threshold sweep, FAR ascending."""

    far: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    eer: float
    eer_threshold: float

    def __post_init__(self):
        if (np.diff(self.far) < 0).any():
            raise ValueError("FAR must be non-decreasing along the curve")
        if not 0.0 <= self.eer <= 1.0:
            raise ValueError("EER must lie in [0, 1]")


@dataclass(frozen=True)
class CmcCurve:
    """Accuracy at rank k = 1..n_classes; non-decreasing in k."""

    top_k: np.ndarray

    def __post_init__(self):
        if (np.diff(self.top_k) < -1e-12).any():
            raise ValueError("CMC must be non-decreasing")

    @property
    def top1(self) -> float:
        return float(self.top_k[0])


def map_fuse(window_probs) -> int:
    """Label maximizing the product of per-window posteriors.

    Probabilities are floored at 1e-12 before the log; ties break to the
    lowest class index.
    """
    probs = np.atleast_2d(np.asarray(window_probs, dtype=np.float64))
    if probs.size == 0:
        raise ValueError("cannot fuse an empty prediction list")
    log_sum = np.log(np.maximum(probs, PROB_FLOOR)).sum(axis=0)
    return int(np.argmax(log_sum))


def mode_fuse(window_labels) -> int:
    """Most frequent single-window label; ties break to the lowest label."""
    labels = np.asarray(window_labels, dtype=np.intp)
    if labels.size == 0:
        raise ValueError("cannot fuse an empty label list")
    return int(np.argmax(np.bincount(labels)))


def predict_sequence(window_probs) -> SequencePrediction:
    probs = np.atleast_2d(np.asarray(window_probs, dtype=np.float64))
    return SequencePrediction(
        window_probs=probs,
        map_label=map_fuse(probs),
        mode_label=mode_fuse(np.argmax(probs, axis=1)),
    )


def windows_per_group(duration: float, T: float = 4.0, stride: float = 2.0) -> int:
    """How many stride-spaced windows cover `duration` seconds of video."""
    if duration < T:
        raise ValueError(f"duration {duration}s shorter than one {T}s window")
    return int(round((duration - T) / stride)) + 1


def group_slices(n_windows: int, group_len: int) -> list[slice]:
    """Consecutive non-overlapping groups of windows; leftover tail dropped."""
    if group_len < 1:
        raise ValueError("group_len must be positive")
    return [slice(i * group_len, (i + 1) * group_len) for i in range(n_windows // group_len)]


def cmc(rankings, truths) -> CmcCurve:
    """Cumulative match curve from per-trial class rankings.

    Each ranking must be a permutation of the class indices 0..n-1; top_k is
    the fraction of trials whose truth appears within the first k entries.
    """
    rankings = np.asarray(rankings, dtype=np.intp)
    truths = np.asarray(truths, dtype=np.intp)
    if rankings.ndim != 2 or rankings.shape[0] != truths.shape[0]:
        raise ValueError("need one ranking row per truth label")
    n_classes = rankings.shape[1]
    expected = np.arange(n_classes)
    if not (np.sort(rankings, axis=1) == expected).all():
        raise ValueError("each ranking must be a permutation of the class set")
    ranks = np.argmax(rankings == truths[:, None], axis=1)  # 0-based rank of truth
    counts = np.bincount(ranks, minlength=n_classes)
    return CmcCurve(top_k=np.cumsum(counts) / len(truths))


def rank_classes(probs: np.ndarray) -> np.ndarray:
    """Classes sorted by descending probability; ties to the lowest index."""
    probs = np.atleast_2d(probs)
    # stable sort on -p keeps equal-probability classes in index order
    return np.argsort(-probs, axis=1, kind="stable")


def roc_and_eer(scores, labels) -> RocCurve:
    """ROC/EER of a verification score list (higher = more target-like).

    Sweeps a threshold over all distinct scores with the accept rule
    score >= threshold: FAR is the accepted fraction of non-targets, FRR the
    rejected fraction of targets.  The EER is the crossing FAR = FRR,
    linearly interpolated between adjacent thresholds.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_target = int(labels.sum())
    n_non = int(labels.size - n_target)
    if n_target == 0 or n_non == 0:
        raise ValueError("need both target and non-target trials")

    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    far = np.empty(len(thresholds))
    tpr = np.empty(len(thresholds))
    for i, th in enumerate(thresholds):
        accepted = scores >= th
        far[i] = (accepted & ~labels).sum() / n_non
        tpr[i] = (accepted & labels).sum() / n_target

    frr = 1.0 - tpr
    diff = far - frr  # goes from -1 (strict threshold) towards +1
    eer = None
    eer_th = None
    for i in range(len(diff)):
        if diff[i] == 0.0:
            eer, eer_th = far[i], thresholds[i]
            break
        if i and diff[i - 1] < 0.0 < diff[i]:
            span = diff[i] - diff[i - 1]
            s = -diff[i - 1] / span
            eer = far[i - 1] + s * (far[i] - far[i - 1])
            th0 = thresholds[i - 1] if np.isfinite(thresholds[i - 1]) else thresholds[i]
            eer_th = th0 + s * (thresholds[i] - th0)
            break
    if eer is None:  # all-accept end still below crossing: FAR=1, FRR=0
        eer, eer_th = float(far[-1]), float(thresholds[-1])
    return RocCurve(far=far, tpr=tpr, thresholds=thresholds, eer=float(eer), eer_threshold=float(eer_th))


def _distance_to_gallery(gallery: np.ndarray, probe_vectors: np.ndarray) -> np.ndarray:
    """Per-probe-window Euclidean distance to the nearest gallery item."""
    g2 = (gallery**2).sum(axis=1)
    p2 = (probe_vectors**2).sum(axis=1)
    d2 = p2[:, None] + g2[None, :] - 2.0 * probe_vectors @ gallery.T
    return np.sqrt(np.maximum(d2.min(axis=1), 0.0))


def nn_verify(gallery, probes, threshold: float) -> list[bool]:
    """Accept/reject per probe video by nearest-neighbor voting.

    A probe window is accepted iff its distance to the nearest gallery
    descriptor is below the threshold; the video is accepted iff a strict
    majority of its windows are.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ValueError("gallery must be a nonempty [n, dim] array")
    decisions = []
    for probe in probes:
        vectors = np.asarray(probe, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise ValueError("each probe video needs at least one descriptor")
        dists = _distance_to_gallery(gallery, vectors)
        accepted = int((dists < threshold).sum())
        decisions.append(accepted > vectors.shape[0] / 2)
    return decisions


def nn_video_scores(gallery, probes) -> np.ndarray:
    """Per-video scores whose threshold sweep reproduces nn_verify's voting.

    The video is majority-accepted at threshold t iff its (floor(n/2)+1)-th
    smallest window distance is below t, so that order statistic (negated,
    higher = more target-like) is the video score fed to roc_and_eer.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    scores = []
    for probe in probes:
        vectors = np.asarray(probe, dtype=np.float64)
        dists = np.sort(_distance_to_gallery(gallery, vectors))
        k = vectors.shape[0] // 2  # 0-based index of the deciding distance
        scores.append(-dists[k])
    return np.array(scores)
