"""Dataset manifests, frame loading and train/test split protocols.

A dataset is described by a single JSON manifest (see docs/formats.md):
subjects, each with sequences tagged by camera and session.  Sequences
reference either a directory of image frames (real data; lexicographic
file order is temporal order) or a flow-cache file (synthetic data), which
makes both interchangeable downstream.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ManifestError, ProtocolError
from .flowgrid import as_fps

FRAME_SUFFIXES = (".png", ".pgm")
IDENTIFICATION_PROTOCOLS = ("evpr-identification", "fpsi-identification")
PROTOCOLS = IDENTIFICATION_PROTOCOLS + ("evpr-verification",)

# fixed luma weights for bit-exact grayscale conversion
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SequenceRecord:
    sequence_id: str
    camera_id: str
    session_tag: str
    fps: Fraction
    frame_dir: Path | None
    frame_count: int
    flow_cache: Path | None = None


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    sequences: tuple[SequenceRecord, ...]


@dataclass(frozen=True)
class DatasetManifest:
    subjects: tuple[SubjectRecord, ...]
    root: Path

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise ManifestError(f"unknown subject {subject_id!r}")

    def sequence(self, subject_id: str, sequence_id: str) -> SequenceRecord:
        for seq in self.subject(subject_id).sequences:
            if seq.sequence_id == sequence_id:
                return seq
        raise ManifestError(f"unknown sequence {sequence_id!r} for subject {subject_id!r}")


@dataclass(frozen=True)
class FrameSequence:
    """Ordered grayscale frames (intensities in [0, 1]) plus their rate."""

    frames: np.ndarray  # [N, H, W]
    fps: Fraction

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise ValueError("frames must be a [N, H, W] array")
        if self.frames.shape[0] < 2:
            raise ValueError("sequence too short: flow needs at least 2 frames")


@dataclass(frozen=True)
class SplitPlan:
    train: tuple[tuple[str, str], ...]  # (subject_id, sequence_id)
    test: tuple[tuple[str, str], ...]
    protocol_name: str

    def __post_init__(self):
        if set(self.train) & set(self.test):
            raise ValueError("train and test overlap at the sequence level")


def _frame_files(frame_dir: Path) -> list[Path]:
    return sorted(
        p for p in frame_dir.iterdir()
        if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES
    )


def parse_manifest(path) -> DatasetManifest:
    """Load and validate a manifest JSON file.

    Checks id uniqueness, fps positivity and that every referenced frame
    directory (or flow cache) exists with the declared frame count.
    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("subjects"), list):
        raise ManifestError(f"{path}: manifest must be an object with a 'subjects' list")

    root = path.parent
    subjects = []
    seen_subjects = set()
    for s_doc in doc["subjects"]:
        try:
            subject_id = s_doc["subject_id"]
            seq_docs = s_doc["sequences"]
        except (TypeError, KeyError) as e:
            raise ManifestError(f"{path}: malformed subject record ({e})") from e
        if subject_id in seen_subjects:
            raise ManifestError(f"{path}: duplicate subject {subject_id!r}")
        seen_subjects.add(subject_id)

        sequences = []
        seen_seqs = set()
        for q in seq_docs:
            try:
                seq_id = q["sequence_id"]
                camera = q["camera_id"]
                tag = q["session_tag"]
                fps = as_fps(q["fps"])
            except (TypeError, KeyError, ValueError) as e:
                raise ManifestError(
                    f"{path}: malformed sequence for subject {subject_id!r} ({e})"
                ) from e
            if seq_id in seen_seqs:
                raise ManifestError(
                    f"{path}: duplicate sequence {seq_id!r} for subject {subject_id!r}"
                )
            seen_seqs.add(seq_id)

            frame_dir = None
            frame_count = int(q.get("frame_count", 0))
            flow_cache = None
            if "flow_cache" in q:
                flow_cache = root / q["flow_cache"]
                if not flow_cache.is_file():
                    raise ManifestError(
                        f"{path}: flow cache missing for {subject_id}/{seq_id}: {flow_cache}"
                    )
            elif "frame_dir" in q:
                frame_dir = root / q["frame_dir"]
                if not frame_dir.is_dir():
                    raise ManifestError(
                        f"{path}: frame dir missing for {subject_id}/{seq_id}: {frame_dir}"
                    )
                actual = len(_frame_files(frame_dir))
                if frame_count < 0:
                    raise ManifestError(f"{path}: negative frame_count for {seq_id!r}")
                if actual != frame_count:
                    raise ManifestError(
                        f"{path}: {subject_id}/{seq_id} declares frame_count="
                        f"{frame_count} but {frame_dir} holds {actual} frames"
                    )
            else:
                raise ManifestError(
                    f"{path}: sequence {subject_id}/{seq_id} needs frame_dir or flow_cache"
                )
            sequences.append(
                SequenceRecord(
                    sequence_id=seq_id, camera_id=camera, session_tag=tag,
                    fps=fps, frame_dir=frame_dir, frame_count=frame_count,
                    flow_cache=flow_cache,
                )
            )
        subjects.append(SubjectRecord(subject_id=subject_id, sequences=tuple(sequences)))
    return DatasetManifest(subjects=tuple(subjects), root=root)


def _to_gray(arr: np.ndarray, filename) -> np.ndarray:
    if arr.ndim == 2:
        if arr.dtype == np.uint8:
            return arr / 255.0
        if arr.dtype == np.uint16 or arr.dtype.kind == "i":
            return arr / float(np.iinfo(arr.dtype).max if arr.dtype.kind == "u" else 65535)
        return arr.astype(np.float64)
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        rgb = arr[:, :, :3].astype(np.float64)
        return (rgb @ _LUMA) / 255.0
    raise ManifestError(f"unsupported image layout {arr.shape} in {filename}")


def load_sequence(manifest: DatasetManifest, subject_id: str, sequence_id: str) -> FrameSequence:
    """Load a sequence's frames in lexicographic filename order.

    Color frames are converted with the fixed luma combination
    0.299 R + 0.587 G + 0.114 B and every frame is scaled to [0, 1].
    """
    from PIL import Image, UnidentifiedImageError

    record = manifest.sequence(subject_id, sequence_id)
    if record.frame_dir is None:
        raise ManifestError(
            f"{subject_id}/{sequence_id} has no frame directory (flow-cache only)"
        )
    files = _frame_files(record.frame_dir)
    if len(files) < 2:
        raise ManifestError(f"{subject_id}/{sequence_id}: sequence too short ({len(files)} frames)")
    frames = []
    shape = None
    for f in files:
        try:
            with Image.open(f) as img:
                if img.mode == "P":
                    img = img.convert("RGB")
                arr = np.asarray(img)
        except (OSError, UnidentifiedImageError) as e:
            raise ManifestError(f"unreadable frame {f}: {e}") from e
        gray = _to_gray(arr, f)
        if shape is None:
            shape = gray.shape
        elif gray.shape != shape:
            raise ManifestError(
                f"frame {f} has size {gray.shape[::-1]}, expected {shape[::-1]}"
            )
        frames.append(gray)
    return FrameSequence(frames=np.stack(frames), fps=record.fps)


def _identification_split(manifest, protocol_name):
    train, test = [], []
    if protocol_name == "evpr-identification":
        for s in manifest.subjects:
            tr = [q.sequence_id for q in s.sequences if q.camera_id == "D1"]
            te = [q.sequence_id for q in s.sequences if q.camera_id in ("D2", "D3")]
            if tr and not te:
                warnings.warn(
                    f"subject {s.subject_id} has only D1 data; excluded from test"
                )
            if not tr:
                warnings.warn(f"subject {s.subject_id} has no D1 data; excluded from train")
            train += [(s.subject_id, q) for q in tr]
            test += [(s.subject_id, q) for q in te]
    else:  # fpsi-identification: first 80% of each subject's sequences train
        for s in manifest.subjects:
            n = len(s.sequences)
            cut = int(np.floor(0.8 * n))
            if cut == 0 or cut == n:
                warnings.warn(
                    f"subject {s.subject_id} has too few sequences for an 80/20 split"
                )
            train += [(s.subject_id, q.sequence_id) for q in s.sequences[:cut]]
            test += [(s.subject_id, q.sequence_id) for q in s.sequences[cut:]]
    if not train or not test:
        raise ProtocolError(f"manifest tags cannot support protocol {protocol_name!r}")
    return train, test


def _verification_split(manifest, seed, target_subject_id):
    ids = [s.subject_id for s in manifest.subjects]
    if target_subject_id is None:
        target_subject_id = ids[0]
    if target_subject_id not in ids:
        raise ProtocolError(f"unknown target subject {target_subject_id!r}")
    others = [i for i in ids if i != target_subject_id]
    if len(others) < 31:
        raise ProtocolError(
            "evpr-verification needs 31 non-target subjects "
            f"(15 train + 16 test), manifest has {len(others)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 17)))
    order = rng.permutation(len(others))
    train_subjects = sorted(others[i] for i in order[:15])
    test_subjects = sorted(others[i] for i in order[15:31])

    def cam_seqs(subject_id, camera):
        return [
            (subject_id, q.sequence_id)
            for q in manifest.subject(subject_id).sequences
            if q.camera_id == camera
        ]

    train = cam_seqs(target_subject_id, "D1")
    for sid in train_subjects:
        train += cam_seqs(sid, "D1")
    test = cam_seqs(target_subject_id, "D2")
    for sid in test_subjects:
        test += cam_seqs(sid, "D2")
    if not train or not test:
        raise ProtocolError("manifest lacks D1/D2 sequences for evpr-verification")
    return train, test


def make_split(
    manifest: DatasetManifest,
    protocol_name: str,
    seed: int = 0,
    target_subject_id: str | None = None,
) -> SplitPlan:
    """Materialize a deterministic train/test plan for a named protocol.

    evpr-identification: camera D1 trains, D2/D3 test.
    fpsi-identification: first 80% of each subject's sequences (manifest
    order = chronological) train, the rest test.
    evpr-verification: the target plus a seeded choice of 15 non-target
    subjects train (camera D1); the target plus the 16 remaining
    non-targets test (camera D2); no non-target appears on both sides.
    """
    if protocol_name not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol_name!r}")
    if protocol_name in IDENTIFICATION_PROTOCOLS:
        train, test = _identification_split(manifest, protocol_name)
    else:
        train, test = _verification_split(manifest, seed, target_subject_id)
    return SplitPlan(train=tuple(train), test=tuple(test), protocol_name=protocol_name)


def write_manifest(path, subjects) -> None:
    """Serialize manifest records back to JSON (paths relative to the file)."""
    doc = {"subjects": []}
    for s in subjects:
        entry = {"subject_id": s.subject_id, "sequences": []}
        for q in s.sequences:
            rec = {
                "sequence_id": q.sequence_id,
                "camera_id": q.camera_id,
                "session_tag": q.session_tag,
                "fps": [q.fps.numerator, q.fps.denominator],
            }
            if q.flow_cache is not None:
                rec["flow_cache"] = str(q.flow_cache)
            else:
                rec["frame_dir"] = str(q.frame_dir)
                rec["frame_count"] = q.frame_count
            entry["sequences"].append(rec)
        doc["subjects"].append(entry)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
