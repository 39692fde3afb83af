"""Synthetic pedestrian sequences with exact part masks.

Each identity is a vertical 4-band color signature (head, upper body,
lower body, shoes); frames jitter and translate the figure, two cameras
apply different color casts, and a fraction of frames simulate detector
failures by shifting the figure half out of the box. Masks track the
bands wherever they remain visible, one disjoint channel per part.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from . import tensorio

PART_NAMES = ("head", "upper", "lower", "shoes")
# band boundaries as fractions of the figure height
BAND_EDGES = (0.0, 0.2, 0.5, 0.8, 1.0)
MISDETECT_RATE = 0.2
MIN_COLOR_GAP = 0.2
NUM_CAMERAS = 2
# per-camera RGB gains: strong warm/cool casts make cross-camera
# matching require more than raw color statistics
CAMERA_GAIN = (
    (1.0, 1.0, 1.0),
    (1.45, 0.95, 0.55),
)
CAMERA_LIFT = (0.0, 0.12)


@dataclass
class SequenceSample:
    frames: np.ndarray          # (T, H, W, 3) float32 in [0, 1]
    masks: np.ndarray           # (T, H, W, N) float32 binary
    identity: int
    camera: int
    corrupted: tuple            # frame indices with simulated mis-detections


@dataclass
class Dataset:
    sequences: list
    num_ids: int
    height: int
    width: int
    colors: np.ndarray = None   # (num_ids, 4, 3) band colors, when generated
    seed: int = 0

    def by_identity(self, identity: int) -> list:
        return [s for s in self.sequences if s.identity == identity]


@dataclass
class BatchSpec:
    classes: int = 4
    per_class: int = 4
    frames: int = 4
    stride: int = 8


def _draw_identity_colors(rng: np.random.Generator, num_ids: int) -> np.ndarray:
    """Band colors per identity, rejection-sampled for separation.

    Any two identities differ by at least MIN_COLOR_GAP in some band
    channel.
    """
    colors: list[np.ndarray] = []
    for _ in range(num_ids):
        for attempt in range(10000):
            cand = rng.uniform(0.1, 0.9, size=(4, 3))
            if all(np.max(np.abs(cand - c)) >= MIN_COLOR_GAP for c in colors):
                colors.append(cand)
                break
        else:
            raise ConfigurationError(
                f"could not place {num_ids} separated identities")
    return np.stack(colors)


def _render_frame(rng: np.random.Generator, colors: np.ndarray, h: int, w: int,
                  camera: int, misdetect: bool):
    """One frame plus its part masks."""
    frame = np.full((h, w, 3), 0.35, dtype=np.float64)
    frame += rng.normal(0.0, 0.02, size=frame.shape)
    mask = np.zeros((h, w, len(PART_NAMES)), dtype=np.float32)

    dx = int(round(rng.uniform(-0.1, 0.1) * w))
    dy = int(round(rng.uniform(-0.05, 0.05) * h))
    if misdetect:
        # detector failure: the box slides far off the figure vertically
        dy += int(round(rng.choice([-1, 1]) * rng.uniform(0.3, 0.5) * h))

    left = max(0, int(0.2 * w) + dx)
    right = min(w, int(0.8 * w) + dx)
    for part, (top_f, bot_f) in enumerate(zip(BAND_EDGES[:-1], BAND_EDGES[1:])):
        top = int(round(top_f * h)) + dy
        bot = int(round(bot_f * h)) + dy
        top, bot = max(0, top), min(h, bot)
        if top >= bot or left >= right:
            continue
        frame[top:bot, left:right] = colors[part]
        frame[top:bot, left:right] += rng.normal(0.0, 0.03, size=(bot - top, right - left, 3))
        mask[top:bot, left:right, :] = 0.0
        mask[top:bot, left:right, part] = 1.0

    gain = np.asarray(CAMERA_GAIN[camera])
    frame = np.clip(frame * gain + CAMERA_LIFT[camera], 0.0, 1.0)
    return frame.astype(np.float32), mask


def generate_synthetic(num_ids: int, seqs_per_id: int, frames_per_seq: int,
                       seed: int, height: int = 64, width: int = 32) -> Dataset:
    """Deterministic synthetic dataset; same seed, same bytes."""
    if min(num_ids, seqs_per_id, frames_per_seq) <= 0:
        raise ConfigurationError(
            f"counts must be positive: ids={num_ids} seqs={seqs_per_id} frames={frames_per_seq}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    colors = _draw_identity_colors(rng, num_ids)
    sequences = []
    for identity in range(num_ids):
        for s in range(seqs_per_id):
            camera = s % NUM_CAMERAS
            frames = np.empty((frames_per_seq, height, width, 3), dtype=np.float32)
            masks = np.empty((frames_per_seq, height, width, len(PART_NAMES)),
                             dtype=np.float32)
            corrupted = []
            for t in range(frames_per_seq):
                misdetect = bool(rng.random() < MISDETECT_RATE)
                if misdetect:
                    corrupted.append(t)
                frames[t], masks[t] = _render_frame(
                    rng, colors[identity], height, width, camera, misdetect)
            sequences.append(SequenceSample(frames, masks, identity, camera,
                                            tuple(corrupted)))
    return Dataset(sequences, num_ids, height, width, colors, seed)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"


def write_dataset(dataset: Dataset, out_dir) -> None:
    """One directory per identity, one per sequence, plus the manifest.

    Manifest line: identity, camera, relative path, semicolon-joined
    corrupted frame indices (empty when clean).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    counters: dict[int, int] = {}
    for seq in dataset.sequences:
        idx = counters.get(seq.identity, 0)
        counters[seq.identity] = idx + 1
        rel = f"id_{seq.identity:04d}/seq_{idx:03d}"
        seq_dir = out / rel
        seq_dir.mkdir(parents=True, exist_ok=True)
        tensorio.write_tensor(seq_dir / "frames.iaut", seq.frames)
        tensorio.write_tensor(seq_dir / "masks.iaut", seq.masks)
        corrupted = ";".join(str(i) for i in seq.corrupted)
        lines.append(f"{seq.identity},{seq.camera},{rel},{corrupted}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FormatError(f"no {MANIFEST} in {root}")
    sequences = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"{manifest}:{lineno}: expected 4 fields, got {len(parts)}")
        identity, camera, rel, corrupted = parts
        frames = tensorio.read_tensor(root / rel / "frames.iaut")
        masks = tensorio.read_tensor(root / rel / "masks.iaut")
        bad = tuple(int(i) for i in corrupted.split(";") if i)
        sequences.append(SequenceSample(frames, masks, int(identity),
                                        int(camera), bad))
    if not sequences:
        raise FormatError(f"{manifest} lists no sequences")
    num_ids = max(s.identity for s in sequences) + 1
    h, w = sequences[0].frames.shape[1:3]
    return Dataset(sequences, num_ids, h, w)


def load_sequence(seq_dir) -> SequenceSample:
    """Load one sequence directory (frames.iaut + masks.iaut)."""
    d = Path(seq_dir)
    frames = tensorio.read_tensor(d / "frames.iaut")
    masks = tensorio.read_tensor(d / "masks.iaut")
    return SequenceSample(frames, masks, identity=-1, camera=-1, corrupted=())


# ---------------------------------------------------------------------------
# sampling and splits
# ---------------------------------------------------------------------------

def split_identities(num_ids: int, train_ids: int, seed: int):
    """Deterministic identity split: (train list, test list)."""
    if not 0 < train_ids <= num_ids:
        raise ConfigurationError(f"train_ids={train_ids} of {num_ids} identities")
    order = np.random.default_rng(np.random.PCG64(seed)).permutation(num_ids)
    return sorted(order[:train_ids].tolist()), sorted(order[train_ids:].tolist())


def sample_frames(seq: SequenceSample, frames: int, stride: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Indices of `frames` frames at the given stride, wrapping when short."""
    length = seq.frames.shape[0]
    start = int(rng.integers(0, length))
    return (start + stride * np.arange(frames)) % length


def sample_batch(dataset: Dataset, spec: BatchSpec, seed_or_rng,
                 identities=None):
    """An identity-balanced batch: `classes` ids, `per_class` sequences each.

    Returns (frames (B, T, H, W, 3), masks (B, T, H, W, N), labels (B,),
    cameras (B,)) with B = classes * per_class, deterministic per seed.
    """
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(np.random.PCG64(seed_or_rng)))
    pool = sorted(set(identities)) if identities is not None \
        else list(range(dataset.num_ids))
    if spec.classes > len(pool):
        raise ConfigurationError(
            f"batch needs {spec.classes} identities, pool has {len(pool)}")
    if spec.per_class < 1:
        raise ConfigurationError("per_class must be at least 1")
    chosen = rng.choice(pool, size=spec.classes, replace=False)
    frames_out, masks_out, labels, cameras = [], [], [], []
    for identity in chosen:
        seqs = dataset.by_identity(int(identity))
        if len(seqs) < spec.per_class:
            raise ConfigurationError(
                f"identity {identity} has {len(seqs)} sequences, need {spec.per_class}")
        picks = rng.choice(len(seqs), size=spec.per_class, replace=False)
        for p in picks:
            seq = seqs[int(p)]
            idx = sample_frames(seq, spec.frames, spec.stride, rng)
            frames_out.append(seq.frames[idx])
            masks_out.append(seq.masks[idx])
            labels.append(seq.identity)
            cameras.append(seq.camera)
    return (np.stack(frames_out), np.stack(masks_out),
            np.asarray(labels), np.asarray(cameras))


# ---------------------------------------------------------------------------
# mask resizing
# ---------------------------------------------------------------------------

def _area_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) fractional-coverage weights; rows sum to 1."""
    w = np.zeros((dst, src))
    ratio = src / dst
    for i in range(dst):
        a, b = i * ratio, (i + 1) * ratio
        for j in range(int(np.floor(a)), min(int(np.ceil(b)), src)):
            w[i, j] = min(b, j + 1) - max(a, j)
    return w / ratio


def resize_masks(masks: np.ndarray, target_hw) -> np.ndarray:
    """Area-average masks (..., H, W, N) down to (..., h, w, N)."""
    h, w = target_hw
    H, W = masks.shape[-3], masks.shape[-2]
    if h > H or w > W:
        raise ConfigurationError(f"target {target_hw} exceeds source {(H, W)}")
    wh = _area_weights(H, h)
    ww = _area_weights(W, w)
    out = np.einsum("ph,...hwn,qw->...pqn", wh, masks.astype(np.float64), ww)
    return out.astype(np.float32)
