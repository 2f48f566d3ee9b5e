"""Pseudo-label teachers, the on-disk label cache, auxiliary heads and their losses."""

import json
import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.nn import functional as F

from .errors import DataError, ShapeError, StorageError, ValidationError
from .pipeline import resample_nearest, segment_bounds

LABELS_FILE = "labels.jsonl"
MASK_DIR = "masks"
# share of frame pixels the synthetic teacher marks as human around the blob
SYNTH_MASK_FRACTION = 0.3


@dataclass(eq=False)
class PseudoLabelRecord:
    video_id: str
    segment_index: int
    scene_class: int
    human_mask: np.ndarray  # uint8 {0, 1}, frame resolution

    def __eq__(self, other):
        if not isinstance(other, PseudoLabelRecord):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.segment_index == other.segment_index
            and self.scene_class == other.scene_class
            and self.human_mask.shape == other.human_mask.shape
            and np.array_equal(self.human_mask, other.human_mask)
        )

    @property
    def key(self):
        return (self.video_id, self.segment_index)

    def foreground_fraction(self):
        return float(self.human_mask.mean())


def mask_filename(video_id, segment_index):
    return f"{MASK_DIR}/{video_id}_{segment_index:03d}.png"


def segment_center(n_frames, n_seg, segment_index):
    start, stop = segment_bounds(n_frames, n_seg)[segment_index]
    return start + (stop - start) // 2


def _stable_seed(*parts):
    return [zlib.crc32(str(p).encode()) for p in parts]


class SyntheticTeacher:
    """Deterministic stand-in for the human-parsing and scene teachers.

    Videos carrying generator latents (see ``pipeline.synth_dataset``) get a
    mask centred on the moving blob and their latent scene id as scene class;
    any other video gets a seeded low-frequency mask and a hashed scene class.
    """

    def __init__(self, seed=0, k_scene=365):
        self.seed = seed
        self.k_scene = k_scene

    def label(self, video, segment_index, n_seg):
        frame_index = segment_center(video.n_frames, n_seg, segment_index)
        height, width = video.frame_size()
        latent = video.latent
        if latent is not None:
            scene_class = int(latent["scene"])
            cx, cy = latent["track"][frame_index]
            mask = _nearest_fraction_mask(height, width, cx, cy, SYNTH_MASK_FRACTION)
        else:
            scene_class = _stable_seed(self.seed, video.video_id)[1] % self.k_scene
            mask = self._pattern_mask(video.video_id, segment_index, height, width)
        if not 0 <= scene_class < self.k_scene:
            raise ValidationError(
                f"scene class {scene_class} for {video.video_id} is outside [0, {self.k_scene})"
            )
        return PseudoLabelRecord(video.video_id, segment_index, scene_class, mask)

    def _pattern_mask(self, video_id, segment_index, height, width):
        rng = np.random.default_rng(_stable_seed(self.seed, video_id, segment_index))
        yy, xx = np.mgrid[0:height, 0:width]
        u, v = yy / height, xx / width
        field = np.zeros((height, width))
        for _ in range(4):
            fy, fx = rng.uniform(-2.0, 2.0, size=2)
            field += rng.normal() * np.cos(2 * np.pi * (fy * u + fx * v) + rng.uniform(0, 2 * np.pi))
        fraction = rng.uniform(0.25, 0.55)
        threshold = np.quantile(field, 1.0 - fraction)
        return (field > threshold).astype(np.uint8)


def _nearest_fraction_mask(height, width, cx, cy, fraction):
    yy, xx = np.mgrid[0:height, 0:width]
    dist = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2
    threshold = np.quantile(dist, fraction)
    return (dist <= threshold).astype(np.uint8)


def read_mask_png(path):
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except FileNotFoundError:
        raise DataError(f"missing mask file: {path}") from None
    except OSError as exc:
        raise DataError(f"unreadable mask file {path}: {exc}") from None
    if arr.ndim != 2:
        raise ValidationError(f"mask {path} must be single-channel, got shape {arr.shape}")
    return (arr > 127).astype(np.uint8)


def write_mask_png(path, mask):
    _atomic_write(path, lambda f: Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(f, format="PNG"))


def _atomic_write(path, writer):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            writer(f)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc.strerror or exc}") from None


def _parse_manifest(manifest_path):
    manifest_path = Path(manifest_path)
    try:
        lines = manifest_path.read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"missing label manifest: {manifest_path}") from None
    except OSError as exc:
        raise DataError(f"cannot read label manifest {manifest_path}: {exc.strerror}") from None
    rows = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            rows.append(
                (str(row["video_id"]), int(row["segment_index"]), int(row["scene_class"]), str(row["mask"]))
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ValidationError(f"{manifest_path}:{lineno}: malformed label row ({exc})") from None
    return rows


class FileTeacher:
    """Serves pseudo-labels from a label manifest and its mask PNGs."""

    def __init__(self, manifest_path, k_scene=365):
        self.manifest_path = Path(manifest_path)
        self.k_scene = k_scene
        root = self.manifest_path.parent
        self._records = {}
        for video_id, segment_index, scene_class, mask_rel in _parse_manifest(self.manifest_path):
            if not 0 <= scene_class < k_scene:
                raise ValidationError(
                    f"{self.manifest_path}: scene_class {scene_class} for "
                    f"{video_id}/{segment_index} is outside [0, {k_scene})"
                )
            mask = read_mask_png(root / mask_rel)
            record = PseudoLabelRecord(video_id, segment_index, scene_class, mask)
            self._records[record.key] = record

    def __len__(self):
        return len(self._records)

    def records(self):
        return [self._records[k] for k in sorted(self._records)]

    def get(self, video_id, segment_index):
        return self._records.get((video_id, segment_index))

    def label(self, video, segment_index, n_seg):
        record = self.get(video.video_id, segment_index)
        if record is None:
            raise DataError(
                f"{self.manifest_path}: no pseudo-label for {video.video_id} segment {segment_index}"
            )
        return record


def synthetic_teacher(seed=0, k_scene=365):
    return SyntheticTeacher(seed, k_scene)


def file_teacher(manifest_path, k_scene=365):
    return FileTeacher(manifest_path, k_scene)


def write_label_cache(records, out_dir):
    """Write records plus manifest in one go (used for fixtures and round-trips)."""
    out_dir = Path(out_dir)
    rows = []
    for r in sorted(records, key=lambda r: r.key):
        rel = mask_filename(r.video_id, r.segment_index)
        write_mask_png(out_dir / rel, r.human_mask)
        rows.append(_manifest_row(r, rel))
    _write_manifest(out_dir, rows)
    return out_dir / LABELS_FILE


def _manifest_row(record, rel):
    return json.dumps(
        {
            "video_id": record.video_id,
            "segment_index": record.segment_index,
            "scene_class": record.scene_class,
            "mask": rel,
        }
    )


def _write_manifest(out_dir, rows):
    text = "".join(row + "\n" for row in rows)
    _atomic_write(Path(out_dir) / LABELS_FILE, lambda f: f.write(text.encode()))


def precompute_labels(videos, teacher, out_dir, n_seg):
    """Fill the label cache for every (video, segment); returns records written.

    Existing manifest rows whose mask file is present are kept, so an
    interrupted run resumes and a complete cache is left untouched.
    """
    out_dir = Path(out_dir)
    done = {}
    if (out_dir / LABELS_FILE).exists():
        for video_id, seg, scene_class, rel in _parse_manifest(out_dir / LABELS_FILE):
            if (out_dir / rel).exists():
                done[(video_id, seg)] = (scene_class, rel)
    writes = 0
    for video in videos:
        for seg in range(n_seg):
            if (video.video_id, seg) in done:
                continue
            record = teacher.label(video, seg, n_seg)
            rel = mask_filename(video.video_id, seg)
            write_mask_png(out_dir / rel, record.human_mask)
            done[record.key] = (record.scene_class, rel)
            rows = [
                _manifest_row(PseudoLabelRecord(v, s, c, None), r)
                for (v, s), (c, r) in sorted(done.items())
            ]
            _write_manifest(out_dir, rows)
            writes += 1
    return writes


def load_label_cache(labels_dir, videos, n_seg, k_scene):
    """Load the cache and check that it covers every (video, segment)."""
    manifest = Path(labels_dir) / LABELS_FILE
    if not manifest.exists():
        raise DataError(
            f"no pseudo-labels at {manifest}; run `kinet pseudolabel --data <dataset> --out {labels_dir}` first"
        )
    teacher = FileTeacher(manifest, k_scene)
    missing = [
        f"{v.video_id}/{s}" for v in videos for s in range(n_seg) if teacher.get(v.video_id, s) is None
    ]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise DataError(
            f"pseudo-label cache {manifest} is incomplete ({len(missing)} missing: {shown}); "
            "rerun `kinet pseudolabel` to finish it"
        )
    return teacher


class SceneHead(nn.Linear):
    def __init__(self, d, k_scene):
        super().__init__(d, k_scene)


class HumanHead(nn.Conv2d):
    """Per-pixel person/background logits at feature resolution."""

    def __init__(self, d):
        super().__init__(d, 2, kernel_size=1)


def scene_head(scene_pooled, params):
    return F.linear(scene_pooled, params.weight, params.bias)


def human_head(human_fm, params):
    return F.conv2d(human_fm, params.weight, params.bias)


def scene_loss(logits, labels):
    """Mean over segments of softmax cross-entropy."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"scene_loss: labels {tuple(labels.shape)} vs logits {tuple(logits.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValidationError(f"scene_loss: label outside [0, {k}): {labels.tolist()}")
    return F.cross_entropy(logits.reshape(-1, k), labels.reshape(-1))


def human_loss(pixel_logits, masks):
    """Mean over segments of the per-pixel two-class cross-entropy."""
    masks = torch.as_tensor(masks, device=pixel_logits.device)
    if pixel_logits.dim() != 4 or pixel_logits.shape[1] != 2:
        raise ShapeError(f"human_loss: logits must be (B, 2, h, w), got {tuple(pixel_logits.shape)}")
    if masks.dim() != 3 or masks.shape[0] != pixel_logits.shape[0]:
        raise ShapeError(
            f"human_loss: masks {tuple(masks.shape)} do not match logits batch {pixel_logits.shape[0]}"
        )
    h, w = pixel_logits.shape[-2:]
    target = resample_nearest(masks, (h, w)).long()
    return F.cross_entropy(pixel_logits, target)
