"""Dataset manifests, synthetic videos, segment sampling, augmentation and the
multi-view inference protocol."""

import json
import os
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.nn import functional as F

from .config import DataConfig
from .errors import ConfigError, DataError, StorageError, ValidationError

MANIFEST_FILE = "manifest.jsonl"
LATENTS_FILE = "latents.jsonl"
CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right", "center")
VIEWS_PER_FRAME = 2 * len(CORNERS)


@dataclass(eq=False)
class VideoRecord:
    video_id: str
    frame_dir: Path
    n_frames: int
    action_label: int
    # generator latents for synthetic videos; None for anything else
    latent: dict | None = None

    @cached_property
    def frame_paths(self):
        paths = sorted(Path(self.frame_dir).glob("*.png"))
        if len(paths) != self.n_frames:
            raise DataError(
                f"video {self.video_id}: manifest lists {self.n_frames} frames, "
                f"found {len(paths)} in {self.frame_dir}"
            )
        return paths

    def load_frame(self, index):
        path = self.frame_paths[index]
        try:
            with Image.open(path) as img:
                return np.asarray(img.convert("RGB"))
        except OSError as exc:
            raise DataError(f"video {self.video_id}: cannot decode frame {path}: {exc}") from None

    def load_frames(self):
        return np.stack([self.load_frame(i) for i in range(self.n_frames)])

    def frame_size(self):
        return self.load_frame(0).shape[:2]


def read_manifest(path):
    """Parse a dataset manifest; latents next to it are attached when present."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"missing dataset manifest: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read dataset manifest {path}: {exc.strerror}") from None
    latents = {}
    latent_path = path.parent / LATENTS_FILE
    if latent_path.exists():
        for line in latent_path.read_text().splitlines():
            if line.strip():
                row = json.loads(line)
                latents[row["video_id"]] = row
    videos = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            video = VideoRecord(
                video_id=str(row["video_id"]),
                frame_dir=path.parent / row["dir"],
                n_frames=int(row["n_frames"]),
                action_label=int(row["label"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: malformed manifest row ({exc})") from None
        if video.n_frames < 1 or video.action_label < 0:
            raise ValidationError(f"{path}:{lineno}: frame count and label must be non-negative")
        video.latent = latents.get(video.video_id)
        videos.append(video)
    return videos


def segment_bounds(n_frames, n_seg):
    """Split ``[0, n_frames)`` into ``n_seg`` contiguous ranges; longer ones last."""
    base, extra = divmod(n_frames, n_seg)
    bounds, start = [], 0
    for i in range(n_seg):
        size = base + (1 if i >= n_seg - extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def sample_train_segments(video, n_seg, rng):
    if video.n_frames < n_seg:
        raise DataError(
            f"video {video.video_id} has {video.n_frames} frames, fewer than n_seg={n_seg}"
        )
    return [int(rng.integers(lo, hi)) for lo, hi in segment_bounds(video.n_frames, n_seg)]


def eval_frame_indices(n_frames, n_seg):
    """Centre frame of each of ``n_seg`` uniform segments, clamped for short videos."""
    return [min(int((i + 0.5) * n_frames / n_seg), n_frames - 1) for i in range(n_seg)]


def video_rng(seed, video_id, epoch):
    return np.random.default_rng([seed, zlib.crc32(video_id.encode()), epoch])


@dataclass(frozen=True)
class CropGeometry:
    top: int
    left: int
    height: int
    width: int
    flip: bool = False


def sample_crop(rng, base_hw, scales):
    """Multiscale crop: side scales drawn from ``scales`` (at most one step apart),
    placed at a random corner or the centre, with a random horizontal flip."""
    side = min(base_hw)
    sizes = [int(side * s) for s in scales]
    pairs = [(h, w) for i, h in enumerate(sizes) for j, w in enumerate(sizes) if abs(i - j) <= 1]
    crop_h, crop_w = pairs[int(rng.integers(len(pairs)))]
    corner = CORNERS[int(rng.integers(len(CORNERS)))]
    top, left = corner_offset(corner, base_hw, (crop_h, crop_w))
    return CropGeometry(top, left, crop_h, crop_w, bool(rng.integers(2)))


def corner_offset(corner, base_hw, crop_hw):
    H, W = base_hw
    h, w = crop_hw
    if h > H or w > W:
        raise ConfigError(f"crop {crop_hw} does not fit inside frame {base_hw}")
    top = {"top": 0, "bottom": H - h}.get(corner.split("_")[0], (H - h) // 2)
    left = {"left": 0, "right": W - w}.get(corner.split("_")[-1], (W - w) // 2)
    return top, left


def frame_to_tensor(frame):
    """HWC uint8 array to CHW float32 tensor in [0, 255]."""
    return torch.from_numpy(np.array(frame)).permute(2, 0, 1).to(torch.float32)


def resize_bilinear(img, hw):
    if tuple(img.shape[-2:]) == tuple(hw):
        return img
    return F.interpolate(img[None], size=tuple(hw), mode="bilinear", align_corners=False)[0]


def resample_nearest(mask, hw):
    """Nearest-neighbour resample of ``(..., H, W)`` data by pixel centres."""
    H, W = mask.shape[-2:]
    h, w = hw
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(np.int64), W - 1)
    if isinstance(mask, np.ndarray):
        return mask[..., rows, :][..., cols]
    rows = torch.as_tensor(rows, device=mask.device)
    cols = torch.as_tensor(cols, device=mask.device)
    return mask.index_select(-2, rows).index_select(-1, cols)


def normalize(img, data_cfg):
    mean = torch.tensor(data_cfg.mean, dtype=img.dtype).view(3, 1, 1)
    std = torch.tensor(data_cfg.std, dtype=img.dtype).view(3, 1, 1)
    return (img / 255.0 - mean) / std


def apply_geometry(img, geom, out_hw):
    crop = img[..., geom.top : geom.top + geom.height, geom.left : geom.left + geom.width]
    out = resize_bilinear(crop, out_hw)
    return out.flip(-1) if geom.flip else out


def apply_geometry_mask(mask, geom, out_hw):
    crop = mask[..., geom.top : geom.top + geom.height, geom.left : geom.left + geom.width]
    out = resample_nearest(crop, out_hw)
    return np.ascontiguousarray(out[..., ::-1]) if geom.flip else np.ascontiguousarray(out)


def train_augment(frame, rng, input_hw, data_cfg=None, mask=None, geometry=None):
    """Resize to the base size, multiscale-crop, flip, resize to ``input_hw``, normalize.

    ``frame`` is an ``(H, W, 3)`` uint8 array. When ``mask`` (frame-resolution
    0/1 array) is given it follows the same geometry and ``(tensor, mask)`` is
    returned.
    """
    data_cfg = data_cfg or DataConfig()
    if not isinstance(frame, np.ndarray) or frame.ndim != 3 or frame.shape[-1] != 3:
        raise DataError(f"expected an (H, W, 3) image, got {getattr(frame, 'shape', type(frame))}")
    img = resize_bilinear(frame_to_tensor(frame), data_cfg.base_hw)
    geom = geometry or sample_crop(rng, data_cfg.base_hw, data_cfg.scales)
    out = normalize(apply_geometry(img, geom, input_hw), data_cfg)
    if mask is None:
        return out
    mask = resample_nearest(np.asarray(mask), data_cfg.base_hw)
    return out, apply_geometry_mask(mask, geom, input_hw)


@dataclass
class ViewBatch:
    frames: torch.Tensor  # (V, 3, h, w), segment-major then view index
    view_geometry: list = field(default_factory=list)
    frame_indices: list = field(default_factory=list)

    @property
    def n_views(self):
        return self.frames.shape[0]


def ten_crop(img, input_hw, base_hw):
    """Four corners and the centre, each followed by its mirror image."""
    views, geoms = [], []
    for corner in CORNERS:
        top, left = corner_offset(corner, base_hw, input_hw)
        for flip in (False, True):
            geom = CropGeometry(top, left, input_hw[0], input_hw[1], flip)
            views.append(apply_geometry(img, geom, input_hw))
            geoms.append(geom)
    return views, geoms


def inference_views(video, n_eval_seg=25, input_hw=(56, 56), data_cfg=None, frames=None):
    """Deterministic ``n_eval_seg x 10`` views: segment centre frames, ten crops each."""
    data_cfg = data_cfg or DataConfig()
    indices = eval_frame_indices(video.n_frames, n_eval_seg)
    views, geoms = [], []
    for idx in indices:
        frame = frames[idx] if frames is not None else video.load_frame(idx)
        img = resize_bilinear(frame_to_tensor(frame), data_cfg.base_hw)
        v, g = ten_crop(img, input_hw, data_cfg.base_hw)
        views.extend(normalize(x, data_cfg) for x in v)
        geoms.extend(g)
    return ViewBatch(torch.stack(views), geoms, indices)


def center_views(video, n_seg, input_hw=(56, 56), data_cfg=None, frames=None):
    """One centre crop per segment; the cheap evaluation path."""
    data_cfg = data_cfg or DataConfig()
    indices = eval_frame_indices(video.n_frames, n_seg)
    out = []
    for idx in indices:
        frame = frames[idx] if frames is not None else video.load_frame(idx)
        img = resize_bilinear(frame_to_tensor(frame), data_cfg.base_hw)
        top, left = corner_offset("center", data_cfg.base_hw, input_hw)
        out.append(normalize(apply_geometry(img, CropGeometry(top, left, *input_hw), input_hw), data_cfg))
    return torch.stack(out)


def consensus(view_logits, window=3):
    """Video score from ``(n_segments, n_views, k)`` logits.

    Views are averaged per segment, each stride-1 window of ``window``
    segments is averaged, then the window scores are averaged.
    """
    n_segments = view_logits.shape[0]
    if window > n_segments:
        raise ConfigError(f"consensus window {window} exceeds {n_segments} segments")
    per_segment = view_logits.mean(dim=1)
    windows = per_segment.unfold(0, window, 1).mean(dim=-1)
    return windows.mean(dim=0)


def _palette(index):
    hue = (index * 0.61803398875) % 1.0
    rgb = np.array([abs(hue * 6 - 3) - 1, 2 - abs(hue * 6 - 2), 2 - abs(hue * 6 - 4)])
    return 70 + 120 * np.clip(rgb, 0, 1)


def _render_frame(rng, scene, motion, height, width, phase, center, radius, blob_rgb):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    angle = scene * 2.399963
    freq = 2.0 + (scene % 3)
    wave = np.cos(2 * np.pi * freq * (np.cos(angle) * xx / width + np.sin(angle) * yy / height) + phase)
    img = _palette(scene)[None, None, :] * (1.0 + 0.25 * wave[..., None])
    # the blob is smeared along its direction of travel
    cx, cy = center
    along, across = 1.7 * radius, 0.6 * radius
    rx, ry = (along, across) if motion == 0 else (across, along)
    blob = ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0
    img[blob] = blob_rgb
    img += rng.normal(0.0, 4.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _track(motion, n_frames, height, width, rng):
    # horizontal sweeps run along the top band, vertical ones down the left band
    lo, hi = 0.2, 0.8
    start = rng.uniform(lo, lo + 0.15)
    stop = rng.uniform(hi - 0.15, hi)
    if rng.integers(2):
        start, stop = stop, start
    band = rng.uniform(0.22, 0.32)
    t = np.linspace(start, stop, n_frames)
    if motion == 0:
        return [(float(x * width), float(band * height)) for x in t]
    return [(float(band * width), float(y * height)) for y in t]


def synth_dataset(out_dir, n_classes=4, videos_per_class=8, frames_per_video=16, seed=0, frame_hw=(64, 80)):
    """Write a procedural video dataset and return its manifest path.

    Class ``c`` pairs background texture ``c // 2`` (the scene factor) with
    blob motion ``c % 2`` (the human factor), so neither factor alone
    identifies the class.
    """
    out_dir = Path(out_dir)
    height, width = frame_hw
    rows, latents = [], []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for cls in range(n_classes):
            scene, motion = cls // 2, cls % 2
            for j in range(videos_per_class):
                video_id = f"c{cls:02d}_v{j:03d}"
                rng = np.random.default_rng([seed, cls, j])
                phase = rng.uniform(0, 2 * np.pi)
                radius = rng.uniform(6.0, 8.0)
                blob_rgb = np.array([235, 190, 150]) + rng.normal(0, 8, size=3)
                track = _track(motion, frames_per_video, height, width, rng)
                vdir = out_dir / "videos" / video_id
                vdir.mkdir(parents=True, exist_ok=True)
                for i, center in enumerate(track):
                    frame = _render_frame(rng, scene, motion, height, width, phase + 0.2 * i, center, radius, blob_rgb)
                    Image.fromarray(frame, mode="RGB").save(vdir / f"{i:05d}.png", format="PNG")
                rows.append({"video_id": video_id, "dir": f"videos/{video_id}", "n_frames": frames_per_video, "label": cls})
                latents.append({"video_id": video_id, "scene": scene, "motion": motion, "track": track})
        _write_lines(out_dir / LATENTS_FILE, latents)
        return _write_lines(out_dir / MANIFEST_FILE, rows)
    except OSError as exc:
        raise StorageError(f"cannot write dataset under {out_dir}: {exc.strerror or exc}") from None


def _write_lines(path, rows):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(json.dumps(r) + "\n" for r in rows))
    os.replace(tmp, path)
    return path


def write_manifest(path, videos):
    path = Path(path)
    rows = [
        {
            "video_id": v.video_id,
            "dir": os.path.relpath(v.frame_dir, path.parent),
            "n_frames": v.n_frames,
            "label": v.action_label,
        }
        for v in videos
    ]
    return _write_lines(path, rows)


def count_classes(videos):
    return max((v.action_label for v in videos), default=-1) + 1


def check_labels(videos, k_action):
    bad = [v.video_id for v in videos if not 0 <= v.action_label < k_action]
    if bad:
        raise ValidationError(
            f"{len(bad)} video(s) carry action labels outside [0, {k_action}) "
            f"(first: {bad[0]}); the checkpoint was trained for {k_action} classes"
        )

