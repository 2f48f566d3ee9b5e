"""Per-branch activation heatmaps of the final stage."""

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.nn import functional as F

from .config import DataConfig
from .errors import DataError, StorageError
from .netcore import BRANCHES
from .pipeline import VideoRecord, frame_to_tensor, eval_frame_indices, normalize, resize_bilinear

MID_GRAY = 128


def heatmap_u8(fm, frame_hw):
    """Min-max normalise a 2-D map, upsample bilinearly, quantise to 8 bits.

    A map with no spread carries no spatial information and comes out uniform
    mid-gray.
    """
    fm = fm.detach().double()
    lo, hi = float(fm.min()), float(fm.max())
    if not hi - lo > 1e-12 * max(1.0, abs(hi)):
        return np.full(tuple(frame_hw), MID_GRAY, dtype=np.uint8)
    unit = (fm - lo) / (hi - lo)
    up = F.interpolate(unit[None, None], size=tuple(frame_hw), mode="bilinear", align_corners=False)[0, 0]
    return np.rint(up.clamp(0, 1).numpy() * 255).astype(np.uint8)


def video_from_dir(frame_dir):
    frame_dir = Path(frame_dir)
    if not frame_dir.is_dir():
        raise DataError(f"video directory not found: {frame_dir}")
    n = len(list(frame_dir.glob("*.png")))
    if n == 0:
        raise DataError(f"no PNG frames in {frame_dir}")
    return VideoRecord(frame_dir.name, frame_dir, n, 0)


@torch.no_grad()
def activation_maps(model, video, data_cfg=None):
    """``{(branch, segment): uint8 heatmap}`` at the source frame resolution.

    One frame per segment (the segment centre), resized to the network input
    without cropping.
    """
    data_cfg = data_cfg or DataConfig()
    model.eval()
    n_seg = model.config.n_seg
    if video.n_frames < 1:
        raise DataError(f"video {video.video_id} has no frames")
    indices = eval_frame_indices(video.n_frames, n_seg)
    raw = [video.load_frame(i) for i in indices]
    frames = torch.stack([normalize(resize_bilinear(frame_to_tensor(f), model.config.input_hw), data_cfg) for f in raw])
    stages, _ = model.features(frames, with_aux=True)
    last = stages[-1]
    maps = {}
    for branch in BRANCHES:
        fm = getattr(last, branch)
        if fm is None:
            continue
        for seg in range(n_seg):
            maps[(branch, seg)] = heatmap_u8(fm[seg].mean(dim=0), raw[seg].shape[:2])
    return maps


def actmap_filename(branch, segment):
    return f"{branch}_seg{segment:02d}.png"


def write_activation_maps(maps, out_dir):
    out_dir = Path(out_dir)
    paths = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for (branch, seg), img in sorted(maps.items()):
            path = out_dir / actmap_filename(branch, seg)
            Image.fromarray(img, mode="L").save(path, format="PNG")
            paths.append(path)
    except OSError as exc:
        raise StorageError(f"cannot write activation maps to {out_dir}: {exc.strerror or exc}") from None
    return paths
