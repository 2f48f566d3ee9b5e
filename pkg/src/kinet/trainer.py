"""Joint objective, momentum SGD, the training loop and the evaluation protocols."""

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .checkpoint import Checkpoint, model_state_arrays
from .config import RunConfig
from .distill import human_loss, load_label_cache, scene_loss
from .errors import ConfigError, DataError, NumericError, ShapeError, StorageError
from .netcore import TSN, build_model, parameter_registry
from .pipeline import (
    VIEWS_PER_FRAME,
    center_views,
    check_labels,
    inference_views,
    read_manifest,
    sample_train_segments,
    train_augment,
    video_rng,
)

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "loss_total", "loss_action", "loss_human", "loss_scene", "train_top1")


@dataclass(frozen=True)
class LossWeights:
    lambda_action: float = 1.0
    lambda_human: float = 0.01
    lambda_scene: float = 0.01

    def __post_init__(self):
        if not self.lambda_action > 0:
            raise ConfigError(f"lambda_action must be > 0, got {self.lambda_action}")
        if self.lambda_human < 0 or self.lambda_scene < 0:
            raise ConfigError("lambda_human and lambda_scene must be >= 0")

    @classmethod
    def from_config(cls, optim):
        return cls(optim.lambda_action, optim.lambda_human, optim.lambda_scene)

    @property
    def uses_aux(self):
        return self.lambda_human > 0 or self.lambda_scene > 0


def _is_finite(x):
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return math.isfinite(x)


def total_loss(l_action, l_human, l_scene, weights=None):
    weights = weights or LossWeights()
    for name, value in (("action", l_action), ("human", l_human), ("scene", l_scene)):
        if not _is_finite(value):
            raise NumericError(f"non-finite {name} loss: {float(value)}")
    return (
        weights.lambda_action * l_action
        + weights.lambda_human * l_human
        + weights.lambda_scene * l_scene
    )


@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    # (epoch, multiplier) pairs applied once the epoch is reached
    schedule: list = field(default_factory=list)
    velocity: dict = field(default_factory=dict)

    def meta(self):
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "schedule": [list(m) for m in self.schedule],
        }


def full_scale_schedule():
    return [(20, 0.1), (40, 0.1), (60, 0.1)]


def scaled_schedule(epochs, fractions=(0.5, 0.75, 0.875)):
    return [(int(round(f * epochs)), 0.1) for f in fractions]


def lr_at(epoch, schedule, base_lr=0.01):
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    lr = base_lr
    for milestone, multiplier in schedule:
        if epoch >= milestone:
            lr *= multiplier
    return lr


@torch.no_grad()
def sgd_step(params, grads, state, lr=None):
    """Momentum SGD with coupled weight decay, in place.

    ``v <- mu * v + (g + wd * w)``, ``w <- w - lr * v``. Entries whose
    gradient is None are left alone.
    """
    lr = state.lr if lr is None else lr
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != w.shape:
            raise ShapeError(f"sgd_step: gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(w.shape)}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = torch.zeros_like(w)
        elif v.shape != w.shape:
            raise ShapeError(f"sgd_step: velocity for {name} has shape {tuple(v.shape)}, parameter {tuple(w.shape)}")
        step = g + state.weight_decay * w if state.weight_decay else g
        v.mul_(state.momentum).add_(step)
        w.sub_(lr * v)
    return params, state


@dataclass
class TrainResult:
    history: list
    checkpoint: Checkpoint
    model: torch.nn.Module
    summary: dict


class TrainingData:
    """Decoded frames and pseudo-labels for every video, loaded once."""

    def __init__(self, videos, labels=None):
        self.videos = list(videos)
        self.frames = {v.video_id: v.load_frames() for v in self.videos}
        self.labels = labels

    def batch(self, videos, n_seg, seed, epoch, input_hw, data_cfg, with_aux):
        frames, masks, scenes = [], [], []
        for video in videos:
            rng = video_rng(seed, video.video_id, epoch)
            decoded = self.frames[video.video_id]
            for seg, idx in enumerate(sample_train_segments(video, n_seg, rng)):
                if with_aux:
                    record = self.labels.label(video, seg, n_seg)
                    x, m = train_augment(decoded[idx], rng, input_hw, data_cfg, mask=record.human_mask)
                    masks.append(torch.from_numpy(m.astype(np.int64)))
                    scenes.append(record.scene_class)
                else:
                    x = train_augment(decoded[idx], rng, input_hw, data_cfg)
                frames.append(x)
        out = {
            "frames": torch.stack(frames).reshape(len(videos), n_seg, *frames[0].shape),
            "labels": torch.tensor([v.action_label for v in videos]),
        }
        if with_aux:
            out["masks"] = torch.stack(masks)
            out["scene"] = torch.tensor(scenes).reshape(len(videos), n_seg)
        return out


def _topk_correct(logits, labels, k):
    k = min(k, logits.shape[-1])
    top = logits.topk(k, dim=-1).indices
    return int((top == labels[:, None]).any(dim=-1).sum())


def train(config, dataset, labels=None, seed=0, model=None, out_dir=None, epochs=None, on_epoch=None):
    """Train end to end; returns history, final checkpoint and the model.

    ``dataset`` is a manifest path or a list of VideoRecords; ``labels`` a label
    cache directory or a teacher exposing ``label(video, seg, n_seg)``.
    """
    config = config if isinstance(config, RunConfig) else RunConfig()
    videos = read_manifest(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    if not videos:
        raise DataError("training set is empty")
    mcfg, ocfg = config.model, config.optim
    check_labels(videos, mcfg.k_action)
    weights = LossWeights.from_config(ocfg)
    with_aux = weights.uses_aux
    if model is None:
        model = build_model(mcfg, seed)
    if with_aux and isinstance(model, TSN):
        raise ConfigError("auxiliary losses need the three-branch model; set lambda_human = lambda_scene = 0")
    if with_aux:
        if labels is None:
            raise DataError("auxiliary losses are enabled but no pseudo-labels were given; run `kinet pseudolabel` first")
        if isinstance(labels, (str, Path)):
            labels = load_label_cache(labels, videos, mcfg.n_seg, mcfg.k_scene)
    data = TrainingData(videos, labels if with_aux else None)
    epochs = epochs or ocfg.epochs
    schedule = scaled_schedule(epochs, ocfg.milestones)
    state = OptimState(ocfg.lr, ocfg.momentum, ocfg.weight_decay, schedule)
    params = parameter_registry(model)
    history = []
    last_top5 = 0.0
    for epoch in range(epochs):
        lr = lr_at(epoch, schedule, ocfg.lr)
        model.train()
        order = np.random.default_rng([seed, epoch]).permutation(len(videos))
        sums = dict.fromkeys(("total", "action", "human", "scene"), 0.0)
        correct = correct5 = 0
        for start in range(0, len(videos), ocfg.batch_size):
            batch_videos = [videos[i] for i in order[start : start + ocfg.batch_size]]
            batch = data.batch(batch_videos, mcfg.n_seg, seed, epoch, mcfg.input_hw, config.data, with_aux)
            out = model(batch["frames"], with_aux=with_aux)
            l_action = F.cross_entropy(out.action_logits, batch["labels"])
            if with_aux:
                l_scene = scene_loss(out.scene_logits, batch["scene"])
                l_human = human_loss(out.human_logits, batch["masks"])
            else:
                l_scene = l_human = 0.0
            loss = total_loss(l_action, l_human, l_scene, weights)
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {name: p.grad for name, p in params.items()}
            sgd_step(params, grads, state, lr)
            n = len(batch_videos)
            sums["total"] += float(loss.detach()) * n
            sums["action"] += float(l_action.detach()) * n
            if with_aux:
                sums["human"] += float(l_human.detach()) * n
                sums["scene"] += float(l_scene.detach()) * n
            correct += _topk_correct(out.action_logits.detach(), batch["labels"], 1)
            correct5 += _topk_correct(out.action_logits.detach(), batch["labels"], 5)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": sums["total"] / len(videos),
            "loss_action": sums["action"] / len(videos),
            "loss_human": sums["human"] / len(videos) if with_aux else float("nan"),
            "loss_scene": sums["scene"] / len(videos) if with_aux else float("nan"),
            "train_top1": correct / len(videos),
        }
        last_top5 = correct5 / len(videos)
        if not math.isfinite(row["loss_total"]):
            raise NumericError(f"training diverged at epoch {epoch}: loss {row['loss_total']}")
        history.append(row)
        log.info("epoch %d lr %.2e loss %.4f top1 %.3f", epoch, lr, row["loss_total"], row["train_top1"])
        if on_epoch:
            on_epoch(row)
    checkpoint = make_checkpoint(model, config, state, epochs, seed)
    summary = {
        "top1": history[-1]["train_top1"],
        "top5": last_top5,
        "config_hash": config.digest(),
        "seed": seed,
        "split": "train",
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_metrics_csv(out_dir / "metrics.csv", history)
        checkpoint.save(out_dir / "checkpoint.kinet")
        write_summary(out_dir / "summary.json", summary)
    return TrainResult(history, checkpoint, model, summary)


def make_checkpoint(model, config, state, epoch, seed):
    tensors = {f"model/{k}": v for k, v in model_state_arrays(model).items()}
    for name, v in state.velocity.items():
        tensors[f"optim/velocity/{name}"] = v.detach().cpu().numpy().astype("<f4")
    meta = {
        "epoch": epoch,
        "seed": seed,
        "model_kind": "tsn" if isinstance(model, TSN) else "kinet",
        "optim": state.meta(),
        # per-video sampling streams are keyed by (seed, video_id, epoch)
        "rng": {"seed": seed, "next_epoch": epoch},
    }
    return Checkpoint(config, tensors, meta)


def metrics_csv_text(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in history:
        writer.writerow([row["epoch"], *(repr(float(row[k])) for k in METRIC_FIELDS[1:])])
    return buf.getvalue()


def write_metrics_csv(path, history):
    _write_text(path, metrics_csv_text(history))


def write_summary(path, summary):
    _write_text(path, json.dumps(summary, sort_keys=True, indent=2) + "\n")


def read_summary(path):
    return json.loads(Path(path).read_text())


def _write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        tmp.replace(path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc.strerror or exc}") from None


@dataclass
class EvalResult:
    top1: float
    top5: float
    protocol: str
    video_logits: torch.Tensor  # (n_videos, k_action)
    labels: torch.Tensor
    views_per_video: list


@torch.no_grad()
def windowed_video_logits(model, views, n_eval_seg, window):
    """Video score from ``n_eval_seg * 10`` views via stride-1 segment windows.

    Backbone features are computed once per view; each window of ``window``
    consecutive segments (same view position) is then scored as one clip, its
    segment logits averaged, and all window/view scores averaged.
    """
    _, pooled = model.features(views, with_aux=False)
    n_windows = n_eval_seg - window + 1
    if n_windows < 1:
        raise ConfigError(f"window {window} exceeds {n_eval_seg} segments")
    seg = torch.arange(n_windows)[:, None, None] + torch.arange(window)[None, None, :]
    view = torch.arange(VIEWS_PER_FRAME)[None, :, None]
    flat_index = (seg * VIEWS_PER_FRAME + view).reshape(-1)  # (windows * views * window,)
    clips = {b: f.index_select(0, flat_index) for b, f in pooled.items()}
    logits = model.segment_logits(clips, window)  # (windows * views, window, k)
    return logits.mean(dim=1).mean(dim=0)


@torch.no_grad()
def evaluate(checkpoint, dataset, protocol="full250", eval_cfg=None, data_cfg=None):
    """Top-1/top-5 of the action head; auxiliary heads are never evaluated."""
    if isinstance(checkpoint, (str, Path)):
        checkpoint = Checkpoint.load(checkpoint)
    if isinstance(checkpoint, Checkpoint):
        config = checkpoint.config
        model = checkpoint.build_model()
    else:
        model = checkpoint
        config = RunConfig(model=model.config)
    eval_cfg = eval_cfg or config.eval
    data_cfg = data_cfg or config.data
    if protocol not in ("full250", "fast"):
        raise ConfigError(f"unknown protocol {protocol!r}; expected full250 or fast")
    if protocol == "full250" and eval_cfg.window > eval_cfg.n_eval_seg:
        raise ConfigError(f"eval.window ({eval_cfg.window}) exceeds eval.n_eval_seg ({eval_cfg.n_eval_seg})")
    videos = read_manifest(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    check_labels(videos, model.config.k_action)
    model.eval()
    input_hw = model.config.input_hw
    scores, counts = [], []
    for video in videos:
        if protocol == "full250":
            batch = inference_views(video, eval_cfg.n_eval_seg, input_hw, data_cfg)
            counts.append(batch.n_views)
            scores.append(windowed_video_logits(model, batch.frames, eval_cfg.n_eval_seg, eval_cfg.window))
        else:
            frames = center_views(video, model.config.n_seg, input_hw, data_cfg)
            counts.append(frames.shape[0])
            scores.append(model(frames[None], with_aux=False).action_logits[0])
    logits = torch.stack(scores)
    labels = torch.tensor([v.action_label for v in videos])
    n = len(videos)
    return EvalResult(
        top1=_topk_correct(logits, labels, 1) / n,
        top5=_topk_correct(logits, labels, 5) / n,
        protocol=protocol,
        video_logits=logits,
        labels=labels,
        views_per_video=counts,
    )
