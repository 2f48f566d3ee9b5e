"""Three-branch backbone: a shared stem feeding private action, scene and human
stacks, with CBI fusion points, the knowledge graph and the task heads."""

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import nn

from .akg import ActionKnowledgeGraph, GcnParams, RelationParams
from .cbi import CrossBranchIntegration
from .config import ModelConfig
from .distill import HumanHead, SceneHead
from .errors import ShapeError
from .ops import relu

BRANCHES = ("action", "scene", "human")


class ResBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride=1, bn_momentum=0.1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels, momentum=bn_momentum)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels, momentum=bn_momentum)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels, momentum=bn_momentum),
            )

    def forward(self, x):
        out = relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return relu(out + skip)


def make_stage(in_channels, out_channels, stride, bn_momentum):
    return nn.Sequential(
        ResBlock(in_channels, out_channels, stride, bn_momentum),
        ResBlock(out_channels, out_channels, 1, bn_momentum),
    )


def _stage_io(config):
    channels = (config.stem_channels, *config.branch_channels)
    return {
        name: (channels[i], channels[i + 1], config.stage_strides[i])
        for i, name in enumerate(config.stage_names)
    }


class Stem(nn.Module):
    """Two stride-2 conv-BN-ReLU layers, plus any stages configured as shared."""

    def __init__(self, config):
        super().__init__()
        c = config.stem_channels
        m = config.bn_momentum
        self.conv1 = nn.Conv2d(3, c, 3, 2, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c, momentum=m)
        self.conv2 = nn.Conv2d(c, c, 3, 2, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c, momentum=m)
        io = _stage_io(config)
        self.stages = nn.ModuleDict(
            {name: make_stage(*io[name], m) for name in config.stage_names[: config.shared_stages]}
        )

    def forward(self, x):
        x = relu(self.bn1(self.conv1(x)))
        x = relu(self.bn2(self.conv2(x)))
        for stage in self.stages.values():
            x = stage(x)
        return x


class Branch(nn.Module):
    """Private stage stack closed by a batch norm without rectifier.

    The closing norm centres the pooled vectors, so dot-product relations
    between nodes do not all share one large positive offset.
    """

    def __init__(self, config):
        super().__init__()
        io = _stage_io(config)
        self.stages = nn.ModuleDict(
            {name: make_stage(*io[name], config.bn_momentum) for name in config.branch_stage_names}
        )
        self.norm = nn.BatchNorm2d(config.d, momentum=config.bn_momentum)


@dataclass
class BranchFeatures:
    stage: str
    action: torch.Tensor
    scene: torch.Tensor | None = None
    human: torch.Tensor | None = None


@dataclass
class ModelOutput:
    action_logits: torch.Tensor  # (B, k_action), segment-averaged
    segment_logits: torch.Tensor  # (B, n_seg, k_action)
    scene_logits: torch.Tensor | None = None  # (B, n_seg, k_scene)
    human_logits: torch.Tensor | None = None  # (B * n_seg, 2, h, w)
    stages: list | None = None


def global_avg_pool(fm):
    if fm.dim() != 4:
        raise ShapeError(f"global_avg_pool: expected rank-4 map, got {tuple(fm.shape)}")
    return fm.mean(dim=(2, 3))


def forward_stem(frames, model):
    h, w = model.config.input_hw
    if frames.dim() != 4 or frames.shape[1] != 3 or tuple(frames.shape[2:]) != (h, w):
        raise ShapeError(
            f"stem: expected frames of shape (B, 3, {h}, {w}), got {tuple(frames.shape)}"
        )
    return model.stem(frames)


def forward_branches(stem_out, model, with_aux=True):
    """Run the private stacks stage by stage, fusing with CBI where configured.

    Each branch's closing norm acts on its last stage output, ahead of any
    fusion at that stage. With ``with_aux`` False and no fusion configured
    the scene and human stacks are skipped entirely and their entries are
    None.
    """
    run_aux = with_aux or bool(model.config.cbi_attach) or model.config.use_akg
    action = stem_out
    scene = human = stem_out if run_aux else None
    out = []
    names = model.config.branch_stage_names
    for name in names:
        action = model.action.stages[name](action)
        if run_aux:
            scene = model.scene.stages[name](scene)
            human = model.human.stages[name](human)
        if name == names[-1]:
            action = model.action.norm(action)
            if run_aux:
                scene = model.scene.norm(scene)
                human = model.human.norm(human)
        if run_aux and name in model.cbi:
            action = model.cbi[name](action, scene, human)
        out.append(BranchFeatures(name, action, scene, human))
    return out


class KINet(nn.Module):
    """Shared stem, three private branches, CBI at chosen stages, AKG and heads."""

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        io = _stage_io(config)
        self.stem = Stem(config)
        self.action = Branch(config)
        self.scene = Branch(config)
        self.human = Branch(config)
        self.cbi = nn.ModuleDict(
            {
                name: CrossBranchIntegration(io[name][1], config.bn_momentum)
                for name in config.stage_names
                if name in config.cbi_attach
            }
        )
        self.akg = None
        if config.use_akg:
            self.akg = ActionKnowledgeGraph(
                config.d,
                config.relation_kind,
                config.relation_dim,
                config.gcn_activation,
                config.mask_kind,
            )
        self.heads = nn.ModuleDict(
            {
                "action": nn.Linear(config.d, config.k_action),
                "scene": SceneHead(config.d, config.k_scene),
                "human": HumanHead(config.d),
            }
        )

    def features(self, frames, with_aux=True):
        """Per-frame final-stage features for ``(F, 3, h, w)`` frames.

        Returns ``(stages, pooled)`` where ``pooled`` maps branch name to an
        ``(F, d)`` tensor; everything here is independent across frames.
        """
        stages = forward_branches(forward_stem(frames, self), self, with_aux)
        last = stages[-1]
        pooled = {b: global_avg_pool(getattr(last, b)) for b in BRANCHES if getattr(last, b) is not None}
        return stages, pooled

    def segment_logits(self, pooled, n_seg):
        """Action logits ``(B, n_seg, k)`` from pooled ``(B * n_seg, d)`` features."""
        action = pooled["action"].reshape(-1, n_seg, self.config.d)
        if self.akg is not None:
            scene = pooled["scene"].reshape(-1, n_seg, self.config.d)
            human = pooled["human"].reshape(-1, n_seg, self.config.d)
            action = self.akg(action, scene, human)
        return self.heads["action"](action)

    def forward(self, frames, with_aux=True):
        """``frames`` is ``(B, n_seg, 3, h, w)``."""
        if frames.dim() != 5:
            raise ShapeError(f"model: expected (B, n_seg, 3, h, w) frames, got {tuple(frames.shape)}")
        B, n_seg = frames.shape[:2]
        stages, pooled = self.features(frames.flatten(0, 1), with_aux)
        seg = self.segment_logits(pooled, n_seg)
        out = ModelOutput(seg.mean(dim=1), seg, stages=stages)
        if with_aux:
            out.scene_logits = self.heads["scene"](pooled["scene"]).reshape(B, n_seg, -1)
            out.human_logits = self.heads["human"](stages[-1].human)
        return out


class TSN(nn.Module):
    """Single-branch temporal segment network: stem, action stack, action head.

    Parameter names coincide with the action path of ``KINet`` so both
    initialize identically from the same seed.
    """

    akg = None

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        self.stem = Stem(config)
        self.action = Branch(config)
        self.heads = nn.ModuleDict({"action": nn.Linear(config.d, config.k_action)})

    def features(self, frames, with_aux=False):
        x = forward_stem(frames, self)
        stages = []
        names = self.config.branch_stage_names
        for name in names:
            x = self.action.stages[name](x)
            if name == names[-1]:
                x = self.action.norm(x)
            stages.append(BranchFeatures(name, x))
        return stages, {"action": global_avg_pool(x)}

    def segment_logits(self, pooled, n_seg):
        return self.heads["action"](pooled["action"].reshape(-1, n_seg, self.config.d))

    def forward(self, frames, with_aux=False):
        if frames.dim() != 5:
            raise ShapeError(f"model: expected (B, n_seg, 3, h, w) frames, got {tuple(frames.shape)}")
        n_seg = frames.shape[1]
        stages, pooled = self.features(frames.flatten(0, 1))
        seg = self.segment_logits(pooled, n_seg)
        return ModelOutput(seg.mean(dim=1), seg, stages=stages)


def parameter_registry(model):
    """Ordered ``{slash/separated/name: tensor}`` over parameters."""
    return {name.replace(".", "/"): p for name, p in model.named_parameters()}


def state_registry(model):
    """Parameters plus batch-norm running statistics, slash-named."""
    return {
        name.replace(".", "/"): t
        for name, t in model.state_dict(keep_vars=True).items()
        if not name.endswith("num_batches_tracked")
    }


def _generator(seed, name):
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") & (2**63 - 1))


def initialize(model, seed):
    """Seeded He-style init where every tensor draws from its own name-keyed stream."""
    for mod_name, module in model.named_modules():
        prefix = mod_name.replace(".", "/")
        if isinstance(module, CrossBranchIntegration):
            module.reset_parameters()
        elif prefix.startswith("cbi/"):
            continue  # handled by the owning CrossBranchIntegration
        elif isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight[0].numel()
            with torch.no_grad():
                module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=_generator(seed, f"{prefix}/weight"))
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            module.reset_parameters()
        elif isinstance(module, RelationParams):
            for leaf, p in module.named_parameters(recurse=False):
                with torch.no_grad():
                    p.normal_(0.0, math.sqrt(2.0 / p.shape[0]), generator=_generator(seed, f"{prefix}/{leaf}"))
        elif isinstance(module, GcnParams):
            module.reset_parameters(_generator(seed, f"{prefix}/weight"))
    return model


def build_model(config=None, seed=0):
    config = (config or ModelConfig()).validate()
    return initialize(KINet(config), seed)


def build_baseline(config=None, seed=0):
    config = (config or ModelConfig()).validate()
    return initialize(TSN(config), seed)
