"""Action Knowledge Graph: relation scoring, masked normalization and one GCN layer.

Node order inside a graph is fixed: rows ``[0, n)`` are action segments,
``[n, 2n)`` scene segments and ``[2n, 3n)`` human segments.
"""

import math

import torch
from torch import nn

from .errors import ShapeError
from .ops import relu

ACTION, SCENE, HUMAN = 0, 1, 2


def node_role(index, n_seg):
    return index // n_seg


def build_nodes(action_vecs, scene_vecs, human_vecs):
    """Stack ``(..., n_seg, d)`` groups into a ``(..., 3 * n_seg, d)`` node matrix."""
    if not (action_vecs.shape == scene_vecs.shape == human_vecs.shape):
        raise ShapeError(
            "akg: node groups differ in shape: "
            f"{tuple(action_vecs.shape)}, {tuple(scene_vecs.shape)}, {tuple(human_vecs.shape)}"
        )
    if action_vecs.dim() < 2:
        raise ShapeError(f"akg: node groups need shape (..., n_seg, d), got {tuple(action_vecs.shape)}")
    return torch.cat([action_vecs, scene_vecs, human_vecs], dim=-2)


def edge_mask(n_seg, kind="scene_human", dtype=torch.float64):
    """0/1 adjacency mask over ``3 * n_seg`` nodes.

    ``scene_human`` zeroes only scene-human edges. ``action_incident``
    additionally drops scene-scene and human-human edges apart from
    self-loops.
    """
    roles = torch.arange(3 * n_seg) // n_seg
    ra, rb = roles[:, None], roles[None, :]
    blocked = ((ra == SCENE) & (rb == HUMAN)) | ((ra == HUMAN) & (rb == SCENE))
    if kind == "action_incident":
        blocked = blocked | ((ra != ACTION) & (rb != ACTION))
        blocked.fill_diagonal_(False)
    elif kind != "scene_human":
        raise ValueError(f"unknown mask kind {kind!r}")
    return (~blocked).to(dtype)


class RelationParams(nn.Module):
    """Learnable parts of the pairwise relation function.

    ``dot`` has no parameters; ``embedded_dot`` projects both sides with
    ``theta``/``phi``; ``concat`` scores ``ReLU(w_cat [theta(a), phi(b)])``.
    """

    def __init__(self, kind, d, embed_dim):
        super().__init__()
        self.kind = kind
        self.d = d
        self.embed_dim = embed_dim
        if kind == "dot":
            return
        if kind not in ("embedded_dot", "concat"):
            raise ValueError(f"unknown relation kind {kind!r}")
        self.theta = nn.Parameter(torch.empty(d, embed_dim))
        self.phi = nn.Parameter(torch.empty(d, embed_dim))
        if kind == "concat":
            self.w_cat = nn.Parameter(torch.empty(2 * embed_dim))
        self.reset_parameters()

    def reset_parameters(self, generator=None):
        for p in self.parameters():
            fan_in = p.shape[0]
            with torch.no_grad():
                p.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)


def relation_scores(X, params):
    """Pairwise scores ``S[..., a, b] = f(x_a, x_b)`` over every ordered pair."""
    if X.shape[-1] != params.d:
        raise ShapeError(f"akg: relation expects node width {params.d}, got {X.shape[-1]}")
    if params.kind == "dot":
        return X @ X.transpose(-1, -2)
    left = X @ params.theta
    right = X @ params.phi
    if params.kind == "embedded_dot":
        return left @ right.transpose(-1, -2)
    e = params.embed_dim
    score_a = left @ params.w_cat[:e]
    score_b = right @ params.w_cat[e:]
    return relu(score_a[..., :, None] + score_b[..., None, :])


def normalize_graph(S, mask):
    """Row softmax restricted to active edges; masked entries come out exactly 0."""
    if S.shape[-2:] != mask.shape:
        raise ShapeError(f"akg: scores {tuple(S.shape)} do not match mask {tuple(mask.shape)}")
    active = mask.to(torch.bool)
    assert bool(active.any(dim=-1).all()), "edge mask leaves a row without support"
    masked = S.masked_fill(~active, float("-inf"))
    shift = masked.max(dim=-1, keepdim=True).values.detach()
    weights = torch.exp(masked - shift)
    return weights / weights.sum(dim=-1, keepdim=True)


class GcnParams(nn.Module):
    def __init__(self, d, activation="relu"):
        super().__init__()
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.weight = nn.Parameter(torch.empty(d, d))
        self.reset_parameters()

    def reset_parameters(self, generator=None):
        with torch.no_grad():
            self.weight.normal_(0.0, math.sqrt(2.0 / self.weight.shape[0]), generator=generator)


def gcn_layer(G, X, params):
    out = G @ X @ params.weight
    return relu(out) if params.activation == "relu" else out


def select_action_nodes(Z):
    n_nodes = Z.shape[-2]
    if n_nodes % 3:
        raise ShapeError(f"akg: node count {n_nodes} is not a multiple of 3")
    return Z[..., : n_nodes // 3, :]


class ActionKnowledgeGraph(nn.Module):
    """Relation scoring plus a single graph convolution over 3 * n_seg nodes."""

    def __init__(self, d, relation_kind="dot", embed_dim=None, activation="relu", mask_kind="scene_human"):
        super().__init__()
        self.mask_kind = mask_kind
        self.relation = RelationParams(relation_kind, d, embed_dim or max(1, d // 2))
        self.gcn = GcnParams(d, activation)
        self._masks = {}

    def mask(self, n_seg, like):
        key = (n_seg, like.dtype, like.device)
        if key not in self._masks:
            self._masks[key] = edge_mask(n_seg, self.mask_kind, like.dtype).to(like.device)
        return self._masks[key]

    def graph(self, X):
        n_seg = X.shape[-2] // 3
        return normalize_graph(relation_scores(X, self.relation), self.mask(n_seg, X))

    def forward(self, action_vecs, scene_vecs, human_vecs):
        X = build_nodes(action_vecs, scene_vecs, human_vecs)
        Z = gcn_layer(self.graph(X), X, self.gcn)
        return select_action_nodes(Z)
