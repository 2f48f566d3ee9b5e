"""Central-difference gradient checking against autograd.

Each target builds a float64 scalar function of some leaf tensors at a point
where every rectifier input sits at least ``10 * eps`` from zero, so the
finite differences never straddle a kink.
"""

import copy
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch.func import functional_call, replace_all_batch_norm_modules_, vmap

from .akg import ActionKnowledgeGraph, GcnParams, edge_mask, gcn_layer, normalize_graph
from .cbi import CrossBranchIntegration
from .config import ModelConfig
from .distill import HumanHead, SceneHead, human_head, human_loss, scene_head, scene_loss
from .errors import NumericError
from .netcore import build_model, parameter_registry
from .ops import watch_kinks
from .trainer import LossWeights, total_loss

TARGETS = ("cbi", "akg", "losses", "model")


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    worst: tuple = ()  # (tensor name, flat index, autograd value, numeric value)
    seconds: float = 0.0
    tolerance: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        where = ""
        if self.worst:
            tname, idx, a, n = self.worst
            where = f" worst {tname}[{idx}] autograd={a:.6e} numeric={n:.6e}"
        return (
            f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.0e}, {self.n_checked} coords, {self.seconds:.1f}s){where}"
        )


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(
    fn, tensors, eps=1e-5, max_coords=10_000, seed=0, name="subject", tolerance=1e-4, batched=None, chunk=256
):
    """Compare autograd against ``(f(x+eps) - f(x-eps)) / (2 eps)`` per coordinate.

    ``fn()`` returns a scalar and reads the leaf tensors in ``tensors`` (a dict
    name -> tensor or a list). Above ``max_coords`` coordinates a seeded random
    subset is probed. ``batched``, when given, maps a dict of leaves with an
    extra leading batch axis to a vector of function values and is used for
    the finite differences in chunks.
    """
    if not isinstance(tensors, dict):
        tensors = {f"arg{i}": t for i, t in enumerate(tensors)}
    start = time.perf_counter()
    names = list(tensors)
    leaves = [tensors[n] for n in names]
    for t in leaves:
        t.requires_grad_(True)
    out = fn()
    if out.numel() != 1:
        raise ValueError(f"{name}: grad_check needs a scalar function, got shape {tuple(out.shape)}")
    if not torch.isfinite(out):
        raise NumericError(f"{name}: non-finite function value {float(out.detach())}")
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    grads = [torch.zeros_like(t).reshape(-1) if g is None else g.detach().reshape(-1) for t, g in zip(leaves, grads)]

    coords = [(ti, j) for ti, t in enumerate(leaves) for j in range(t.numel())]
    if len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    with torch.no_grad():
        if batched is None:
            numeric = [_central_difference(fn, leaves[ti].view(-1), j, eps) for ti, j in coords]
        else:
            numeric = []
            for lo in range(0, len(coords), chunk):
                numeric += _batched_differences(batched, names, leaves, coords[lo : lo + chunk], eps)

    worst, max_err = (), 0.0
    for (ti, j), num in zip(coords, numeric):
        analytic = grads[ti][j].item()
        if not (np.isfinite(num) and np.isfinite(analytic)):
            raise NumericError(
                f"{name}: non-finite gradient at {names[ti]}[{j}] (autograd={analytic}, numeric={num})"
            )
        err = relative_error(analytic, num)
        if err > max_err or not worst:
            max_err, worst = err, (names[ti], j, analytic, num)
    return GradCheckResult(name, max_err, len(coords), worst, time.perf_counter() - start, tolerance)


def _central_difference(fn, flat, j, eps):
    original = flat[j].item()
    flat[j] = original + eps
    f_plus = fn().item()
    flat[j] = original - eps
    f_minus = fn().item()
    flat[j] = original
    return (f_plus - f_minus) / (2 * eps)


def _batched_differences(batched, names, leaves, coords, eps):
    # rows 2k and 2k+1 hold the +eps and -eps copies for coords[k]
    k = len(coords)
    stacked = {n: t.detach().unsqueeze(0).repeat(2 * k, *([1] * t.dim())) for n, t in zip(names, leaves)}
    for row, (ti, j) in enumerate(coords):
        flat = stacked[names[ti]].view(2 * k, -1)
        flat[2 * row, j] += eps
        flat[2 * row + 1, j] -= eps
    values = batched(stacked).reshape(k, 2)
    return ((values[:, 0] - values[:, 1]) / (2 * eps)).tolist()


def smooth_point(make, fn_of, margin, attempts=200, accept=None):
    """Draw candidates from ``make(seed)`` until every ReLU input clears ``margin``.

    ``accept(candidate)`` can veto a kink-free candidate as well.
    """
    for attempt in range(attempts):
        candidate = make(attempt)
        with torch.no_grad(), watch_kinks() as monitor:
            fn_of(candidate)()
        if monitor.min_margin >= margin and (accept is None or accept(candidate)):
            return candidate
    raise NumericError(f"no kink-free probe point found in {attempts} draws (margin {margin})")


def resolvable(fn, leaves, floor):
    """True when no nonzero gradient coordinate is smaller than ``floor``.

    Central differences carry roughly ``1e-11`` absolute roundoff here, so a
    coordinate that cancels to ~1e-8 cannot be verified to 1e-4 relative.
    """
    for t in leaves:
        t.requires_grad_(True)
    grads = torch.autograd.grad(fn(), leaves, allow_unused=True)
    for t in leaves:
        t.requires_grad_(False)
    for g in grads:
        if g is not None:
            small = g.abs()
            if bool(((small > 0) & (small < floor)).any()):
                return False
    return True


def _uniform(gen, *shape):
    return torch.rand(*shape, generator=gen, dtype=torch.float64) * 2 - 1


def _randomize_module(module, gen, scale=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(_uniform(gen, *p.shape) * scale)


def check_cbi(seed=0, eps=1e-5, train_mode=True):
    def make(attempt):
        gen = torch.Generator().manual_seed(seed * 1000 + attempt)
        module = CrossBranchIntegration(4).double()
        _randomize_module(module, gen)
        module.train(train_mode)
        inputs = {k: _uniform(gen, 2, 4, 3, 3) for k in ("action", "scene", "human")}
        weight = _uniform(gen, 2, 4, 3, 3)
        return module, inputs, weight

    def fn_of(c):
        module, inputs, weight = c
        return lambda: (module(inputs["action"], inputs["scene"], inputs["human"]) * weight).sum()

    c = smooth_point(make, fn_of, 10 * eps)
    module, inputs, _ = c
    tensors = dict(inputs)
    tensors.update({f"cbi/{k}": p for k, p in module.named_parameters()})
    mode = "train" if train_mode else "eval"
    return grad_check(fn_of(c), tensors, eps, seed=seed, name=f"cbi[{mode}-bn]")


def check_akg(relation_kind, seed=0, eps=1e-5, n_seg=3, d=6):
    def make(attempt):
        gen = torch.Generator().manual_seed(seed * 1000 + attempt)
        akg = ActionKnowledgeGraph(d, relation_kind, embed_dim=3).double()
        _randomize_module(akg, gen)
        groups = {k: _uniform(gen, 2, n_seg, d) for k in ("action", "scene", "human")}
        weight = _uniform(gen, 2, n_seg, d)
        return akg, groups, weight

    def fn_of(c):
        akg, groups, weight = c
        return lambda: (akg(groups["action"], groups["scene"], groups["human"]) * weight).sum()

    c = smooth_point(make, fn_of, 10 * eps)
    akg, groups, _ = c
    tensors = dict(groups)
    tensors.update({f"akg/{k}": p for k, p in akg.named_parameters()})
    return grad_check(fn_of(c), tensors, eps, seed=seed, name=f"akg[{relation_kind}]")


def check_normalization(seed=0, eps=1e-5, n_seg=3):
    gen = torch.Generator().manual_seed(seed)
    n = 3 * n_seg
    scores = _uniform(gen, n, n) * 3
    weight = _uniform(gen, n, n)
    mask = edge_mask(n_seg)
    return grad_check(
        lambda: (normalize_graph(scores, mask) * weight).sum(), {"scores": scores}, eps, seed=seed, name="akg[normalize]"
    )


def check_gcn(seed=0, eps=1e-5, n=6, d=5):
    def make(attempt):
        gen = torch.Generator().manual_seed(seed * 1000 + attempt)
        params = GcnParams(d, "relu").double()
        _randomize_module(params, gen, 1.0)
        return params, _uniform(gen, n, n), _uniform(gen, n, d), _uniform(gen, n, d)

    def fn_of(c):
        params, G, X, weight = c
        return lambda: (gcn_layer(G, X, params) * weight).sum()

    c = smooth_point(make, fn_of, 10 * eps)
    params, G, X, _ = c
    return grad_check(fn_of(c), {"G": G, "X": X, "gcn/weight": params.weight}, eps, seed=seed, name="akg[gcn]")


def check_scene_loss(seed=0, eps=1e-5, n_seg=3, d=6, k_scene=7):
    gen = torch.Generator().manual_seed(seed)
    head = SceneHead(d, k_scene).double()
    _randomize_module(head, gen)
    pooled = _uniform(gen, n_seg, d)
    labels = torch.randint(0, k_scene, (n_seg,), generator=gen)
    tensors = {"scene_pooled": pooled, "heads/scene/weight": head.weight, "heads/scene/bias": head.bias}
    return grad_check(
        lambda: scene_loss(scene_head(pooled, head), labels), tensors, eps, seed=seed, name="losses[scene]"
    )


def check_human_loss(seed=0, eps=1e-5, batch=3, d=4, hw=(4, 5), frame_hw=(16, 20)):
    gen = torch.Generator().manual_seed(seed)
    head = HumanHead(d).double()
    _randomize_module(head, gen)
    fm = _uniform(gen, batch, d, *hw)
    masks = torch.randint(0, 2, (batch, *frame_hw), generator=gen)
    tensors = {"human_fm": fm, "heads/human/weight": head.weight, "heads/human/bias": head.bias}
    return grad_check(
        lambda: human_loss(human_head(fm, head), masks), tensors, eps, seed=seed, name="losses[human]"
    )


MICRO_CONFIG = ModelConfig(
    n_seg=3,
    stem_channels=4,
    branch_channels=(4, 4, 6, 6),
    stage_strides=(1, 2, 1, 1),
    k_action=3,
    k_scene=5,
    input_hw=(12, 12),
)


def check_model(seed=0, eps=1e-5, config=MICRO_CONFIG, n_videos=2, gradient_floor=1e-6):
    """Full forward pass plus the weighted joint loss on a two-video micro-batch.

    Batch norm runs in training mode, as during optimisation: with frozen
    statistics some coordinates cancel to ~1e-8, below what central
    differences resolve. The finite differences go through a vmapped copy of
    the model whose batch-norm layers skip running-statistic tracking, which
    leaves outputs unchanged.
    """

    def make(attempt):
        gen = torch.Generator().manual_seed(seed * 1000 + attempt)
        model = build_model(config, seed=seed * 1000 + attempt).double().train()
        with torch.no_grad():
            for name, p in parameter_registry(model).items():
                if name.startswith("cbi/"):
                    p.add_(_uniform(gen, *p.shape) * 0.3)
        h, w = config.input_hw
        frames = _uniform(gen, n_videos, config.n_seg, 3, h, w)
        labels = torch.randint(0, config.k_action, (n_videos,), generator=gen)
        scenes = torch.randint(0, config.k_scene, (n_videos, config.n_seg), generator=gen)
        masks = torch.randint(0, 2, (n_videos * config.n_seg, h, w), generator=gen)
        return model, frames, labels, scenes, masks

    weights = LossWeights()

    def loss_terms(model, frames, labels, scenes, masks):
        out = model(frames, with_aux=True)
        l_action = torch.nn.functional.cross_entropy(out.action_logits, labels)
        return l_action, human_loss(out.human_logits, masks), scene_loss(out.scene_logits, scenes)

    def fn_of(c):
        return lambda: total_loss(*loss_terms(*c), weights)

    def accept(c):
        return resolvable(fn_of(c), [c[1], *c[0].parameters()], gradient_floor)

    c = smooth_point(make, fn_of, 10 * eps, accept=accept)
    model, frames, labels, scenes, masks = c
    params = parameter_registry(model)
    tensors = {"frames": frames, **params}

    stateless = copy.deepcopy(model)
    replace_all_batch_norm_modules_(stateless)
    dotted = {name: name.replace("/", ".") for name in params}

    def single(leaves):
        p = {dotted[n]: leaves[n] for n in params}
        shim = _Bound(stateless, p)
        return torch.stack(loss_terms(shim, leaves["frames"], labels, scenes, masks))

    def batched(stacked):
        terms = vmap(single)(stacked)
        return total_loss(terms[:, 0], terms[:, 1], terms[:, 2], weights)

    return grad_check(fn_of(c), tensors, eps, seed=seed, name="model[full loss]", batched=batched)


class _Bound:
    """Calls ``module`` with substituted parameters."""

    def __init__(self, module, params):
        self.module = module
        self.params = params

    def __call__(self, *args, **kwargs):
        return functional_call(self.module, self.params, args, kwargs)


def run_targets(targets=("all",), seed=0, eps=1e-5):
    if "all" in targets:
        targets = TARGETS
    results = []
    for target in targets:
        if target == "cbi":
            results += [check_cbi(seed, eps, True), check_cbi(seed, eps, False)]
        elif target == "akg":
            results += [check_akg(kind, seed, eps) for kind in ("dot", "embedded_dot", "concat")]
            results += [check_normalization(seed, eps), check_gcn(seed, eps)]
        elif target == "losses":
            results += [check_scene_loss(seed, eps), check_human_loss(seed, eps)]
        elif target == "model":
            results.append(check_model(seed, eps))
        else:
            raise ValueError(f"unknown gradcheck target {target!r}; choose from {', '.join(TARGETS)} or all")
    return results
