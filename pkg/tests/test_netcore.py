import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import TINY_MODEL
from kinet.checkpoint import model_state_arrays
from kinet.config import ModelConfig
from kinet.errors import ConfigError, ShapeError
from kinet.netcore import (
    BRANCHES,
    build_baseline,
    build_model,
    forward_branches,
    forward_stem,
    global_avg_pool,
    parameter_registry,
)

GROUPS = {"stem", "action", "scene", "human", "cbi", "akg", "heads"}


def _frames(config, n=6, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, *config.input_hw, generator=gen, dtype=dtype) * 2 - 1


def test_same_seed_gives_identical_registry():
    a = model_state_arrays(build_model(seed=7))
    b = model_state_arrays(build_model(seed=7))
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_different_seeds_differ():
    a = model_state_arrays(build_model(seed=7))
    b = model_state_arrays(build_model(seed=8))
    assert any(a[k].tobytes() != b[k].tobytes() for k in a)


def test_unknown_cbi_stage_names_the_field():
    with pytest.raises(ConfigError, match=r"cbi_attach.*res9"):
        build_model(ModelConfig(cbi_attach=("res9",)))


def test_parameter_names_partition_into_groups():
    names = list(parameter_registry(build_model()))
    assert len(names) == len(set(names))
    groups = {n.split("/")[0] for n in names}
    assert groups == GROUPS


def test_stem_stride_four():
    config = ModelConfig(input_hw=(64, 64))
    model = build_model(config)
    out = forward_stem(_frames(config), model)
    assert tuple(out.shape) == (6, config.stem_channels, 16, 16)


@pytest.mark.parametrize("train", [True, False])
def test_stem_maps_zero_to_zero(train):
    config = ModelConfig(input_hw=(64, 64))
    model = build_model(config).train(train)
    out = forward_stem(torch.zeros(6, 3, 64, 64), model)
    assert torch.count_nonzero(out) == 0


def test_stem_rejects_wrong_extent():
    model = build_model(TINY_MODEL)
    with pytest.raises(ShapeError, match=r"\(B, 3, 24, 24\).*\(2, 3, 20, 24\)"):
        forward_stem(torch.zeros(2, 3, 20, 24), model)


def test_forward_is_bit_identical_across_builds():
    frames = _frames(TINY_MODEL)[None]
    outs = [build_model(TINY_MODEL, seed=1)(frames).action_logits for _ in range(2)]
    assert torch.equal(*outs)


def _action_maps(model, frames):
    with torch.no_grad():
        return [s.action.clone() for s in forward_branches(forward_stem(frames, model), model)]


def _nudge(model, prefix, eps=1e-3):
    with torch.no_grad():
        for name, p in parameter_registry(model).items():
            if name.startswith(prefix):
                p.add_(eps)


def test_branches_independent_without_fusion():
    config = ModelConfig(**{**TINY_MODEL.__dict__, "cbi_attach": ()})
    model = build_model(config).eval()
    frames = _frames(config)
    before = _action_maps(model, frames)
    _nudge(model, "scene/")
    _nudge(model, "human/")
    after = _action_maps(model, frames)
    assert all(torch.equal(a, b) for a, b in zip(before, after))


def test_scene_parameters_reach_action_after_fusion_point():
    config = ModelConfig(**{**TINY_MODEL.__dict__, "cbi_attach": ("res4",)}).validate()
    model = build_model(config).double().eval()
    frames = _frames(config, dtype=torch.float64)
    before = _action_maps(model, frames)
    _nudge(model, "scene/stages/res3", 1e-4)
    after = _action_maps(model, frames)
    delta = [float((a - b).abs().max()) for a, b in zip(before, after)]
    names = config.branch_stage_names
    assert delta[names.index("res2")] == 0.0
    assert delta[names.index("res3")] == 0.0
    assert delta[names.index("res4")] > 1e-9
    assert delta[names.index("res5")] > 1e-9


@settings(max_examples=15, deadline=None)
@given(
    n=st.integers(1, 4),
    widths=st.lists(st.integers(1, 6), min_size=1, max_size=4),
    hw=st.tuples(st.integers(8, 20), st.integers(8, 20)),
    data=st.data(),
)
def test_final_stage_shapes_agree(n, widths, hw, data):
    strides = tuple(data.draw(st.lists(st.integers(1, 2), min_size=len(widths), max_size=len(widths))))
    names = tuple(f"res{i + 2}" for i in range(len(widths)))
    attach = tuple(data.draw(st.lists(st.sampled_from(names), unique=True, max_size=2)))
    config = ModelConfig(
        stem_channels=3, branch_channels=tuple(widths), stage_strides=strides, cbi_attach=attach,
        k_action=3, k_scene=5, input_hw=hw,
    )
    # eval mode: a single 1x1 sample has no batch statistics
    model = build_model(config).eval()
    stages = forward_branches(forward_stem(_frames(config, n), model), model)
    last = stages[-1]
    for stage in stages:
        assert stage.action.shape == stage.scene.shape == stage.human.shape
    assert last.action.shape[:2] == (n, config.d)


def test_pooled_features_are_centred_in_training():
    # the action branch is fused after its norm, so only the plain branches stay centred
    model = build_model(TINY_MODEL).train()
    _, pooled = model.features(_frames(TINY_MODEL, 12), with_aux=True)
    for branch in ("scene", "human"):
        assert pooled[branch].mean(dim=0).abs().max() < 1e-5
    _, plain = build_model(dataclasses.replace(TINY_MODEL, cbi_attach=())).train().features(_frames(TINY_MODEL, 12), with_aux=True)
    assert plain["action"].mean(dim=0).abs().max() < 1e-5


def test_model_output_shapes():
    model = build_model(TINY_MODEL)
    out = model(_frames(TINY_MODEL).reshape(2, 3, 3, 24, 24))
    assert tuple(out.action_logits.shape) == (2, 4)
    assert tuple(out.segment_logits.shape) == (2, 3, 4)
    assert tuple(out.scene_logits.shape) == (2, 3, 4)
    assert out.human_logits.shape[:2] == (6, 2)


def test_baseline_shares_action_path_names_with_full_model():
    full = parameter_registry(build_model(TINY_MODEL, seed=4))
    base = parameter_registry(build_baseline(TINY_MODEL, seed=4))
    for name, p in base.items():
        assert torch.equal(p, full[name])


def test_pool_of_constant_map():
    assert torch.equal(global_avg_pool(torch.full((2, 3, 4, 5), 2.5)), torch.full((2, 3), 2.5))


def test_pool_of_single_pixel_map():
    fm = torch.arange(8.0).reshape(2, 4, 1, 1)
    assert torch.equal(global_avg_pool(fm), fm.reshape(2, 4))


def test_pool_matches_loop_oracle():
    fm = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, size=(3, 5, 6, 7)))
    expected = torch.tensor(oracles.spatial_mean(fm.tolist()), dtype=torch.float64)
    torch.testing.assert_close(global_avg_pool(fm), expected, atol=1e-6, rtol=0)


def test_pool_rejects_rank_three():
    with pytest.raises(ShapeError):
        global_avg_pool(torch.zeros(3, 4, 4))
