import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinet.config import ModelConfig, RunConfig, dotted_fields
from kinet.errors import ConfigError


def test_defaults_are_valid_and_match_the_desk_setup():
    config = RunConfig().validate()
    assert config.model.n_seg == 3
    assert config.model.cbi_attach == ("res4", "res5")
    assert config.model.stage_names == ("res2", "res3", "res4", "res5")
    assert config.model.d == 64
    assert (config.optim.lr, config.optim.momentum, config.optim.weight_decay) == (0.01, 0.9, 1e-5)
    assert (config.optim.lambda_action, config.optim.lambda_human, config.optim.lambda_scene) == (1.0, 0.01, 0.01)
    assert config.data.base_hw == (64, 80)
    assert config.data.scales == (1.0, 0.875, 0.75, 0.66)
    assert (config.eval.n_eval_seg, config.eval.window) == (25, 3)


def test_text_round_trip():
    config = RunConfig().with_overrides({"model.cbi_attach": "res5", "optim.epochs": 9, "model.use_akg": "false"})
    again = RunConfig.from_text(config.to_text())
    assert again == config
    assert again.digest() == config.digest()


def test_empty_attach_list_round_trips():
    config = RunConfig().with_overrides({"model.cbi_attach": ""})
    assert config.model.cbi_attach == ()
    assert RunConfig.from_text(config.to_text()).model.cbi_attach == ()


@pytest.mark.parametrize(
    "text, field",
    [
        ("[model]\nwidth = 3\n", "width"),
        ("[extras]\na = 1\n", "extras"),
        ("[optim]\nepochs = many\n", "optim.epochs"),
        ("[model]\nuse_akg = maybe\n", "model.use_akg"),
        ("[model]\ninput_hw = 1, 2, 3\n", "model.input_hw"),
        ("[eval]\nwindow = 30\n", "eval.window"),
        ("[optim]\nlambda_action = 0\n", "lambda_action"),
        ("[teacher]\nkind = file\n", "teacher.manifest"),
        ("no section\n", "malformed"),
    ],
)
def test_bad_text_is_rejected_with_the_field(text, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        RunConfig.from_text(text)


def test_unknown_override_key():
    with pytest.raises(ConfigError, match="model.depth"):
        RunConfig().with_overrides({"model.depth": 3})


def test_shared_stages_move_into_the_stem():
    config = ModelConfig(shared_stages=1, cbi_attach=("res4",)).validate()
    assert config.branch_stage_names == ("res3", "res4", "res5")
    with pytest.raises(ConfigError, match="shared stem"):
        ModelConfig(shared_stages=2, cbi_attach=("res3",)).validate()


def test_relation_width_defaults_to_half_d():
    assert ModelConfig().relation_dim == 32
    assert ModelConfig(embed_dim=5).relation_dim == 5


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "absent.ini")


def test_every_field_has_a_dotted_name():
    names = [d for d, _, _ in dotted_fields()]
    assert len(names) == len(set(names))
    assert {"model.n_seg", "optim.lambda_scene", "eval.protocol", "teacher.kind", "data.base_hw"} <= set(names)


@settings(max_examples=40, deadline=None)
@given(
    epochs=st.integers(1, 500),
    lam=st.floats(0, 5, allow_nan=False),
    attach=st.lists(st.sampled_from(["res2", "res3", "res4", "res5"]), unique=True),
    kind=st.sampled_from(["dot", "embedded_dot", "concat"]),
)
def test_overrides_survive_the_text_form(epochs, lam, attach, kind):
    config = RunConfig().with_overrides(
        {"optim.epochs": epochs, "optim.lambda_human": lam, "model.cbi_attach": tuple(attach), "model.relation_kind": kind}
    )
    assert RunConfig.from_text(config.to_text()) == config
