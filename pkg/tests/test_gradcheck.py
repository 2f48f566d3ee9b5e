import pytest
import torch

from kinet.errors import NumericError
from kinet.gradcheck import grad_check, relative_error, run_targets

D = torch.float64


class BrokenSquare(torch.autograd.Function):
    """x**2 whose backward is wrong at exactly one coordinate."""

    bad_index = 3

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        g = 2 * x * grad
        g.view(-1)[BrokenSquare.bad_index] *= 1.5
        return g


def test_square_is_exact():
    x = torch.tensor([1.5], dtype=D)
    result = grad_check(lambda: (x * x).sum(), [x])
    assert result.max_rel_error <= 1e-8
    assert result.passed


def test_relu_away_from_the_kink():
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(200, generator=gen, dtype=D) * 2 - 1
    x = x[x.abs() > 10 * 1e-5].clone()
    w = torch.rand(x.shape, generator=gen, dtype=D)
    result = grad_check(lambda: (torch.relu(x) * w).sum(), {"x": x})
    assert result.max_rel_error <= 1e-6


def test_corrupted_gradient_is_located():
    x = torch.linspace(0.5, 2.0, 8, dtype=D)
    result = grad_check(lambda: BrokenSquare.apply(x).sum(), {"x": x}, name="broken")
    assert not result.passed
    tname, index, analytic, numeric = result.worst
    assert (tname, index) == ("x", 3)
    assert analytic == pytest.approx(1.5 * numeric, rel=1e-6)
    assert "FAIL broken" in result.line() and "x[3]" in result.line()


def test_non_finite_difference_names_the_coordinate():
    x = torch.tensor([1.0, 5e-6, 2.0], dtype=D)
    with pytest.raises(NumericError, match=r"arg0\[1\]"):
        grad_check(lambda: torch.log(x).sum(), [x])


def test_non_finite_value_is_rejected():
    x = torch.tensor([0.0], dtype=D)
    with pytest.raises(NumericError):
        grad_check(lambda: torch.log(x).sum(), [x])


def test_large_inputs_are_subsampled_reproducibly():
    x = torch.randn(60, dtype=D)
    a = grad_check(lambda: (x**3).sum(), [x], max_coords=10, seed=4)
    b = grad_check(lambda: (x**3).sum(), [x], max_coords=10, seed=4)
    assert a.n_checked == 10
    assert a.worst == b.worst and a.max_rel_error == b.max_rel_error


def test_batched_differences_agree_with_the_loop():
    gen = torch.Generator().manual_seed(1)
    x = torch.rand(12, generator=gen, dtype=D)
    W = torch.rand(12, 3, generator=gen, dtype=D)

    def batched(stacked):
        return torch.sin(stacked["x"] @ W).sum(dim=-1)

    a = grad_check(lambda: torch.sin(x @ W).sum(), {"x": x})
    b = grad_check(lambda: torch.sin(x @ W).sum(), {"x": x}, batched=batched, chunk=5)
    assert b.n_checked == 12
    assert b.max_rel_error == pytest.approx(a.max_rel_error, abs=1e-9)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == 0.5


@pytest.mark.parametrize("target", ["cbi", "akg", "losses"])
def test_component_targets_pass(target):
    results = run_targets([target], seed=0)
    assert results
    for r in results:
        assert r.passed, r.line()
