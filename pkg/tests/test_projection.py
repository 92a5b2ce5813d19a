import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ttp.errors import BudgetViolation, ShapeMismatch
from ttp.projection import BUDGET_TOLERANCE, Budget, SmoothingKernel, assert_within_budget, project, smooth

EPSILONS = [0.0, 8 / 255, 16 / 255, 32 / 255]


def test_kernel_is_binomial_and_sums_to_one():
    w = SmoothingKernel().weights(3, torch.float64, torch.device("cpu"))
    assert w.shape == (3, 1, 3, 3)
    expected = torch.tensor([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]], dtype=torch.float64) / 16
    for c in range(3):
        assert torch.equal(w[c, 0], expected)
        assert w[c].sum().item() == 1.0


def test_smooth_constant_is_fixed_point():
    x = torch.full((2, 3, 6, 6), 0.25)
    assert torch.equal(smooth(x), x)


def test_smooth_impulse_response():
    x = torch.zeros(1, 1, 5, 5)
    x[0, 0, 2, 2] = 1.0
    out = smooth(x)[0, 0]
    assert out[2, 2].item() == 4 / 16
    assert out[1, 2].item() == out[3, 2].item() == out[2, 1].item() == out[2, 3].item() == 2 / 16
    assert out[1, 1].item() == out[1, 3].item() == out[3, 1].item() == out[3, 3].item() == 1 / 16
    assert out.sum().item() == pytest.approx(1.0)
    assert out[0].abs().sum().item() == 0.0


def test_smooth_shrinks_checkerboard_range():
    idx = torch.arange(6)
    board = ((idx[:, None] + idx[None, :]) % 2).float().view(1, 1, 6, 6)
    out = smooth(board)
    assert out.max() - out.min() < 1.0
    # every cell: centre and corners share one colour (8/16), edge neighbours the other (8/16)
    assert torch.equal(out, torch.full_like(out, 0.5))


def test_zero_budget_returns_anchor_exactly():
    g = torch.Generator().manual_seed(0)
    raw, anchor = torch.rand(4, 3, 8, 8, generator=g), torch.rand(4, 3, 8, 8, generator=g)
    assert torch.equal(project(raw, anchor, Budget(0.0)), anchor)
    assert torch.equal(project(raw, anchor, Budget(0.0), kernel=None), anchor)


def test_constant_raw_equal_anchor():
    c = torch.full((1, 3, 4, 4), 0.6)
    assert torch.allclose(project(c, c.clone(), Budget.from_pixels(16)), c, atol=1e-6)


def test_all_ones_raw_around_black_anchor():
    out = project(torch.ones(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), Budget.from_pixels(16))
    assert torch.equal(out, torch.full_like(out, 16 / 255))


def test_projection_without_smoothing_is_idempotent():
    g = torch.Generator().manual_seed(1)
    raw, anchor = torch.rand(3, 3, 8, 8, generator=g), torch.rand(3, 3, 8, 8, generator=g)
    budget = Budget.from_pixels(8)
    once = project(raw, anchor, budget, kernel=None)
    assert torch.equal(project(once, anchor, budget, kernel=None), once)


def test_budget_suite_ten_thousand_triples():
    g = torch.Generator().manual_seed(2024)
    per_eps = 2500
    for eps in EPSILONS:
        raw = torch.rand(per_eps, 3, 4, 4, generator=g)
        anchor = torch.rand(per_eps, 3, 4, 4, generator=g)
        out = project(raw, anchor, Budget(eps))
        assert (out - anchor).abs().max().item() <= eps + BUDGET_TOLERANCE
        assert out.min().item() >= 0.0 and out.max().item() <= 1.0
        if eps == 0.0:
            assert torch.equal(out, anchor)


@settings(deadline=None, max_examples=200)
@given(
    seed=st.integers(0, 2**31 - 1),
    eps=st.sampled_from(EPSILONS) | st.floats(0.0, 1.0),
    smooth_on=st.booleans(),
    size=st.integers(2, 9),
)
def test_budget_invariant_property(seed, eps, smooth_on, size):
    g = torch.Generator().manual_seed(seed)
    raw, anchor = torch.rand(2, 3, size, size, generator=g), torch.rand(2, 3, size, size, generator=g)
    out = project(raw, anchor, Budget(eps), kernel=SmoothingKernel() if smooth_on else None)
    assert (out - anchor).abs().max().item() <= eps + BUDGET_TOLERANCE
    assert 0.0 <= out.min().item() and out.max().item() <= 1.0
    assert_within_budget(out, anchor, Budget(eps))


def test_projection_gradient_flows_inside_ball():
    anchor = torch.full((1, 1, 4, 4), 0.5)
    raw = torch.full((1, 1, 4, 4), 0.5, requires_grad=True)
    project(raw, anchor, Budget(0.1), kernel=None).sum().backward()
    assert torch.equal(raw.grad, torch.ones_like(raw))
    raw.grad = None
    project(raw, anchor, Budget(0.1)).sum().backward()
    assert raw.grad.sum().item() == pytest.approx(16.0)


def test_shape_mismatch_and_negative_budget():
    with pytest.raises(ShapeMismatch):
        project(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 5), Budget(0.1))
    with pytest.raises(ValueError):
        Budget(-0.01)
    assert Budget.from_pixels(16).pixels == pytest.approx(16.0)


def test_assert_within_budget_flags_violations():
    anchor = torch.zeros(1, 1, 2, 2)
    with pytest.raises(BudgetViolation):
        assert_within_budget(anchor + 0.2, anchor, Budget(0.1))
    with pytest.raises(BudgetViolation):
        assert_within_budget(anchor - 0.05, anchor, Budget(0.1))
    assert_within_budget(anchor + 0.1, anchor, Budget(0.1))
