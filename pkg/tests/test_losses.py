import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from modal_distill.losses import cross_entropy, distill_loss, harden, one_hot, smooth_labels

from .oracles import ce_scalar, distill_scalar

probs = st.floats(1e-6, 1 - 1e-6).map(lambda a: [a, 1 - a])


def test_smooth_labels_example():
    assert torch.allclose(smooth_labels([1.0, 0.0], 0.1), torch.tensor([0.95, 0.05], dtype=torch.float64))


def test_smooth_labels_alpha_range():
    with pytest.raises(ValueError):
        smooth_labels([1.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        smooth_labels([1.0, 0.0], -0.1)


def test_cross_entropy_uniform():
    assert math.isclose(cross_entropy([0.5, 0.5], [0.95, 0.05]).item(), math.log(2), rel_tol=1e-12)


def test_cross_entropy_floor():
    ce = cross_entropy([0.0, 1.0], [1.0, 0.0]).item()
    assert math.isfinite(ce)
    assert math.isclose(ce, -math.log(1e-12), rel_tol=1e-9)


def test_harden():
    assert harden([0.3, 0.7]).tolist() == [0.0, 1.0]
    assert harden([0.5, 0.5]).tolist() == [1.0, 0.0]
    assert harden(torch.tensor([[0.9, 0.1], [0.2, 0.8]])).tolist() == [[1, 0], [0, 1]]


def test_harden_blocks_gradient():
    p = torch.tensor([0.3, 0.7], requires_grad=True)
    assert not harden(p).requires_grad


def test_distill_example():
    # teacher agrees with the label: both terms equal CE(smooth(y), s)
    s, y = [0.8, 0.2], [1.0, 0.0]
    loss = distill_loss(s, y, [0.9, 0.1], 0.5, 0.5, 0.1).item()
    assert math.isclose(loss, ce_scalar(s, [0.95, 0.05]), rel_tol=1e-12)


def test_teacher_none_drops_term():
    s, y = [0.6, 0.4], [0.0, 1.0]
    a = distill_loss(s, y, None, 0.7, 0.3, 0.1)
    b = 0.7 * cross_entropy(s, smooth_labels(y, 0.1))
    assert torch.equal(a, b)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        distill_loss([0.5, 0.5], [1.0, 0.0], None, -1.0, 0.5, 0.1)


@settings(max_examples=60, deadline=None)
@given(s=probs, t=probs, label=st.integers(0, 1), beta=st.floats(0, 2), gamma=st.floats(0, 2),
       alpha=st.floats(0, 0.5))
def test_distill_matches_scalar_oracle(s, t, label, beta, gamma, alpha):
    y = [1.0 - label, float(label)]
    got = distill_loss(s, y, t, beta, gamma, alpha).item()
    assert math.isclose(got, distill_scalar(s, y, t, beta, gamma, alpha), rel_tol=1e-9, abs_tol=1e-12)


@settings(max_examples=40, deadline=None)
@given(s=probs, t=probs, label=st.integers(0, 1))
def test_gamma_zero_ignores_teacher(s, t, label):
    y = [1.0 - label, float(label)]
    assert distill_loss(s, y, t, 0.5, 0.0, 0.1).item() == distill_loss(s, y, None, 0.5, 0.0, 0.1).item()


@settings(max_examples=40, deadline=None)
@given(s=probs, t=probs, label=st.integers(0, 1))
def test_beta_zero_ignores_label(s, t, label):
    a = distill_loss(s, [1.0, 0.0], t, 0.0, 1.0, 0.1).item()
    b = distill_loss(s, [0.0, 1.0], t, 0.0, 1.0, 0.1).item()
    assert a == b


@settings(max_examples=40, deadline=None)
@given(s=probs, t=probs, label=st.integers(0, 1))
def test_agreeing_teacher_reduces_to_single_ce(s, t, label):
    y = [1.0 - label, float(label)]
    t_agree = harden(torch.tensor(t)).tolist() == y
    if not t_agree:
        t = y
    loss = distill_loss(s, y, t, 0.5, 0.5, 0.1).item()
    assert math.isclose(loss, cross_entropy(s, smooth_labels(y, 0.1)).item(), rel_tol=1e-12)


def test_batch_matches_loop():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.01, 0.99, 8)
    s = torch.tensor(np.stack([a, 1 - a], 1))
    b = rng.uniform(0.01, 0.99, 8)
    t = torch.tensor(np.stack([b, 1 - b], 1))
    y = one_hot(torch.tensor(rng.integers(0, 2, 8)), 2, torch.float64)
    batch = distill_loss(s, y, t, 0.5, 0.5, 0.1)
    loop = [distill_loss(s[i], y[i], t[i], 0.5, 0.5, 0.1).item() for i in range(8)]
    np.testing.assert_allclose(batch.numpy(), loop, rtol=1e-12)
