import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import example_loss, tiny_model
from streamdisfl.encoder import PrefixOutputs, forward, gradient
from streamdisfl.objective import (
    LossConfig,
    batch_loss_terms,
    compute_mask,
    cross_entropy_per_token,
    full_loss,
    latency_cost,
    prefix_loss,
    soft_mask_weights,
    total_loss,
)
from streamdisfl.trainer import batch_losses, build_prefix_batch

D = torch.float64


def outputs_with_wait(dis_logits, wait_prob):
    """PrefixOutputs whose wait head yields exactly ``wait_prob`` (0, 1 or in between)."""
    n = len(dis_logits)
    if wait_prob == 1.0:
        w = torch.tensor([[-1e9, 1e9]] * n, dtype=D)
    elif wait_prob == 0.0:
        w = torch.tensor([[1e9, -1e9]] * n, dtype=D)
    else:
        w = torch.tensor([[0.0, math.log(wait_prob / (1 - wait_prob))]] * n, dtype=D)
    return PrefixOutputs(torch.as_tensor(dis_logits, dtype=D), w)


def random_example(rng, n):
    outs = [PrefixOutputs(torch.tensor(rng.normal(size=(i, 2)), dtype=D),
                          torch.tensor(rng.normal(size=(i, 2)) * 2, dtype=D)) for i in range(1, n + 1)]
    labels = list(rng.integers(0, 2, size=n))
    return outs, labels


@pytest.mark.parametrize(
    "logits, label, expected",
    [((0.0, 0.0), 1, math.log(2)), ((0.0, math.log(3)), 1, -math.log(0.75)), ((-1e9, 1e9), 1, 0.0)],
)
def test_cross_entropy_per_token(logits, label, expected):
    ce = cross_entropy_per_token([logits], [label])
    assert float(ce[0]) == pytest.approx(expected, abs=1e-9)


def test_cross_entropy_length_mismatch():
    with pytest.raises(ValueError):
        cross_entropy_per_token([[0.0, 0.0]], [0, 1])


def test_full_loss():
    single = PrefixOutputs(torch.zeros((1, 2), dtype=D), torch.zeros((1, 2), dtype=D))
    assert float(full_loss(single, [0])) == pytest.approx(math.log(2))
    logits = torch.tensor([[0.3, -1.2], [2.0, 0.5]], dtype=D)
    two = PrefixOutputs(logits, torch.zeros((2, 2), dtype=D))
    per_token = cross_entropy_per_token(logits, [1, 0])
    assert float(full_loss(two, [1, 0])) == float(per_token[0] + per_token[1])
    other_wait = PrefixOutputs(logits, torch.randn((2, 2), dtype=D))
    assert float(full_loss(other_wait, [1, 0])) == float(full_loss(two, [1, 0]))


@pytest.mark.parametrize(
    "probs, k, weights",
    [([0.2, 0.7, 0.1], 1, [1, 0, 0]), ([0.1, 0.2, 0.3], None, [1, 1, 1]), ([0.5], None, [1])],
)
def test_compute_mask(probs, k, weights):
    mask = compute_mask(probs, 0.5)
    assert mask.first_wait == k
    assert list(mask.weights) == weights


def test_soft_mask_weights():
    assert soft_mask_weights([0.0, 0.0, 0.0]).tolist() == [1.0, 1.0, 1.0]
    assert soft_mask_weights([0.5, 0.5]).tolist() == [0.5, 0.25]


@pytest.mark.parametrize("n", range(1, 7))
def test_soft_weights_equal_hard_mask_on_binary_probs(n):
    for bits in itertools.product((0.0, 1.0), repeat=n):
        soft = soft_mask_weights(list(bits)).numpy()
        hard = compute_mask(list(bits), 0.5).weights
        assert np.array_equal(soft, hard)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_soft_weights_nonincreasing_in_unit_interval(probs):
    w = soft_mask_weights(probs).numpy()
    assert np.all(w >= 0) and np.all(w <= 1)
    assert np.all(np.diff(w) <= 0)


def test_prefix_loss_always_wait_is_zero():
    rng = np.random.default_rng(0)
    for mode in ("soft_relaxation", "hard_stop_gradient"):
        outs = [outputs_with_wait(rng.normal(size=(i, 2)), 1.0) for i in range(1, 6)]
        assert float(prefix_loss(outs, [0, 1, 1, 0, 0, 1], LossConfig(mask_mode=mode))) == 0.0


def test_prefix_loss_never_wait_is_strongly_incremental_sum():
    rng = np.random.default_rng(1)
    labels = [0, 1, 1, 0, 0, 1]
    outs = [outputs_with_wait(rng.normal(size=(i, 2)), 0.0) for i in range(1, 6)]
    expected = sum(float(cross_entropy_per_token(o.disfluency_logits, labels[:i]).sum())
                   for i, o in enumerate(outs, start=1))
    for mode in ("soft_relaxation", "hard_stop_gradient"):
        got = float(prefix_loss(outs, labels, LossConfig(mask_mode=mode)))
        assert got == pytest.approx(expected, rel=1e-15)


def test_prefix_loss_hard_mask_dot_product():
    # CE vector [0.3, 0.9] and mask [1, 0] -> 0.3
    ce_target = [0.3, 0.9]
    logits = [[0.0, math.log(math.exp(c) - 1.0)] for c in ce_target]  # label 0 loses exactly c
    wait = torch.tensor([[0.0, -5.0], [0.0, 5.0]], dtype=D)
    first = outputs_with_wait([[0.0, 0.0]], 0.0)
    second = PrefixOutputs(torch.tensor(logits, dtype=D), wait)
    cfg = LossConfig(gamma=1.0, lambda_=0.0, mask_mode="hard_stop_gradient")
    ce = cross_entropy_per_token(second.disfluency_logits, [0, 0])
    assert ce.tolist() == pytest.approx(ce_target, abs=1e-12)
    # only the second prefix is checked: subtract the first prefix's contribution
    got = float(prefix_loss([first, second], [0, 0, 0], cfg)) - math.log(2)
    assert got == pytest.approx(0.3, abs=1e-12)


def test_prefix_loss_single_token_is_empty():
    assert float(prefix_loss([], [1], LossConfig())) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000), st.integers(0, 5), st.floats(0.01, 0.5))
def test_prefix_loss_soft_is_monotone_in_each_wait_probability(n, seed, pick, bump):
    rng = np.random.default_rng(seed)
    labels = list(rng.integers(0, 2, size=n))
    probs = [rng.uniform(0, 0.99, size=i) for i in range(1, n)]
    logits = [rng.normal(size=(i, 2)) for i in range(1, n)]

    def loss(ps):
        outs = [PrefixOutputs(torch.tensor(lg, dtype=D),
                              torch.tensor(np.stack([np.zeros(len(p)), np.log(p / (1 - p))], 1), dtype=D))
                for lg, p in zip(logits, ps)]
        return float(prefix_loss(outs, labels, LossConfig()))

    i = pick % (n - 1)
    j = pick % (i + 1)
    raised = [p.copy() for p in probs]
    raised[i][j] = min(raised[i][j] + bump, 0.995)
    assert loss(raised) <= loss(probs) + 1e-12


@pytest.mark.parametrize(
    "probs, expected",
    [([[0.0], [0.0, 0.0], [0.0, 0.0, 0.0]], 0.0),
     ([[1.0], [1.0, 1.0], [1.0, 1.0, 1.0]], 4.0),
     ([[0.4], [0.6, 0.2]], 0.6)],
)
def test_latency_cost(probs, expected):
    assert float(latency_cost(probs)) == pytest.approx(expected, abs=1e-15)


def test_latency_cost_shape_error():
    with pytest.raises(ValueError):
        latency_cost([[0.1, 0.2]])


def test_latency_cost_is_linear_with_offset_coefficients():
    rng = np.random.default_rng(3)
    probs = [rng.uniform(size=i) for i in range(1, 6)]
    base = float(latency_cost(probs))
    for i in range(5):
        for j in range(i + 1):
            bumped = [p.copy() for p in probs]
            bumped[i][j] += 0.25
            assert float(latency_cost(bumped)) - base == pytest.approx(0.25 * (i - j), abs=1e-12)


def test_total_loss_ablations():
    rng = np.random.default_rng(4)
    outs, labels = random_example(rng, 5)
    full = float(full_loss(outs[-1], labels))
    assert float(total_loss(outs, labels, LossConfig(gamma=0, lambda_=0)).total) == full
    never = [outputs_with_wait(o.disfluency_logits, 0.0) for o in outs]
    strongly = sum(float(cross_entropy_per_token(o.disfluency_logits, labels[:i]).sum())
                   for i, o in enumerate(never[:-1], start=1))
    got = total_loss(never, labels, LossConfig(gamma=1.9, lambda_=0.0))
    assert float(got.total) == pytest.approx(full + 1.9 * strongly, rel=1e-15)


@given(st.integers(1, 8), st.integers(0, 10_000), st.floats(0, 5), st.floats(0, 1),
       st.sampled_from(["soft_relaxation", "hard_stop_gradient", "off"]))
@settings(max_examples=40, deadline=None)
def test_breakdown_identity(n, seed, gamma, lam, mode):
    outs, labels = random_example(np.random.default_rng(seed), n)
    cfg = LossConfig(gamma=gamma, lambda_=lam, mask_mode=mode)
    b = total_loss(outs, labels, cfg).detach()
    assert b.total == pytest.approx(b.full + gamma * b.prefix + lam * b.latency, abs=1e-9)
    assert min(b.full, b.prefix, b.latency) >= 0


def test_mask_shift_invariance():
    rng = np.random.default_rng(5)
    logits = torch.tensor(rng.normal(size=(6, 2)), dtype=D)
    p = torch.softmax(logits, -1)[:, 1]
    q = torch.softmax(logits + 3.5, -1)[:, 1]
    assert compute_mask(p).first_wait == compute_mask(q).first_wait


def test_hard_mode_gives_no_prefix_gradient_to_wait_head():
    model = tiny_model()
    ids, labels = [4, 7, 3, 9], [0, 1, 0, 0]
    cfg = LossConfig(gamma=1.0, lambda_=0.0, mask_mode="hard_stop_gradient")

    def loss(m):
        outs = [forward(m, ids[:i]) for i in range(1, len(ids))]
        return prefix_loss(outs, labels, cfg)

    grads = gradient(model, loss)
    assert np.all(grads["wait_head.weight"] == 0) and np.all(grads["wait_head.bias"] == 0)
    soft = gradient(model, lambda m: prefix_loss([forward(m, ids[:i]) for i in range(1, 4)], labels,
                                                 LossConfig(gamma=1.0, lambda_=0.0)))
    assert np.any(soft["wait_head.weight"] != 0)


@pytest.mark.parametrize("mode", ["soft_relaxation", "hard_stop_gradient", "off"])
def test_batched_terms_match_per_prefix_evaluation(mode):
    model = tiny_model(max_len=12)
    examples = [([4, 7, 3, 9], [0, 1, 0, 0]), ([5], [1]), ([8, 8, 6, 5, 4, 3], [1, 0, 0, 0, 1, 0])]
    cfg = LossConfig(gamma=1.3, lambda_=0.2, mask_mode=mode)
    batch = build_prefix_batch(examples)
    full, pre, lat, tot = (t.detach() for t in batch_losses(model, batch, cfg))
    for u, (ids, labels) in enumerate(examples):
        ref = example_loss(model, ids, labels, cfg).detach()
        assert float(full[u]) == pytest.approx(ref.full, rel=1e-12)
        assert float(pre[u]) == pytest.approx(ref.prefix, rel=1e-12, abs=1e-14)
        assert float(lat[u]) == pytest.approx(ref.latency, rel=1e-12, abs=1e-14)
        assert float(tot[u]) == pytest.approx(ref.total, rel=1e-12)


def test_batched_terms_with_start_marker():
    model = tiny_model(max_len=12, start_marker=True)
    examples = [([4, 7, 3], [0, 1, 0]), ([5, 6], [1, 0])]
    cfg = LossConfig(gamma=0.7, lambda_=0.1)
    full, pre, lat, tot = batch_losses(model, build_prefix_batch(examples, start_marker=True), cfg)
    for u, (ids, labels) in enumerate(examples):
        assert float(tot[u].detach()) == pytest.approx(example_loss(model, ids, labels, cfg).detach().total, rel=1e-12)


def test_batched_latency_of_all_ones_closed_form():
    n = 50
    width = n
    rows = n
    wait = torch.zeros((rows, width, 2), dtype=D)
    wait[..., 1] = 1e9
    dis = torch.zeros((rows, width, 2), dtype=D)
    plen = torch.arange(1, n + 1)
    _, pre, lat, _ = batch_loss_terms(dis, wait, plen, torch.zeros(rows, dtype=torch.long),
                                      torch.tensor([n]), torch.zeros((rows, width), dtype=torch.long),
                                      LossConfig())
    assert float(lat[0]) == sum(i * (i - 1) // 2 for i in range(1, n))
    assert float(pre[0]) == 0.0
