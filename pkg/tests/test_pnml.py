import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from advpnml import tensor as T
from advpnml.attacks import AttackConfig, pgd
from advpnml.errors import ContractError, DimensionError
from advpnml.models import ModelSpec, init_params, input_gradient, predict
from advpnml.pnml import (
    EndToEndModel,
    RefineConfig,
    candidate_labels,
    end_to_end_forward,
    end_to_end_loss,
    hypothesis_probs,
    pnml_assign,
    pnml_predict,
    pnml_predict_batch,
    refine,
    refine_batch,
)

from oracles import central_diff, mlp_ref, rel_err, softmax_ref, xent_ref

MLP = ModelSpec.mlp()
SMALL = ModelSpec.mlp((2, 16, 16, 3))


def _params(spec=MLP, seed=0, dtype=np.float64):
    p = init_params(spec, seed, dtype=dtype)
    # nonzero biases keep the toy networks away from degenerate symmetric kinks
    rng = np.random.default_rng(seed)
    return p.replace({k: v + (0.1 * rng.standard_normal(v.shape) if k.endswith("bias") else 0) for k, v in p.tensors.items()})


# ------------------------------------------------------------------- config


def test_refine_config_defaults():
    cfg = RefineConfig(0.1, iterations=4)
    assert cfg.step == pytest.approx(0.025)
    assert RefineConfig(0.1).step == 0.1


@pytest.mark.parametrize(
    "kwargs",
    [dict(strength=-0.1), dict(strength=0.1, iterations=0), dict(strength=0.1, top_k=0),
     dict(strength=0.4, iterations=2, step=0.1)],
)
def test_refine_config_validation(kwargs):
    with pytest.raises(ValueError):
        RefineConfig(**kwargs)


# ------------------------------------------------------------------- refine


def test_zero_strength_is_identity():
    params = _params()
    x = np.array([0.3, -0.7])
    np.testing.assert_array_equal(refine(params, x, 1, RefineConfig(0.0)), x)


def test_refine_label_out_of_range():
    with pytest.raises(IndexError):
        refine(_params(), np.zeros(2), 2, RefineConfig(0.1))


def test_single_step_is_targeted_fgsm():
    params = _params()
    x = np.array([0.4, 0.2])
    grad, _ = input_gradient(params, x[None], np.array([1]))
    np.testing.assert_array_equal(refine(params, x, 1, RefineConfig(0.3)), x - 0.3 * np.sign(grad[0]))


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float64, (4, 2), elements=st.floats(-3, 3)),
    st.floats(0, 1),
    st.integers(1, 5),
    st.integers(0, 1),
    st.booleans(),
)
def test_refined_inputs_stay_in_ball_and_range(x, strength, iterations, label, clamped):
    params = _params(seed=3)
    clamp = (-1.0, 1.0) if clamped else None
    if clamped:
        x = np.clip(x, -1, 1)
    cfg = RefineConfig(strength, iterations=iterations, clamp=clamp)
    out = refine_batch(params, x, np.full(4, label), cfg)
    assert np.all(np.abs(out - x) <= strength + 1e-12)
    if clamped:
        assert np.all((out >= -1) & (out <= 1))


def test_refinement_recovers_true_label_on_attacked_toy_points(toy_model, toy_test):
    attacked = pgd(toy_model, toy_test.inputs, toy_test.labels,
                   AttackConfig(0.95, 0.25, iterations=10, clamp=None, seed=5)).x_adv
    y = toy_test.labels
    before = predict(toy_model, attacked)[1][np.arange(len(y)), y]
    refined = refine_batch(toy_model, attacked, y, RefineConfig(0.6))
    after = predict(toy_model, refined)[1][np.arange(len(y)), y]
    assert np.mean(after > before) > 0.5


# ------------------------------------------------------- hypothesis probs


def test_zero_strength_probs_equal_softmax():
    params = _params()
    xs = np.random.default_rng(0).standard_normal((5, 2))
    cands, p = hypothesis_probs(params, xs, RefineConfig(0.0))
    np.testing.assert_allclose(p, predict(params, xs)[1], atol=1e-12)
    assert cands.tolist() == [[0, 1]] * 5


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 2), elements=st.floats(-4, 4)), st.floats(0, 2))
def test_probs_are_strictly_inside_unit_interval(xs, strength):
    _, p = hypothesis_probs(_params(seed=1), xs, RefineConfig(strength))
    assert np.all((p > 0) & (p < 1))


@pytest.mark.parametrize("seed", range(10))
def test_toy_probs_match_recomposition(seed):
    """Recompute each hypothesis with a finite-difference sign step and a numpy forward."""
    params = _params(seed=seed)
    x = np.random.default_rng(seed).standard_normal(2)
    lam = 0.4
    _, p = hypothesis_probs(params, x, RefineConfig(lam))
    for label in range(2):
        g = central_diff(lambda v: xent_ref(mlp_ref(params.tensors, v), label), x, 1e-6)
        refined = x - lam * np.sign(g)
        want = softmax_ref(mlp_ref(params.tensors, refined))[label]
        assert p[label] == pytest.approx(want, abs=1e-12)


# -------------------------------------------------------------- assignment


def test_assign_half_half():
    q, regret = pnml_assign([0.5, 0.5])
    assert q.tolist() == [0.5, 0.5] and regret == 0.0


def test_assign_all_ones():
    q, regret = pnml_assign(np.ones(10))
    np.testing.assert_allclose(q, 0.1)
    assert regret == pytest.approx(math.log(10))


@settings(max_examples=100)
@given(
    hnp.arrays(np.float64, st.integers(2, 10), elements=st.floats(1e-6, 1.0)),
    st.floats(1e-3, 1e3),
)
def test_assign_scale_invariance(p, c):
    q, regret = pnml_assign(p)
    q2, regret2 = pnml_assign(c * p)
    np.testing.assert_allclose(q2, q, rtol=1e-12)
    assert regret2 == pytest.approx(regret + math.log(c), abs=1e-9)
    assert q.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("bad", [[0.5, 0.0], [0.5, -0.1], [np.nan, 0.5]])
def test_assign_rejects_nonpositive(bad):
    with pytest.raises(ContractError):
        pnml_assign(bad)


def test_assign_rejects_empty():
    with pytest.raises(DimensionError):
        pnml_assign([])


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (4, 2), elements=st.floats(-3, 3)), st.floats(0.01, 1.5))
def test_batch_assignment_matches_direct_normalization(xs, strength):
    params = _params(seed=2)
    cfg = RefineConfig(strength)
    batch = pnml_predict_batch(params, xs, cfg)
    _, p = hypothesis_probs(params, xs, cfg)
    for i in range(4):
        q, regret = pnml_assign(p[i])
        np.testing.assert_allclose(batch.q[i], q, atol=1e-12)
        assert batch.regret[i] == pytest.approx(regret, abs=1e-12)
        assert batch.labels[i] == int(np.argmax(q))


# ---------------------------------------------------------------- predict


def test_zero_strength_predict_matches_base():
    params = _params(SMALL, 4)
    xs = np.random.default_rng(4).standard_normal((50, 2))
    labels, probs = predict(params, xs)
    for i in range(50):
        pred = pnml_predict(params, xs[i], RefineConfig(0.0))
        assert pred.label == labels[i]
        assert np.max(np.abs(pred.q - probs[i])) <= 1e-6
        assert pred.regret == pytest.approx(0.0, abs=1e-12)


def test_predict_rejects_batches():
    with pytest.raises(DimensionError):
        pnml_predict(_params(), np.zeros((2, 2)), RefineConfig(0.1))


def test_top_k_full_equals_all_labels():
    params = _params(SMALL, 5)
    xs = np.random.default_rng(5).standard_normal((20, 2))
    full = pnml_predict_batch(params, xs, RefineConfig(0.3))
    topk = pnml_predict_batch(params, xs, RefineConfig(0.3, top_k=3))
    assert full.q.tobytes() == topk.q.tobytes()
    assert full.regret.tobytes() == topk.regret.tobytes()


def test_top_k_restricts_support():
    params = _params(SMALL, 6)
    xs = np.random.default_rng(6).standard_normal((20, 2))
    out = pnml_predict_batch(params, xs, RefineConfig(0.3, top_k=2))
    base = predict(params, xs)[1]
    for i in range(20):
        want = sorted(np.argsort(-base[i], kind="stable")[:2].tolist())
        assert out.candidates[i].tolist() == want
        outside = np.setdiff1d(np.arange(3), want)
        assert not out.q[i, outside].any()
        assert out.q[i].sum() == pytest.approx(1.0)


def test_candidate_tie_break():
    probs = np.array([[0.25, 0.25, 0.25, 0.25]])
    assert candidate_labels(probs, 2).tolist() == [[0, 1]]


def test_chunking_does_not_change_results():
    params = _params(SMALL, 7)
    xs = np.random.default_rng(7).standard_normal((13, 2))
    a = pnml_predict_batch(params, xs, RefineConfig(0.2), chunk=4)
    b = pnml_predict_batch(params, xs, RefineConfig(0.2), chunk=64)
    np.testing.assert_allclose(a.q, b.q, atol=1e-12)


# -------------------------------------------------------------- end to end


@pytest.mark.parametrize("top_k", [None, 2])
def test_end_to_end_matches_predict(top_k):
    params = _params(SMALL, 8)
    xs = np.random.default_rng(8).standard_normal((10, 2))
    cfg = RefineConfig(0.3, top_k=top_k)
    log_q, cands = end_to_end_forward(EndToEndModel(params, cfg), T.tensor(xs, np.float64))
    batch = pnml_predict_batch(params, xs, cfg)
    np.testing.assert_allclose(np.exp(log_q.data), np.take_along_axis(batch.q, cands, 1), atol=1e-12)


def test_end_to_end_zero_strength_gradient_equals_plain_gradient():
    params = _params(SMALL, 9)
    xs = np.random.default_rng(9).standard_normal((6, 2))
    labels = np.array([0, 1, 2, 0, 1, 2])
    tape = T.Tape()
    xt = tape.watch(xs, "x", dtype=np.float64)
    rows, _ = end_to_end_loss(EndToEndModel(params, RefineConfig(0.0)), xt, labels, tape)
    g = T.backward(T.sum(rows), tape)["x"].data
    plain, _ = input_gradient(params, xs, labels)
    np.testing.assert_allclose(g, plain, atol=1e-12)


def test_label_outside_candidates_has_infinite_loss():
    params = _params(SMALL, 10)
    x = np.random.default_rng(10).standard_normal((1, 2))
    base = predict(params, x)[1][0]
    worst = int(np.argmin(base))
    _, values = end_to_end_loss(EndToEndModel(params, RefineConfig(0.1, top_k=1)), T.tensor(x, np.float64), [worst])
    assert values[0] == np.inf


@pytest.mark.parametrize("seed", range(10))
def test_bpda_gradient_matches_graph_surgery(seed):
    """Freeze each refinement as a constant offset from x and differentiate numerically."""
    params = _params(MLP, 20 + seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(2)
    y = int(rng.integers(2))
    model = EndToEndModel(params, RefineConfig(0.5))
    tape = T.Tape()
    xt = tape.watch(x[None], "x", dtype=np.float64)
    rows, _ = end_to_end_loss(model, xt, [y], tape)
    g = T.backward(T.sum(rows), tape)["x"].data[0]

    offsets = [refine(params, x, i, model.refine) - x for i in range(2)]

    def surgery(v):
        logp = [math.log(softmax_ref(mlp_ref(params.tensors, v + offsets[i]))[i]) for i in range(2)]
        lse = max(logp) + math.log(sum(math.exp(l - max(logp)) for l in logp))
        return -(logp[y] - lse)

    assert rel_err(g, central_diff(surgery, x, 1e-6)) <= 1e-6


@pytest.mark.slow
def test_bpda_gradients_are_finite_on_mnist(mnist_test):
    params = init_params(ModelSpec.mnist_convnet(), 0)
    model = EndToEndModel(params, RefineConfig(0.1, clamp=(0.0, 1.0)))
    for start in range(0, 1000, 50):
        xb = mnist_test.inputs[start : start + 50]
        tape = T.Tape()
        xt = tape.watch(xb, "x")
        rows, _ = end_to_end_loss(model, xt, mnist_test.labels[start : start + 50], tape)
        g = T.backward(T.sum(rows), tape)["x"].data
        assert np.all(np.isfinite(g))
