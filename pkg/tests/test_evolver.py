import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egzsl.evolver import (
    AblationFlags,
    ClassConfidence,
    EvolverConfig,
    data_mask,
    erm_step,
    evolve_step,
    init_state,
    pseudo_label_batch,
    select_classes,
    update_confidence,
)
from egzsl.model import CompatibilityModel, clone_model

from .oracle import reference_stage


def make_state(rng, n_cls=3, d=4, **cfg):
    model = CompatibilityModel(rng.standard_normal((n_cls, d)))
    return init_state(model, EvolverConfig(**cfg))


def test_config_defaults():
    cfg = EvolverConfig()
    assert (cfg.lam, cfg.tau, cfg.m1, cfg.m2, cfg.learning_rate, cfg.epochs_per_stage) == (
        1.0, 0.5, 0.99, 0.9, 5e-5, 1)


@pytest.mark.parametrize("kwargs", [dict(tau=0.0), dict(tau=1.5), dict(m1=1.0), dict(m2=-0.1), dict(lam=-1.0)])
def test_config_ranges(kwargs):
    with pytest.raises(ValueError):
        EvolverConfig(**kwargs)


def test_flags_exclusive():
    with pytest.raises(ValueError):
        AblationFlags(disable_data_selection=True, fixed_threshold=True)


def test_pseudo_label_examples(rng):
    labels, probs = pseudo_label_batch(CompatibilityModel(np.eye(3)), np.eye(3)[[2, 0, 1]])
    assert labels.tolist() == [2, 0, 1]
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    labels, probs = pseudo_label_batch(CompatibilityModel(np.eye(3)), [[0.0, 1.0, 0.0]])
    assert labels.shape == (1,) and probs.shape == (1, 3)

    W = rng.standard_normal((5, 6))
    X = rng.standard_normal((10, 6))
    labels, _ = pseudo_label_batch(CompatibilityModel(W), X)
    for i, x in enumerate(X):
        dots = [sum(W[y, j] * x[j] for j in range(6)) for y in range(5)]
        assert labels[i] == dots.index(max(dots))


def test_pseudo_label_empty_batch():
    with pytest.raises(ValueError):
        pseudo_label_batch(CompatibilityModel(np.eye(2)), np.zeros((0, 2)))


def test_select_classes_examples(rng):
    assert select_classes([3, 1, 3, 1]).tolist() == [1, 3]
    assert select_classes([2, 2, 2]).tolist() == [2]
    labels = rng.integers(0, 6, size=100)
    seen = []
    for v in labels.tolist():
        if v not in seen:
            seen.append(v)
    assert select_classes(labels).tolist() == sorted(seen)


def test_update_confidence_substitution():
    conf = ClassConfidence(np.array([0.5, 1.0]), np.zeros(2, dtype=bool))
    probs = np.array([[0.7, 0.3], [0.7, 0.3]])
    out = update_confidence(conf, [0, 0], probs, 0.9)
    assert out.delta_ema[0] == pytest.approx(0.52, abs=1e-15)
    assert out.delta_ema[1] == 1.0
    assert out.initialized.tolist() == [True, False]


def test_update_confidence_matches_loop(rng):
    probs = rng.dirichlet(np.ones(3), size=30)
    labels = probs.argmax(axis=1)
    start = rng.uniform(0.2, 1.0, size=4)
    out = update_confidence(ClassConfidence(start.copy(), np.zeros(4, dtype=bool)), labels, probs, 0.8)
    for y in range(4):
        members = [probs[i, y] for i in range(30) if labels[i] == y]
        if members:
            expect = 0.8 * start[y] + 0.2 * (sum(members) / len(members))
            assert out.delta_ema[y] == pytest.approx(expect, rel=1e-14)
        else:
            assert out.delta_ema[y] == start[y]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.999))
def test_confidence_stays_in_unit_interval(seed, m2):
    r = np.random.default_rng(seed)
    conf = ClassConfidence.fresh(5)
    for _ in range(5):
        probs = r.dirichlet(np.full(5, 0.3), size=int(r.integers(1, 20)))
        conf = update_confidence(conf, probs.argmax(axis=1), probs, m2)
        assert np.all(conf.delta_ema > 0) and np.all(conf.delta_ema <= 1)


def test_data_mask_examples():
    probs = np.array([[0.6, 0.4], [0.4, 0.6]])
    assert data_mask([0], probs[:1], [0.9, 1.0], 0.5).tolist() == [1.0]
    assert data_mask([1], np.array([[0.6, 0.4]]), [1.0, 0.9], 0.5).tolist() == [0.0]
    r = np.random.default_rng(0).dirichlet(np.ones(4), size=50)
    assert data_mask(r.argmax(1), r, np.ones(4), 1e-12).all()
    assert data_mask([0, 1], probs, None, 0.5, fixed_threshold=0.55).tolist() == [1.0, 1.0]


def test_init_state(rng):
    state = make_state(rng)
    assert np.array_equal(state.ema.W, state.current.W)
    assert state.ema.W is not state.current.W
    assert np.all(state.confidence.delta_ema == 1.0)
    assert state.time_step == 0


def test_first_stage_mask_is_fixed_tau_rule(rng):
    state = make_state(rng, m2=0.0)
    X = rng.standard_normal((20, 4))
    labels, probs = pseudo_label_batch(state.current, X)
    # with m2 = 0 the post-update delta is the batch mean; use the pre-update (all ones) timing
    state = init_state(state.current, EvolverConfig(threshold_timing="pre"))
    outcome, _ = evolve_step(state, X)
    assert outcome.mask.tolist() == (probs.max(axis=1) > 0.5).astype(float).tolist()


def _partial_mask_instance():
    # first seed whose reference stage keeps some but not all samples
    for seed in range(100):
        r = np.random.default_rng(seed)
        W = r.standard_normal((3, 4))
        E = W + 0.3 * r.standard_normal((3, 4))
        X = 1.5 * r.standard_normal((5, 4))
        delta = np.array([0.9, 0.6, 0.8])
        ref = reference_stage(W.tolist(), E.tolist(), delta.tolist(), X.tolist(),
                              0.7, 0.9, 0.9, 0.8, 0.01)
        if 0 < sum(ref["mask"]) < 5:
            return W, E, X, delta, ref
    raise AssertionError("no partial-mask instance found")


def test_step_matches_straight_line_reference():
    W, E, X, delta, ref = _partial_mask_instance()
    cfg = EvolverConfig(lam=0.7, tau=0.9, m1=0.9, m2=0.8, learning_rate=0.01)
    state = init_state(CompatibilityModel(W), cfg)
    state.ema = CompatibilityModel(E)
    state.confidence = ClassConfidence(delta.copy(), np.zeros(3, dtype=bool))

    outcome, state = evolve_step(state, X)
    assert outcome.predictions.tolist() == ref["labels"]
    assert outcome.selected_classes.tolist() == ref["selected"]
    assert outcome.mask.tolist() == ref["mask"]
    np.testing.assert_allclose(state.confidence.delta_ema, ref["delta"], atol=1e-15)
    np.testing.assert_allclose(state.current.W, ref["W"], rtol=0, atol=1e-10)
    np.testing.assert_allclose(state.ema.W, ref["W_ema"], rtol=0, atol=1e-10)


def test_predictions_come_from_pre_step_model(rng):
    state = make_state(rng, n_cls=5, d=6, learning_rate=0.05)
    for _ in range(10):
        X = rng.standard_normal((8, 6))
        before = clone_model(state.current)
        outcome, state = evolve_step(state, X)
        replay, _ = pseudo_label_batch(before, X)
        assert np.array_equal(outcome.predictions, replay)
        assert np.array_equal(outcome.pseudo_labels, outcome.predictions)


def test_lambda_zero_leaves_unselected_rows(rng):
    state = make_state(rng, n_cls=6, d=5, lam=0.0, learning_rate=0.05, tau=0.1)
    for _ in range(20):
        X = rng.standard_normal((4, 5))
        before = state.current.W.copy()
        outcome, state = evolve_step(state, X)
        untouched = np.setdiff1d(np.arange(6), outcome.selected_classes)
        assert np.array_equal(state.current.W[untouched], before[untouched])


def test_zero_mask_skips_update_but_moves_ema(rng):
    cfg = EvolverConfig(m1=0.5)
    state = init_state(CompatibilityModel(np.zeros((3, 2))), cfg)
    state.ema = CompatibilityModel(np.ones((3, 2)))
    # all-zero weights: every probability is 1/3, below 1.0 * 0.5 ... so raise tau
    state.config = EvolverConfig(m1=0.5, tau=1.0)
    outcome, state = evolve_step(state, np.ones((4, 2)))
    assert not outcome.mask.any()
    assert outcome.total == outcome.ce_sel == outcome.kl == 0.0
    assert np.array_equal(state.current.W, np.zeros((3, 2)))
    assert np.array_equal(state.ema.W, np.full((3, 2), 0.5))
    assert state.adam.step_count == 0
    assert state.time_step == 1


def test_ema_closed_form_with_frozen_weights(rng):
    m1 = 0.9
    W = rng.standard_normal((3, 4))
    E0 = rng.standard_normal((3, 4))
    state = init_state(CompatibilityModel(W), EvolverConfig(m1=m1, learning_rate=0.0))
    state.ema = CompatibilityModel(E0)
    gaps = []
    for k in range(1, 31):
        _, state = evolve_step(state, rng.standard_normal((5, 4)))
        closed = m1**k * E0 + (1 - m1) * sum(m1 ** (k - j) * W for j in range(1, k + 1))
        np.testing.assert_allclose(state.ema.W, closed, rtol=0, atol=1e-12)
        gaps.append(np.linalg.norm(state.ema.W - W))
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    np.testing.assert_allclose(ratios, m1, rtol=1e-8)
    assert np.array_equal(state.current.W, W)


def test_erm_flags_match_standalone_erm(rng):
    W = rng.standard_normal((4, 5))
    a = init_state(CompatibilityModel(W), EvolverConfig(learning_rate=0.02), AblationFlags.erm())
    b = init_state(CompatibilityModel(W), EvolverConfig(learning_rate=0.02), AblationFlags.erm())
    for _ in range(15):
        X = rng.standard_normal((7, 5))
        oa, a = evolve_step(a, X)
        ob, b = erm_step(b, X)
        assert np.array_equal(oa.predictions, ob.predictions)
        assert oa.ce_sel == ob.ce_sel
        assert np.array_equal(a.current.W, b.current.W)


def test_ablation_semantics(rng):
    W = rng.standard_normal((4, 3))
    X = rng.standard_normal((6, 3))
    no_mom = init_state(CompatibilityModel(W), EvolverConfig(learning_rate=0.1),
                        AblationFlags(disable_momentum_model=True))
    outcome, no_mom = evolve_step(no_mom, X)
    assert outcome.kl == 0.0
    assert np.array_equal(no_mom.ema.W, no_mom.current.W)

    no_data = init_state(CompatibilityModel(W), EvolverConfig(), AblationFlags(disable_data_selection=True))
    outcome, _ = evolve_step(no_data, X)
    assert outcome.mask.all()

    fixed = init_state(CompatibilityModel(W), EvolverConfig(), AblationFlags(fixed_threshold=True))
    outcome, _ = evolve_step(fixed, X)
    _, probs = pseudo_label_batch(CompatibilityModel(W), X)
    assert outcome.mask.tolist() == (probs.max(axis=1) > 0.8).astype(float).tolist()


def test_no_class_selection_touches_all_rows(rng):
    W = rng.standard_normal((6, 3))
    X = np.tile(W[0], (3, 1))
    state = init_state(CompatibilityModel(W), EvolverConfig(lam=0.0, learning_rate=0.1, tau=0.01),
                       AblationFlags(disable_class_selection=True))
    outcome, state = evolve_step(state, X)
    assert outcome.selected_classes.size == 1
    assert np.all(np.any(state.current.W != W, axis=1))


def test_threshold_timing_pre_uses_carried_confidence(rng):
    W = rng.standard_normal((3, 4))
    X = rng.standard_normal((10, 4))
    state = init_state(CompatibilityModel(W), EvolverConfig(threshold_timing="pre", tau=0.9))
    state.confidence = ClassConfidence(np.full(3, 0.2), np.zeros(3, dtype=bool))
    outcome, _ = evolve_step(state, X)
    _, probs = pseudo_label_batch(CompatibilityModel(W), X)
    assert outcome.mask.tolist() == (probs.max(axis=1) > 0.18).astype(float).tolist()


def test_multiple_epochs_take_multiple_steps(rng):
    state = make_state(rng, epochs_per_stage=3, tau=0.01)
    evolve_step(state, rng.standard_normal((5, 4)))
    assert state.adam.step_count == 3


def test_evolve_deterministic(rng):
    W = rng.standard_normal((5, 6))
    batches = [rng.standard_normal((10, 6)) for _ in range(12)]

    def run():
        s = init_state(CompatibilityModel(W), EvolverConfig(learning_rate=0.01))
        for b in batches:
            _, s = evolve_step(s, b)
        return s

    assert np.array_equal(run().current.W, run().current.W)


def test_empty_batch_rejected(rng):
    with pytest.raises(ValueError):
        evolve_step(make_state(rng), np.zeros((0, 4)))
