import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbgc.gradclip import (
    AggregatedGradient, AlignmentError, ClipConfig, ClipMode, TaskGradient, VanillaSemantics,
    ZeroBackboneGradient, ZeroGradientWarning, aggregate, backbone_grad_norm, clip_task, clip_total,
    grad_norm, tbgc_clip, tbgc_star_clip, vanilla_clip,
)
from tbgc.mtmodel import BACKBONE, ParamStore, head

from conftest import random_partitioned


def two_part_store():
    store = ParamStore()
    store.add("bb", np.zeros(2), BACKBONE)
    store.add("hd", np.zeros(1), head("det"))
    return store


LIT = ClipConfig(max_norm=0.1, vanilla="literal")
CLAMP = ClipConfig(max_norm=0.1, vanilla="clamped")


# ------------------------------------------------------------------ norms


def test_grad_norm_examples(rng):
    assert grad_norm({"a": np.array([3.0]), "b": np.array([4.0])}) == 5.0
    assert grad_norm({"a": np.zeros((2, 2))}) == 0.0
    g = {f"p{i}": rng.normal(size=(i + 1, 2)) for i in range(4)}
    flat = np.concatenate([v.ravel() for v in g.values()])
    assert grad_norm(g) == pytest.approx(math.sqrt(sum(x * x for x in flat)), rel=1e-14)


def test_backbone_norm_ignores_heads():
    store = two_part_store()
    assert backbone_grad_norm({"bb": np.array([3.0, 4.0]), "hd": np.array([100.0])}, store) == 5.0
    assert backbone_grad_norm({"bb": np.zeros(2), "hd": np.array([7.0])}, store) == 0.0
    all_bb = ParamStore()
    all_bb.add("a", np.zeros(3), BACKBONE)
    all_bb.add("b", np.zeros(2), BACKBONE)
    g = {"a": np.array([1.0, 2.0, 3.0]), "b": np.array([-1.0, 0.5])}
    assert backbone_grad_norm(g, all_bb) == grad_norm(g)


def test_alignment_errors():
    store = two_part_store()
    with pytest.raises(AlignmentError):
        backbone_grad_norm({"nope": np.ones(2)}, store)
    with pytest.raises(AlignmentError):
        backbone_grad_norm({"bb": np.ones(3)}, store)


# ---------------------------------------------------------------- vanilla


def test_vanilla_examples():
    np.testing.assert_allclose(vanilla_clip({"g": np.array([3.0, 4.0])}, LIT)["g"], [0.06, 0.08], rtol=1e-15)
    small = {"g": np.array([0.03, 0.04])}
    np.testing.assert_array_equal(vanilla_clip(small, CLAMP)["g"], small["g"])
    # literal scales up as well
    np.testing.assert_allclose(vanilla_clip(small, LIT)["g"], [0.06, 0.08], rtol=1e-14)
    exact = {"g": np.array([0.06, 0.08])}
    for cfg in (LIT, CLAMP):
        np.testing.assert_allclose(vanilla_clip(exact, cfg)["g"], exact["g"], rtol=1e-15)


def test_vanilla_zero_gradient_warns_and_skips():
    with pytest.warns(ZeroGradientWarning):
        out = vanilla_clip({"g": np.zeros(3)}, LIT)
    np.testing.assert_array_equal(out["g"], np.zeros(3))


# ------------------------------------------------------------------- TBGC


def test_tbgc_hand_example():
    store = two_part_store()
    g = TaskGradient("det", {"bb": np.array([3.0, 4.0]), "hd": np.array([12.0])})
    out = tbgc_clip(g, store, LIT)
    # g1 = g/13 has backbone norm 5/13; factor 0.1/(5/13) = 0.26; net 0.02
    np.testing.assert_allclose(out.grads["bb"], [0.06, 0.08], rtol=1e-14)
    np.testing.assert_allclose(out.grads["hd"], [0.24], rtol=1e-14)
    assert out.task == "det"


def test_tbgc_fixed_point():
    store = two_part_store()
    g = TaskGradient("det", {"bb": np.array([0.06, 0.08]), "hd": np.array([5.0])})
    out = tbgc_clip(g, store, LIT)
    np.testing.assert_allclose(out.grads["bb"], g.grads["bb"], rtol=1e-15)
    np.testing.assert_allclose(out.grads["hd"], g.grads["hd"], rtol=1e-15)


def test_tbgc_zero_backbone_raises():
    store = two_part_store()
    with pytest.raises(ZeroBackboneGradient) as exc:
        tbgc_clip(TaskGradient("det", {"bb": np.zeros(2), "hd": np.ones(1)}), store, LIT)
    assert exc.value.task == "det"


def test_tbgc_star_examples():
    g = TaskGradient("det", {"bb": np.array([3.0, 4.0]), "hd": np.array([12.0])})
    out = tbgc_star_clip(g, LIT)
    np.testing.assert_allclose(out.grads["bb"], [0.3 / 13, 0.4 / 13], rtol=1e-15)
    np.testing.assert_allclose(out.grads["hd"], [1.2 / 13], rtol=1e-15)
    exact = TaskGradient("x", {"bb": np.array([0.06, 0.08])})
    np.testing.assert_allclose(tbgc_star_clip(exact, LIT).grads["bb"], exact.grads["bb"], rtol=1e-15)


def test_tbgc_star_leaves_backbone_bias():
    store = two_part_store()
    # equal full norms (5), different backbone shares
    a = TaskGradient("a", {"bb": np.array([3.0, 4.0]), "hd": np.array([0.0])})
    b = TaskGradient("b", {"bb": np.array([0.0, 3.0]), "hd": np.array([4.0])})
    sa, sb = tbgc_star_clip(a, LIT), tbgc_star_clip(b, LIT)
    assert grad_norm(sa) == pytest.approx(grad_norm(sb), rel=1e-15)
    assert backbone_grad_norm(sa, store) != pytest.approx(backbone_grad_norm(sb, store), rel=1e-3)
    ta, tb = tbgc_clip(a, store, LIT), tbgc_clip(b, store, LIT)
    assert backbone_grad_norm(ta, store) == pytest.approx(backbone_grad_norm(tb, store), rel=1e-14)


# -------------------------------------------------------------- properties


@st.composite
def triples(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    s = draw(st.floats(1e-4, 1e3))
    rng = np.random.default_rng(seed)
    store, grads = random_partitioned(rng)
    return store, TaskGradient("t", grads), s


@settings(max_examples=200, deadline=None)
@given(triples())
def test_tbgc_exact_norm_and_collapse(t):
    store, g, s = t
    cfg = ClipConfig(max_norm=s)
    out = tbgc_clip(g, store, cfg)
    assert abs(backbone_grad_norm(out, store) - s) / s < 1e-10
    factor = s / backbone_grad_norm(g, store)
    for k in g.grads:
        np.testing.assert_allclose(out.grads[k], g.grads[k] * factor, rtol=1e-12, atol=0)


@settings(max_examples=100, deadline=None)
@given(triples(), st.sampled_from([1e-6, 1e-3, 1.0, 7.5, 1e6]))
def test_tbgc_positive_scale_invariance(t, c):
    store, g, s = t
    cfg = ClipConfig(max_norm=s)
    a = tbgc_clip(g, store, cfg)
    b = tbgc_clip(g.scaled(c), store, cfg)
    for k in g.grads:
        np.testing.assert_allclose(b.grads[k], a.grads[k], rtol=1e-10, atol=0)


@settings(max_examples=100, deadline=None)
@given(triples())
def test_vanilla_literal_norm_and_clamped_cap(t):
    _, g, s = t
    lit = vanilla_clip(g, ClipConfig(max_norm=s, vanilla="literal"))
    assert grad_norm(lit) == pytest.approx(s, rel=1e-12)
    cl = vanilla_clip(g, ClipConfig(max_norm=s, vanilla="clamped"))
    assert grad_norm(cl) <= s * (1 + 1e-12) or grad_norm(cl) == pytest.approx(grad_norm(g), rel=1e-15)


# ------------------------------------------------------------ aggregation


def test_aggregate_examples(rng):
    store, grads = random_partitioned(rng, 2, 2)
    one = aggregate([TaskGradient("a", grads)], store)
    for k in store:
        np.testing.assert_array_equal(one.grads[k], grads[k])
    cancel = aggregate([TaskGradient("a", grads), TaskGradient("b", {k: -v for k, v in grads.items()})], store)
    assert all(not v.any() for v in cancel.grads.values())
    parts = [{k: rng.normal(size=v.shape) for k, v in grads.items() if rng.uniform() < 0.7} for _ in range(3)]
    total = aggregate([TaskGradient(str(i), p) for i, p in enumerate(parts)], store)
    flat = np.zeros(sum(v.size for v in grads.values()))
    for p in parts:
        flat += np.concatenate([p.get(k, np.zeros_like(grads[k])).ravel() for k in store])
    np.testing.assert_allclose(np.concatenate([total.grads[k].ravel() for k in store]), flat, rtol=1e-15)


def test_clip_dispatch():
    store = two_part_store()
    g = TaskGradient("det", {"bb": np.array([3.0, 4.0]), "hd": np.array([12.0])})
    assert clip_task(g, store, ClipConfig(mode="vanilla")) is g
    np.testing.assert_allclose(clip_task(g, store, ClipConfig(mode="tbgc")).grads["bb"], [0.06, 0.08])
    total = AggregatedGradient({"bb": np.array([3.0, 4.0]), "hd": np.array([0.0])})
    out, factor = clip_total(total, ClipConfig(mode="vanilla"))
    assert factor == pytest.approx(0.02) and grad_norm(out) == pytest.approx(0.1)
    same, one = clip_total(total, ClipConfig(mode="tbgc"))
    assert same is total and one == 1.0


def test_clip_config_validation():
    assert ClipConfig(mode="tbgc_star").mode is ClipMode.TBGC_STAR
    assert ClipConfig(vanilla="clamped").vanilla is VanillaSemantics.CLAMPED
    for bad in ({"max_norm": 0.0}, {"eps": -1.0}, {"mode": "other"}):
        with pytest.raises(ValueError):
            ClipConfig(**bad)


def test_no_warning_on_regular_gradients():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        vanilla_clip({"g": np.ones(3)}, LIT)
