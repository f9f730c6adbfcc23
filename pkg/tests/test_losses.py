import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sraa import tensor as T
from sraa.errors import (
    ConfigError,
    DuplicateClassError,
    EmptyClassError,
    LabelError,
    NumericError,
    ShapeError,
)
from sraa.losses import (
    IMPRINTED,
    ClassMask,
    PrototypeSet,
    affinity_ce,
    affinity_map,
    concat_affinities,
    downsample_labels,
    entropy,
    kd_loss,
    labels_to_index,
    pool_class_means,
    prototype_segment,
    relation_alignment_loss,
    segmentation_ce,
)
from sraa.tensor import Tensor


def cos(u, v):
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


# ---- pooling ----

def test_pool_constant_map():
    feats = Tensor(np.tile([1.5, -2.0, 0.25], (2, 3, 3, 1)))
    labels = np.array([[[0, 1, 1]] * 3, [[2, 2, 0]] * 3])
    rows = pool_class_means(feats, ClassMask.from_labels(labels, [0, 1, 2])).data
    assert np.all(rows == [1.5, -2.0, 0.25])


def test_pool_two_pixel_example():
    feats = np.zeros((1, 2, 2, 2))
    feats[0, 0, 0] = [1, 0]
    feats[0, 1, 1] = [3, 0]
    mask = np.zeros((1, 2, 2, 1))
    mask[0, 0, 0, 0] = mask[0, 1, 1, 0] = 1
    out = pool_class_means(Tensor(feats), ClassMask(mask, [7])).data
    assert out.tolist() == [[2.0, 0.0]]


def test_pool_full_mask_is_spatial_mean(rng):
    feats = rng.standard_normal((2, 3, 4, 5))
    out = pool_class_means(Tensor(feats), ClassMask.from_labels(np.zeros((2, 3, 4), int), [0])).data
    np.testing.assert_allclose(out[0], feats.mean(axis=(0, 1, 2)), atol=1e-15)


def test_pool_empty_class():
    labels = np.zeros((1, 2, 2), int)
    with pytest.raises(EmptyClassError) as info:
        pool_class_means(Tensor(np.ones((1, 2, 2, 3))), ClassMask.from_labels(labels, [0, 4]))
    assert info.value.class_id == 4


@given(arrays(np.int64, (2, 3, 3, 2), elements=st.integers(-100, 100)),
       arrays(np.int64, (2, 3, 3), elements=st.integers(0, 2)))
def test_pool_integer_inputs_match_scalar_accumulation_bitwise(feats, labels):
    classes = sorted(set(labels.ravel().tolist()))
    got = pool_class_means(Tensor(feats.astype(float)), ClassMask.from_labels(labels, classes)).data
    for r, c in enumerate(classes):
        acc, n = [0.0, 0.0], 0
        for idx in np.ndindex(labels.shape):
            if labels[idx] == c:
                n += 1
                acc[0] += float(feats[idx][0])
                acc[1] += float(feats[idx][1])
        assert got[r].tolist() == [acc[0] / n, acc[1] / n]


def test_class_mask_validation():
    with pytest.raises(ValueError):
        ClassMask(np.full((1, 1, 1, 2), 1.0), [0, 1])  # overlapping
    with pytest.raises(ValueError):
        ClassMask(np.full((1, 1, 1, 1), 0.5), [0])
    m = ClassMask.from_labels(np.array([[[0, 3], [3, 3]]]), [0, 3, 5])
    assert m.counts().tolist() == [1, 3, 0] and m.present() == [0, 3]


# ---- relation alignment ----

def double_loop(g, s):
    c = len(g)
    gn = [r / np.linalg.norm(r) for r in g]
    sn = [r / np.linalg.norm(r) for r in s]
    paired = sum(float(gn[i] @ sn[i]) for i in range(c)) / c
    unpaired = sum(float(gn[i] @ sn[j]) for i in range(c) for j in range(c) if i != j) / (c * (c - 1))
    return unpaired - paired


def test_alignment_identity():
    assert relation_alignment_loss(Tensor(np.eye(2)), np.eye(2)).item() == pytest.approx(-1.0, abs=1e-15)


def test_alignment_orthogonal_blocks():
    g = np.array([[1.0, 2, 0, 0], [0.5, -1, 0, 0]])
    s = np.array([[0, 0, 1.0, 0], [0, 0, 0.3, 0.7]])
    assert relation_alignment_loss(Tensor(g), s).item() == 0.0


def test_alignment_collapsed_rows():
    s = np.eye(2)
    g = np.array([[1.0, 0.0], [1.0, 0.0]])
    got = relation_alignment_loss(Tensor(g), s).item()
    assert got == pytest.approx(double_loop(g, s), abs=1e-15)
    assert got == pytest.approx(0.0, abs=1e-15)


def test_alignment_needs_two_classes():
    with pytest.raises(ConfigError):
        relation_alignment_loss(Tensor([[1.0, 0.0]]), [[1.0, 0.0]])


@given(st.integers(2, 5), st.integers(2, 5), st.integers(0, 2 ** 31))
def test_alignment_bounded_and_matches_loop(c, d, seed):
    r = np.random.default_rng(seed)
    g, s = r.standard_normal((c, d)), r.standard_normal((c, d))
    v = relation_alignment_loss(Tensor(g), s).item()
    assert -2 <= v <= 2
    assert v == pytest.approx(double_loop(g, s), abs=1e-12)


@given(st.floats(0.05, 1.5), st.floats(0.05, 1.5))
def test_alignment_sign_of_paired_and_unpaired_terms(a, b):
    # s = e1, e2; g1 leans on e1 (paired) or on e2 (unpaired); the rest lives in e3
    s = np.eye(4)[:2]
    g2 = np.array([0.0, 0.0, 0.0, 1.0])

    def loss_with(g1):
        return relation_alignment_loss(Tensor(np.stack([g1, g2])), s).item()

    lo, hi = sorted((a, b))
    if hi - lo < 1e-6:
        return
    paired = [loss_with(np.array([math.cos(t), 0, math.sin(t), 0])) for t in (hi, lo)]
    assert paired[1] < paired[0]   # larger paired dot, lower loss
    unpaired = [loss_with(np.array([0, math.cos(t), math.sin(t), 0])) for t in (hi, lo)]
    assert unpaired[1] > unpaired[0]  # larger unpaired dot, higher loss


def test_alignment_gradient_only_to_g(rng):
    g = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    s = Tensor(rng.standard_normal((3, 4)))
    T.backward(relation_alignment_loss(g, s))
    assert g.grad is not None and s.grad is None


# ---- prototype classifier and affinities ----

def test_single_prototype_gives_certainty(rng):
    p = prototype_segment(Tensor(rng.standard_normal((1, 2, 2, 3))), np.ones((1, 3)), 10.0).data
    assert np.all(p == 1.0)


def test_equidistant_pixel_splits_evenly():
    feats = Tensor(np.array([1.0, 1.0, 0.0]).reshape(1, 1, 1, 3))
    p = prototype_segment(feats, np.array([[1.0, 0, 0], [0, 1.0, 0]]), 10.0).data
    np.testing.assert_allclose(p.ravel(), [0.5, 0.5], atol=1e-15)


def test_prototype_segment_random_oracle(rng):
    feats, protos = rng.standard_normal((1, 2, 2, 4)), rng.standard_normal((3, 4))
    got = prototype_segment(Tensor(feats), protos, 10.0).data
    for i in range(2):
        for j in range(2):
            e = [math.exp(10 * cos(feats[0, i, j], p)) for p in protos]
            np.testing.assert_allclose(got[0, i, j], [v / sum(e) for v in e], rtol=0, atol=1e-10)


def test_prototype_segment_accepts_prototype_set(rng):
    protos = PrototypeSet([0, 4, 2], rng.standard_normal((3, 4)))
    feats = Tensor(rng.standard_normal((1, 2, 2, 4)))
    assert np.array_equal(prototype_segment(feats, protos).data, prototype_segment(feats, protos.vectors).data)


@settings(max_examples=30)
@given(st.permutations(range(4)), st.integers(0, 2 ** 31))
def test_prototype_permutation_permutes_channels(perm, seed):
    r = np.random.default_rng(seed)
    feats, protos = Tensor(r.standard_normal((1, 2, 3, 5))), r.standard_normal((4, 5))
    a = prototype_segment(feats, protos).data
    b = prototype_segment(feats, protos[list(perm)]).data
    np.testing.assert_allclose(b, a[..., list(perm)], rtol=0, atol=1e-15)


def test_zero_pixel_feature_rejected():
    with pytest.raises(NumericError):
        prototype_segment(Tensor(np.zeros((1, 1, 1, 2))), np.ones((1, 2)))
    with pytest.raises(ConfigError):
        prototype_segment(Tensor(np.ones((1, 1, 1, 2))), np.ones((1, 2)), temperature=0)


def test_affinity_examples(rng):
    feats = rng.standard_normal((1, 2, 2, 3))
    feats[0, 0, 0] = [0.0, 2.0, 1.0]
    aff = affinity_map(Tensor(feats), np.array([[0.0, 2.0, 1.0]])).data
    assert aff[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-15)
    flat = np.zeros((1, 2, 2, 3))
    flat[..., :2] = rng.standard_normal((1, 2, 2, 2))
    assert np.all(affinity_map(Tensor(flat), np.array([[0.0, 0.0, 1.0]])).data == 0.0)


def test_affinity_random_oracle_and_range(rng):
    feats, protos = rng.standard_normal((2, 2, 3, 4)), rng.standard_normal((3, 4))
    aff = affinity_map(Tensor(feats), protos).data
    for idx in np.ndindex(2, 2, 3):
        np.testing.assert_allclose(aff[idx], [cos(feats[idx], p) for p in protos], rtol=0, atol=1e-12)
    assert np.all(np.abs(aff) <= 1 + 1e-12)


def test_affinity_gradient_reaches_both(rng):
    f = Tensor(rng.standard_normal((1, 2, 2, 3)), requires_grad=True)
    p = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    T.backward(T.sum(affinity_map(f, p)))
    assert f.grad is not None and p.grad is not None


# ---- cross-entropies ----

def test_ce_perfect_and_uniform():
    probs = np.zeros((1, 2, 2, 3))
    labels = np.array([[[0, 2], [1, 1]]])
    for idx in np.ndindex(1, 2, 2):
        probs[idx + (labels[idx],)] = 1.0
    assert segmentation_ce(Tensor(probs), labels).item() == 0.0
    uni = np.full((1, 2, 2, 3), 1 / 3)
    assert segmentation_ce(Tensor(uni), labels).item() == pytest.approx(math.log(3), abs=1e-15)


def test_ce_mixed_oracle(rng):
    probs = rng.uniform(0.1, 1, (2, 2, 2, 4))
    probs /= probs.sum(-1, keepdims=True)
    labels = rng.integers(0, 4, (2, 2, 2))
    ref = -np.mean([math.log(probs[idx][labels[idx]]) for idx in np.ndindex(labels.shape)])
    assert segmentation_ce(Tensor(probs), labels).item() == pytest.approx(ref, abs=1e-14)


def test_ce_label_out_of_range():
    with pytest.raises(LabelError):
        segmentation_ce(Tensor(np.full((1, 1, 1, 2), 0.5)), np.array([[[2]]]))


def test_concat_affinities():
    old, new = Tensor(np.ones((1, 2, 2, 2))), Tensor(np.full((1, 2, 2, 3), 2.0))
    c = concat_affinities(old, new).data
    assert c.shape == (1, 2, 2, 5)
    assert np.array_equal(c[..., :2], old.data) and np.array_equal(c[..., 2:], new.data)
    with pytest.raises(ConfigError):
        concat_affinities(old, Tensor(np.ones((1, 2, 2, 0))))
    with pytest.raises(ShapeError):
        concat_affinities(old, Tensor(np.ones((1, 2, 3, 1))))


def test_affinity_ce_saturation_and_uniform():
    aff = -np.ones((1, 2, 2, 3))
    labels = np.array([[[0, 1], [2, 0]]])
    for idx in np.ndindex(1, 2, 2):
        aff[idx + (labels[idx],)] = 1.0
    assert affinity_ce(Tensor(aff), labels, 50.0).item() < 1e-40
    assert affinity_ce(Tensor(np.full((1, 2, 2, 3), 0.3)), labels, 10.0).item() == pytest.approx(math.log(3), abs=1e-14)


@given(arrays(np.float64, (1, 2, 2, 3), elements=st.floats(-1, 1)), st.floats(0.1, 30))
def test_affinity_ce_shares_segmentation_path(aff, tau):
    labels = np.array([[[0, 1], [2, 1]]])
    a = affinity_ce(Tensor(aff), labels, tau).item()
    b = segmentation_ce(T.softmax(T.mul(Tensor(aff), tau), axis=-1), labels).item()
    assert abs(a - b) <= 1e-12


def test_kd_uniform_entropy_floor():
    x = np.zeros((1, 2, 2, 4))
    assert kd_loss(Tensor(x), x, 10.0).item() == pytest.approx(math.log(4), abs=1e-14)


@given(arrays(np.float64, (1, 2, 2, 3), elements=st.floats(-1, 1)), st.floats(0.5, 20))
def test_kd_self_equals_entropy_and_is_stationary(x, tau):
    s = Tensor(x, requires_grad=True)
    loss = kd_loss(s, x, tau)
    assert abs(loss.item() - entropy(x, tau)) <= 1e-10
    T.backward(loss)
    assert np.max(np.abs(s.grad)) <= 1e-10


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31))
def test_kd_gibbs_inequality(seed):
    r = np.random.default_rng(seed)
    t = r.uniform(-1, 1, (1, 2, 2, 3))
    s = t + r.normal(0, 0.3, t.shape)
    assert kd_loss(Tensor(s), t, 10.0).item() > entropy(t, 10.0)


def test_kd_truncates_student(rng):
    t = rng.uniform(-1, 1, (1, 2, 2, 3))
    extra = np.concatenate([t, rng.uniform(-1, 1, (1, 2, 2, 2))], axis=-1)
    assert kd_loss(Tensor(extra), t).item() == kd_loss(Tensor(t), t).item()
    with pytest.raises(ShapeError):
        kd_loss(Tensor(t[..., :2]), t)


# ---- labels and prototypes ----

def test_downsample_majority_and_ties():
    labels = np.zeros((1, 4, 4), int)
    labels[0, :2, :2] = 5      # 4 of 16 cells in the only block: background wins
    assert downsample_labels(labels, 4).tolist() == [[[0]]]
    labels[0, :, :2] = 5       # 8 vs 8: tie goes to the lower id
    assert downsample_labels(labels, 4).tolist() == [[[0]]]
    labels[0, 0, 2] = 5
    assert downsample_labels(labels, 4).tolist() == [[[5]]]
    with pytest.raises(ShapeError):
        downsample_labels(np.zeros((1, 5, 4), int), 4)


def test_labels_to_index():
    assert labels_to_index(np.array([[0, 6, 2]]), [0, 2, 6]).tolist() == [[0, 2, 1]]
    with pytest.raises(LabelError):
        labels_to_index(np.array([[0, 9]]), [0, 2])


def test_prototype_set_invariants():
    a = PrototypeSet([0, 1], np.eye(2))
    b = PrototypeSet([5], [[1.0, 1.0]], [IMPRINTED], [1])
    c = a + b
    assert c.class_ids == [0, 1, 5] and c.origins[-1] == IMPRINTED and c.steps == [0, 0, 1]
    with pytest.raises(DuplicateClassError):
        a + PrototypeSet([1], [[1.0, 0.0]])
    with pytest.raises(NumericError):
        PrototypeSet([0], [[0.0, 0.0]])
    with pytest.raises(DuplicateClassError):
        PrototypeSet([3, 3], np.eye(2))
