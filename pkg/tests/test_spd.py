"""Path-discrimination loss: closed forms, gradients, clamping, batching."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff_grad, rel_err
from protohier.errors import ConfigError, MathError, ShapeError
from protohier.prototree import SemanticPath
from protohier.spd import (
    DEFAULT_EPS,
    HierRep,
    path_similarity,
    spd_grad_check,
    spd_loss,
    spd_loss_core,
)

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])


def rep(*rows):
    z = np.array(rows, dtype=np.float64)
    return HierRep(z0=z[0], z=z)


def path(*rows):
    vecs = np.array(rows, dtype=np.float64)
    return SemanticPath(proto_idx=np.zeros(len(rows), dtype=np.int32), vectors=vecs)


def test_similarity_identical_unit_vectors():
    assert path_similarity(rep(E1), path(E1)) == 1.0


def test_similarity_two_orthogonal_levels():
    assert path_similarity(rep(E1, E2), path(E2, E1)) == 0.25


def test_similarity_opposed_level_zeroes_product():
    assert path_similarity(rep(E1, E1, E1), path(E1, E2, -E1)) == 0.0


def test_similarity_scale_invariant():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(3, 5))
    c = rng.normal(size=(3, 5))
    base = path_similarity(HierRep(z0=z[0], z=z), SemanticPath(None, c))
    doubled = path_similarity(HierRep(z0=z[0], z=4.0 * z), SemanticPath(None, c))
    assert doubled == base  # power-of-two scaling is exact
    scaled = path_similarity(HierRep(z0=z[0], z=0.3 * z), SemanticPath(None, c))
    assert math.isclose(scaled, base, rel_tol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**20), L=st.integers(1, 4), d=st.integers(1, 6))
def test_similarity_range_property(seed, L, d):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(L, d))
    c = rng.normal(size=(L, d))
    if (np.linalg.norm(z, axis=1) == 0).any() or (np.linalg.norm(c, axis=1) == 0).any():
        return
    s = path_similarity(HierRep(z0=z[0], z=z), SemanticPath(None, c))
    assert 0.0 <= s <= 1.0


def test_similarity_errors():
    with pytest.raises(MathError):
        path_similarity(rep(np.zeros(3)), path(E1))
    with pytest.raises(MathError):
        path_similarity(rep(E1), path(np.zeros(3)))
    with pytest.raises(ShapeError):
        path_similarity(rep(E1, E2), path(E1))
    with pytest.raises(ShapeError):
        path_similarity(HierRep(z0=E1, z=E1), path(E1))


def test_balanced_half_scores_give_two_ln_two():
    # one orthogonal level makes each side score exactly 1/2
    reps = [rep(E1, E1)]
    pos = [path(E2, E1)]
    negs = [[path(E3, E1)]]
    out = spd_loss(reps, pos, negs)
    assert abs(out.loss - 2.0 * math.log(2.0)) <= 1e-12
    assert out.pos_scores[0] == 0.5
    assert out.neg_scores[0][0] == 0.5


def test_perfect_discrimination_loss_at_clamp_floor():
    out = spd_loss([rep(E1)], [path(E1)], [[path(-E1)]])
    assert 0.0 <= out.loss <= 3.0 * DEFAULT_EPS
    assert out.pos_scores[0] == 1.0
    assert out.neg_scores[0][0] == 0.0


def test_fully_clamped_batch_has_zero_gradient():
    z = np.array([[E1]])
    loss, grad, s_p, s_n = spd_loss_core(z, np.array([[E1]]), np.array([[[-E1]]]))
    assert s_p[0] == 1.0 and s_n[0, 0] == 0.0
    assert np.all(grad == 0.0)


def test_gradient_matches_central_differences_reference_config():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((1, 3, 16))
    cp = rng.standard_normal((1, 3, 16))
    cn = rng.standard_normal((1, 8, 3, 16))
    _, analytic, _, _ = spd_loss_core(z, cp, cn)
    fd = central_diff_grad(lambda v: spd_loss_core(v, cp, cn)[0], z, step=1e-5)
    assert rel_err(analytic, fd) <= 1e-4


def test_gradient_matches_central_differences_batched():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((3, 2, 5))
    cp = rng.standard_normal((3, 2, 5))
    cn = rng.standard_normal((3, 4, 2, 5))
    _, analytic, _, _ = spd_loss_core(z, cp, cn)
    fd = central_diff_grad(lambda v: spd_loss_core(v, cp, cn)[0], z, step=1e-5)
    assert rel_err(analytic, fd) <= 1e-4


def test_ragged_negative_counts_gradient_and_loss():
    rng = np.random.default_rng(9)

    def mk_paths(count, L, d):
        return [SemanticPath(None, rng.normal(size=(L, d))) for _ in range(count)]

    reps = [HierRep(z0=None, z=rng.normal(size=(2, 4))) for _ in range(2)]
    pos = mk_paths(2, 2, 4)
    negs = [mk_paths(2, 2, 4), mk_paths(5, 2, 4)]
    out = spd_loss(reps, pos, negs)

    singles = [
        spd_loss([reps[i]], [pos[i]], [negs[i]]).loss for i in range(2)
    ]
    assert math.isclose(out.loss, np.mean(singles), rel_tol=1e-12)

    # finite differences through the object API on one entry per sample
    for i in (0, 1):
        z_i = reps[i].z
        step = 1e-5
        # perturb entry (0, 1)
        z_plus, z_minus = z_i.copy(), z_i.copy()
        z_plus[0, 1] += step
        z_minus[0, 1] -= step
        reps_p = list(reps)
        reps_p[i] = HierRep(z0=None, z=z_plus)
        reps_m = list(reps)
        reps_m[i] = HierRep(z0=None, z=z_minus)
        fd = (spd_loss(reps_p, pos, negs).loss - spd_loss(reps_m, pos, negs).loss) / (
            2 * step
        )
        assert abs(out.grad_z[i][0, 1] - fd) <= 1e-4 * max(1.0, abs(fd))


def test_batch_additivity_uniform_negatives():
    rng = np.random.default_rng(10)
    reps = [HierRep(z0=None, z=rng.normal(size=(3, 6))) for _ in range(4)]
    pos = [SemanticPath(None, rng.normal(size=(3, 6))) for _ in range(4)]
    negs = [
        [SemanticPath(None, rng.normal(size=(3, 6))) for _ in range(2)]
        for _ in range(4)
    ]
    batch = spd_loss(reps, pos, negs)
    singles = [spd_loss([reps[i]], [pos[i]], [negs[i]]) for i in range(4)]
    assert math.isclose(batch.loss, np.mean([s.loss for s in singles]), rel_tol=1e-12)
    for i in range(4):
        assert np.allclose(batch.grad_z[i], singles[i].grad_z[0] / 4.0, rtol=1e-12)


def test_monotone_response_in_positive_cosine():
    # rotate the level-1 vector toward its positive prototype; negatives are
    # built orthogonal to the rotation plane so only s_plus moves
    losses = []
    for cos in (-0.9, -0.5, 0.0, 0.5, 0.9):
        sin = math.sqrt(1.0 - cos * cos)
        z = np.array([[cos * E1 + sin * E2, E1]])
        loss, _, _, _ = spd_loss_core(
            z, np.array([[E1, E1]]), np.array([[[E3, E1]]])
        )
        losses.append(loss)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**20),
    b=st.integers(1, 4),
    L=st.integers(1, 3),
    k=st.integers(1, 5),
)
def test_loss_nonnegative_scores_in_range(seed, b, L, k):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(b, L, 4))
    cp = rng.normal(size=(b, L, 4))
    cn = rng.normal(size=(b, k, L, 4))
    loss, _, s_p, s_n = spd_loss_core(z, cp, cn)
    assert loss >= 0.0
    assert (s_p >= 0).all() and (s_p <= 1).all()
    assert (s_n >= 0).all() and (s_n <= 1).all()


def test_loss_validation():
    good = rep(E1)
    with pytest.raises(ConfigError):
        spd_loss([], [], [])
    with pytest.raises(ConfigError):
        spd_loss([good], [path(E1)], [[]])
    with pytest.raises(ConfigError):
        spd_loss([good, good], [path(E1)], [[path(E2)], [path(E2)]])
    with pytest.raises(ConfigError):
        spd_loss_core(np.ones((1, 1, 3)), np.ones((1, 1, 3)), np.ones((1, 1, 1, 3)), eps=0.7)
    with pytest.raises(ShapeError):
        spd_loss_core(np.ones((1, 1, 3)), np.ones((1, 2, 3)), np.ones((1, 1, 1, 3)))
    with pytest.raises(MathError):
        spd_loss_core(
            np.full((1, 1, 3), np.nan), np.ones((1, 1, 3)), np.ones((1, 1, 1, 3))
        )


def test_grad_check_passes_default_style_configs():
    report = spd_grad_check(trials=30, seed=1)
    assert report.passed
    assert report.trials == 30
    assert report.max_rel_error <= 1e-4
    assert report.worst["seconds"] >= 0.0


def test_grad_check_single_level_trials_pass():
    report = spd_grad_check(trials=20, levels=(1,), dims=(4,), neg_counts=(1,), seed=2)
    assert report.passed


def test_grad_check_zero_tolerance_always_fails():
    report = spd_grad_check(trials=5, tolerance=0.0, seed=3)
    assert not report.passed


def test_grad_check_validation():
    with pytest.raises(ConfigError):
        spd_grad_check(trials=0)
