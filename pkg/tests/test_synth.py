"""Planted-hierarchy generator: counts, numbering, determinism, recovery."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import nearest_center_labels
from protohier.errors import ConfigError
from protohier.synth import MAX_SAMPLES, HierarchySpec, generate


def spec(**kw):
    base = dict(
        depth=2,
        branching=(2, 3),
        samples_per_leaf=4,
        d=3,
        separation=(3.0, 1.0),
        noise_sigma=0.2,
        seed=0,
    )
    base.update(kw)
    return HierarchySpec(**base)


def test_depth1_counts():
    res = generate(
        spec(depth=1, branching=(2,), samples_per_leaf=3, d=2, separation=(2.0,))
    )
    assert res.embeddings.n == 6
    assert len(res.labels_by_level) == 1
    labels = res.labels_by_level[0]
    assert sorted(set(labels.tolist())) == [0, 1]
    assert np.bincount(labels).tolist() == [3, 3]


def test_coarse_is_fine_integer_division():
    res = generate(spec(branching=(2, 3)))
    coarse, fine = res.labels_by_level
    assert np.array_equal(coarse, fine // 3)
    assert res.embeddings.n == 2 * 3 * 4


def test_leaf_labels_attached_to_embeddings():
    res = generate(spec())
    assert np.array_equal(res.embeddings.labels, res.labels_by_level[-1])


def test_determinism_bitwise():
    a = generate(spec(seed=123))
    b = generate(spec(seed=123))
    assert a.embeddings.data.tobytes() == b.embeddings.data.tobytes()
    for la, lb in zip(a.labels_by_level, b.labels_by_level):
        assert np.array_equal(la, lb)
    for ca, cb in zip(a.centers_by_level, b.centers_by_level):
        assert ca.tobytes() == cb.tobytes()


def test_seed_changes_output():
    a = generate(spec(seed=0))
    b = generate(spec(seed=1))
    assert a.embeddings.data.tobytes() != b.embeddings.data.tobytes()


def test_center_counts_per_level():
    res = generate(spec(depth=3, branching=(2, 3, 2), separation=(4.0, 2.0, 1.0)))
    assert [c.shape[0] for c in res.centers_by_level] == [2, 6, 12]
    assert all(c.shape[1] == 3 for c in res.centers_by_level)


def test_nearest_center_recovers_leaves_when_well_separated():
    # wide spread, tiny noise: the nearest planted center is the true leaf
    res = generate(
        spec(
            depth=2,
            branching=(3, 2),
            samples_per_leaf=10,
            d=8,
            separation=(20.0, 8.0),
            noise_sigma=0.05,
            seed=5,
        )
    )
    got = nearest_center_labels(res.embeddings.data, res.centers_by_level[-1])
    assert np.array_equal(got, res.labels_by_level[-1])


@settings(max_examples=40, deadline=None)
@given(
    depth=st.integers(1, 3),
    seed=st.integers(0, 2**20),
    per_leaf=st.integers(1, 5),
    data=st.data(),
)
def test_refinement_property(depth, seed, per_leaf, data):
    branching = tuple(
        data.draw(st.integers(2, 4), label=f"branch{i}") for i in range(depth)
    )
    separation = tuple(4.0 * 0.5**i for i in range(depth))
    res = generate(
        HierarchySpec(
            depth=depth,
            branching=branching,
            samples_per_leaf=per_leaf,
            d=2,
            separation=separation,
            noise_sigma=1.0,
            seed=seed,
        )
    )
    # finer labels refine coarser ones: same fine class -> same coarse class
    for coarse, fine in zip(res.labels_by_level, res.labels_by_level[1:]):
        for cls in np.unique(fine):
            assert len(set(coarse[fine == cls].tolist())) == 1


def test_sample_cap():
    with pytest.raises(ConfigError):
        spec(depth=1, branching=(2,), separation=(1.0,),
             samples_per_leaf=MAX_SAMPLES // 2 + 1)


@pytest.mark.parametrize(
    "kw",
    [
        dict(depth=0, branching=(), separation=()),
        dict(branching=(2, 1)),
        dict(branching=(2,)),
        dict(separation=(1.0, 1.0)),
        dict(separation=(1.0, 2.0)),
        dict(separation=(1.0, 0.0)),
        dict(samples_per_leaf=0),
        dict(d=0),
        dict(noise_sigma=0.0),
        dict(seed=-1),
    ],
)
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        spec(**kw)
