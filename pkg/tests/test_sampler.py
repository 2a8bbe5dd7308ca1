import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelfm.augment import TransformPipeline
from voxelfm.sampler import (BatchComposition, PatchSize, SamplerError,
                             compose_batch, redundancy_ratio, sample_patches,
                             valid_positions)
from voxelfm.volume import Volume


def _vol(shape, seed=0):
    rng = np.random.default_rng(seed)
    return Volume(rng.uniform(0, 100, size=shape).astype(np.float32))


def test_valid_positions_cases():
    assert valid_positions((4, 4, 4), (2, 2, 2)) == 27
    assert valid_positions((4, 4, 4), (4, 4, 4)) == 1
    assert valid_positions((4, 4, 4), (5, 2, 2)) == 0


def _brute_force_positions(shape, size):
    count = 0
    for i in range(shape[0]):
        for j in range(shape[1]):
            for k in range(shape[2]):
                if (i + size[0] <= shape[0] and j + size[1] <= shape[1]
                        and k + size[2] <= shape[2]):
                    count += 1
    return count


@given(
    shape=st.tuples(*[st.integers(1, 8)] * 3),
    size=st.tuples(*[st.integers(1, 8)] * 3),
)
@settings(max_examples=60, deadline=None)
def test_valid_positions_matches_brute_force(shape, size):
    assert valid_positions(shape, size) == _brute_force_positions(shape, size)


def test_sample_patches_single_placement():
    v = _vol((3, 4, 5))
    ps = sample_patches(v, 1, (3, 4, 5), rng_seed=0)
    assert len(ps) == 1
    assert ps.patches[0].position == (0, 0, 0)
    assert np.array_equal(ps.patches[0].data, v.data)


def test_sample_patches_uniform_over_positions():
    # 27 possible corners; 10^4 draws; binomial 3-sigma bound per cell.
    v = _vol((4, 4, 4))
    m = 10_000
    ps = sample_patches(v, m, (2, 2, 2), rng_seed=7)
    counts = {}
    for p in ps.patches:
        counts[p.position] = counts.get(p.position, 0) + 1
    assert len(counts) == 27
    p_cell = 1.0 / 27.0
    sigma = np.sqrt(m * p_cell * (1 - p_cell))
    for c in counts.values():
        assert abs(c - m * p_cell) <= 3 * sigma


def test_sample_patches_deterministic_and_in_bounds():
    v = _vol((6, 7, 8))
    a = sample_patches(v, 50, (2, 3, 4), rng_seed=5)
    b = sample_patches(v, 50, (2, 3, 4), rng_seed=5)
    for pa, pb in zip(a.patches, b.patches):
        assert pa.position == pb.position
        assert np.array_equal(pa.data, pb.data)
    for p in a.patches:
        i, j, k = p.position
        assert 0 <= i <= 6 - 2 and 0 <= j <= 7 - 3 and 0 <= k <= 8 - 4


def test_sample_patches_oversize_errors():
    with pytest.raises(SamplerError):
        sample_patches(_vol((4, 4, 4)), 1, (5, 5, 5), rng_seed=0)
    with pytest.raises(SamplerError):
        sample_patches(_vol((4, 4, 4)), 0, (2, 2, 2), rng_seed=0)


def test_compose_batch_totals():
    scans = {f"s{i}": _vol((8, 8, 8), seed=i) for i in range(20)}
    comp = BatchComposition(16, 20, PatchSize(4, 4, 4))
    sets = compose_batch(scans, comp, rng_seed=0)
    assert len(sets) == 16
    assert sum(len(ps) for ps in sets) == 320


def test_compose_batch_minimal():
    scans = {"only": _vol((4, 4, 4))}
    sets = compose_batch(scans, BatchComposition(1, 1, PatchSize(2, 2, 2)), 0)
    assert len(sets) == 1 and len(sets[0]) == 1


def test_compose_batch_without_replacement_and_reproducible():
    scans = {f"s{i}": _vol((6, 6, 6), seed=i) for i in range(2)}
    comp = BatchComposition(2, 3, PatchSize(2, 2, 2))
    sets1 = compose_batch(scans, comp, rng_seed=9)
    sets2 = compose_batch(scans, comp, rng_seed=9)
    assert {ps.scan_id for ps in sets1} == {"s0", "s1"}
    assert [ps.scan_id for ps in sets1] == [ps.scan_id for ps in sets2]
    for a, b in zip(sets1, sets2):
        for pa, pb in zip(a.patches, b.patches):
            assert pa.position == pb.position
    for ps in sets1:
        assert all(p.source_scan_id == ps.scan_id for p in ps.patches)


def test_compose_batch_too_few_scans():
    scans = {"s0": _vol((4, 4, 4))}
    with pytest.raises(SamplerError):
        compose_batch(scans, BatchComposition(2, 1, PatchSize(2, 2, 2)), 0)


# -- redundancy diagnostic


def test_redundancy_identity_views_ratio_one():
    vols = [Volume(np.full((4, 4, 4), float(v))) for v in (0.1, 0.4, 0.7, 0.9)]
    ratio = redundancy_ratio(vols, lambda data, rng: data, trials=5, rng_seed=0)
    assert ratio == pytest.approx(1.0, abs=1e-12)


def test_redundancy_independent_noise_ratio_near_zero():
    rng0 = np.random.default_rng(3)
    vols = [Volume(np.full((4, 4, 4), float(v)))
            for v in rng0.uniform(0, 1, size=8)]

    def noise_view(data, rng):
        return rng.uniform(0, 1, size=data.shape)

    ratio = redundancy_ratio(vols, noise_view, trials=200, rng_seed=1)
    assert abs(ratio) < 0.1


def test_redundancy_identical_volumes_error():
    vols = [Volume(np.full((4, 4, 4), 0.5)) for _ in range(4)]
    with pytest.raises(SamplerError):
        redundancy_ratio(vols, lambda data, rng: data, trials=5, rng_seed=0)


def test_redundancy_accepts_pipeline():
    rng0 = np.random.default_rng(4)
    vols = [Volume(rng0.uniform(0, 1, size=(6, 6, 6)).astype(np.float32))
            for _ in range(5)]
    ratio = redundancy_ratio(vols, TransformPipeline(()), trials=3, rng_seed=2)
    assert ratio == pytest.approx(1.0, abs=1e-9)
