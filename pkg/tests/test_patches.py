import numpy as np
import pytest

from lssat import patches as pt


def test_token_count_from_paper_scale_dims():
    dims = pt.ImageDims(b=1, t=1, c=3, h=224, w=224)
    assert pt.token_count(dims, 16) == 196


def test_token_count_desk_scale():
    dims = pt.ImageDims(b=4, t=1, c=3, h=32, w=32)
    assert pt.token_count(dims, 8) == 16


def test_roundtrip_is_identity():
    rng = np.random.default_rng(0)
    for seed in range(3):
        x = np.random.default_rng(seed).random((2, 1, 3, 32, 32))
        ps = pt.patchify(x, 8)
        assert ps.count == 16 and ps.patch_dim == 3 * 8 * 8
        back = pt.unpatchify(ps)
        assert np.array_equal(back, x)
    del rng


def test_roundtrip_multi_frame():
    x = np.random.default_rng(5).random((2, 3, 3, 16, 16))
    ps = pt.patchify(x, 8)
    assert ps.count == 3 * 4
    assert np.array_equal(pt.unpatchify(ps), x)


def test_zero_tensor_roundtrip():
    x = np.zeros((1, 1, 3, 16, 16))
    assert np.array_equal(pt.unpatchify(pt.patchify(x, 8)), x)


def test_single_patch_token_is_flattened_image():
    x = np.random.default_rng(1).random((1, 1, 3, 8, 8))
    ps = pt.patchify(x, 8)
    assert ps.count == 1
    assert np.array_equal(ps.tokens[0, 0], x[0, 0].ravel())


def test_tokens_are_copies_not_views():
    x = np.random.default_rng(2).random((1, 1, 3, 16, 16))
    ps = pt.patchify(x, 8)
    x[0, 0, 0, 0, 0] = 9.0
    assert ps.tokens[0, 0, 0] != 9.0


def test_indivisible_dims_rejected():
    x = np.zeros((1, 1, 3, 30, 32))
    with pytest.raises(pt.PatchError, match="divisible"):
        pt.patchify(x, 8)


def test_unpatchify_inconsistent_dims_rejected():
    ps = pt.patchify(np.zeros((1, 1, 3, 16, 16)), 8)
    with pytest.raises(pt.PatchError, match="inconsistent"):
        pt.unpatchify(ps, pt.ImageDims(1, 1, 3, 32, 32))


def test_mask_count_is_floor():
    plan = pt.sample_mask(batch=2, total=196, ratio=0.75, seed=0)
    assert plan.masked_count == 147
    assert plan.visible_count == 49
    for s, r, want in [(16, 0.75, 12), (10, 0.33, 3), (7, 0.5, 3)]:
        p = pt.sample_mask(1, s, r, seed=1)
        assert p.masked_count == want


def test_zero_ratio_masks_nothing():
    plan = pt.sample_mask(2, 16, 0.0, seed=0)
    assert plan.masked_count == 0
    assert plan.visible_count == 16


def test_ratio_out_of_range():
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(pt.PatchError, match="ratio"):
            pt.sample_mask(1, 16, bad, seed=0)


def test_masked_visible_partition():
    rng = np.random.default_rng(3)
    for _ in range(10):
        s = int(rng.integers(4, 50))
        ratio = float(rng.uniform(0, 0.95))
        plan = pt.sample_mask(3, s, ratio, seed=int(rng.integers(1 << 30)))
        for b in range(3):
            union = np.union1d(plan.masked[b], plan.visible[b])
            assert np.array_equal(union, np.arange(s))
            assert len(np.intersect1d(plan.masked[b], plan.visible[b])) == 0
            assert np.all(np.diff(plan.masked[b]) > 0)
            assert np.all(np.diff(plan.visible[b]) > 0)


def test_same_seed_same_plan():
    a = pt.sample_mask(4, 16, 0.75, seed=42, epoch=3, step=7)
    b = pt.sample_mask(4, 16, 0.75, seed=42, epoch=3, step=7)
    assert np.array_equal(a.masked, b.masked)
    assert np.array_equal(a.visible, b.visible)


def test_different_keys_differ():
    a = pt.sample_mask(4, 64, 0.75, seed=42, epoch=0, step=0)
    b = pt.sample_mask(4, 64, 0.75, seed=42, epoch=0, step=1)
    c = pt.sample_mask(4, 64, 0.75, seed=43, epoch=0, step=0)
    assert not np.array_equal(a.masked, b.masked)
    assert not np.array_equal(a.masked, c.masked)


def test_per_sample_masks_are_independent():
    plan = pt.sample_mask(8, 64, 0.75, seed=0)
    assert any(not np.array_equal(plan.masked[0], plan.masked[i])
               for i in range(1, 8))


def test_mask_uniformity():
    # every index should be masked with empirical frequency ratio +/- 0.02
    s, ratio, draws = 16, 0.75, 10_000
    counts = np.zeros(s)
    chunk = 500
    for step in range(draws // chunk):
        plan = pt.sample_mask(chunk, s, ratio, seed=99, step=step)
        np.add.at(counts, plan.masked.ravel(), 1)
    freq = counts / draws
    assert np.all(np.abs(freq - ratio) < 0.02), freq


def test_gather_visible_matches_naive_indexing():
    rng = np.random.default_rng(4)
    x = rng.random((3, 1, 3, 32, 32))
    ps = pt.patchify(x, 8)
    plan = pt.sample_mask(3, ps.count, 0.75, seed=5)
    vis = pt.gather_visible(ps, plan)
    assert vis.count == 4
    for b in range(3):
        for j, tok in enumerate(plan.visible[b]):
            assert np.array_equal(vis.tokens[b, j], ps.tokens[b, tok])


def test_gather_with_empty_mask_is_identity():
    ps = pt.patchify(np.random.default_rng(6).random((2, 1, 3, 16, 16)), 8)
    plan = pt.sample_mask(2, ps.count, 0.0, seed=0)
    vis = pt.gather_visible(ps, plan)
    assert np.array_equal(vis.tokens, ps.tokens)


def test_gather_plan_mismatch_rejected():
    ps = pt.patchify(np.zeros((2, 1, 3, 16, 16)), 8)
    plan = pt.sample_mask(2, 99, 0.5, seed=0)
    with pytest.raises(pt.PatchError, match="match"):
        pt.gather_visible(ps, plan)
