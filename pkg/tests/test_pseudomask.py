"""Attention pseudo-masks, the mask enhancer, and PGM round-trips."""

import numpy as np
import pytest

from cst.backbone import BackboneConfig, random_grid_image, synthetic_tokens
from cst.episodes import write_grid_pgm
from cst.params import ParamStore
from cst.pseudomask import (AttentionStack, attention_scores, downsample_mask,
                            enhance, init_enhancer, raw_pseudomask, read_pgm,
                            train_enhancer, write_pgm)
from cst.seeding import rng_for

from helpers import assert_close, scalar_bilinear


def _self_stack(seed: int, sigma: float, designated=2, classes=(1, 2, 3)):
    rng = rng_for(seed, "pm")
    img = random_grid_image(f"p{seed}", rng, list(classes), designated, 6)
    bundle = synthetic_tokens(img, BackboneConfig(sigma=sigma), seed)
    return img, attention_scores(bundle, bundle)


def test_attention_scores_match_bruteforce():
    img, stack = _self_stack(0, sigma=0.05)
    bundle = synthetic_tokens(img, BackboneConfig(sigma=0.05), 0)
    for m in range(4):
        q = bundle.last_q[m, 0]
        q = q / np.linalg.norm(q)
        for t in (0, 17, 200, 255):
            k = bundle.last_k[m, 1 + t]
            expect = float(k @ q / np.linalg.norm(k))
            assert_close(stack.scores[m, t], expect, atol=1e-12)


def test_raw_pseudomask_matches_bruteforce():
    for seed in range(20):
        rng = rng_for(seed, "stack")
        grid = (int(rng.integers(3, 9)), int(rng.integers(3, 9)))
        scores = rng.uniform(-1, 1, size=(4, grid[0] * grid[1]))
        stack = AttentionStack(scores=scores, grid=grid)
        target = (int(rng.integers(4, 15)), int(rng.integers(4, 15)))
        got = raw_pseudomask(stack, 1, target)
        expect = (scalar_bilinear(scores.mean(axis=0).reshape(grid), target)
                  > -0.1).astype(np.float64)
        assert np.array_equal(got.values, expect)
        assert got.binary


def test_absent_class_short_circuits():
    _, stack = _self_stack(1, sigma=0.05)
    mask = raw_pseudomask(stack, 0, (16, 16))
    assert mask.values.sum() == 0.0


def test_noise_free_pseudomask_equals_gt():
    for seed in range(10):
        img, stack = _self_stack(seed, sigma=0.0)
        mask = raw_pseudomask(stack, 1, img.grid.shape)
        gt = (img.grid == img.designated).astype(np.float64)
        assert np.array_equal(mask.values, gt)


def test_noisy_pseudomask_mostly_agrees():
    agree = []
    for seed in range(30):
        img, stack = _self_stack(seed, sigma=0.05)
        mask = raw_pseudomask(stack, 1, img.grid.shape)
        gt = (img.grid == img.designated).astype(np.float64)
        agree.append((mask.values == gt).mean())
    assert np.mean(agree) >= 0.95


def test_downsample_mask_threshold():
    mask = np.zeros((4, 4))
    mask[:2, :2] = 1.0
    down = downsample_mask(mask, (2, 2))
    assert down.tolist() == [[1.0, 0.0], [0.0, 0.0]]
    assert downsample_mask(np.ones((8, 8)), (4, 4)).sum() == 16.0


def test_enhancer_learns_and_is_deterministic():
    pairs = []
    for seed in range(10):
        img, stack = _self_stack(seed, sigma=0.3)
        pairs.append((stack, (img.grid == img.designated).astype(np.float64)))

    def run():
        store = ParamStore()
        init_enhancer(store, 4, rng_for(5, "enh"), width=8)
        losses = train_enhancer(store, pairs, lr=1e-2, steps=60)
        return store, losses

    store_a, losses_a = run()
    _, losses_b = run()
    assert losses_a == losses_b
    # Later-epoch loss should sit clearly below the first pass.
    assert np.mean(losses_a[-10:]) < np.mean(losses_a[:10]) * 0.9

    hits = [(enhance(store_a, stack, 1, gt.shape).values == gt).mean()
            for stack, gt in pairs]
    assert np.mean(hits) > 0.9


def test_enhance_absent_class_and_binary():
    store = ParamStore()
    init_enhancer(store, 4, rng_for(6, "enh"), width=4)
    _, stack = _self_stack(3, sigma=0.2)
    assert enhance(store, stack, 0, (16, 16)).values.sum() == 0.0
    out = enhance(store, stack, 1, (20, 20))
    out.validate()
    assert out.values.shape == (20, 20)


def test_train_enhancer_rejects_empty():
    store = ParamStore()
    init_enhancer(store, 4, rng_for(7, "enh"), width=4)
    with pytest.raises(ValueError):
        train_enhancer(store, [], lr=1e-2, steps=1)


def test_pgm_roundtrip(tmp_path):
    rng = rng_for(8, "pgm")
    mask = (rng.uniform(size=(9, 13)) > 0.5).astype(np.float64)
    path = tmp_path / "m.pgm"
    write_pgm(mask, path)
    back = read_pgm(path)
    assert np.array_equal(back == 255, mask == 1.0)

    grid = rng.integers(0, 7, size=(16, 16))
    write_grid_pgm(grid, tmp_path / "g.pgm")
    assert np.array_equal(read_pgm(tmp_path / "g.pgm"), grid)


def test_read_pgm_rejects_other_formats(tmp_path):
    bad = tmp_path / "x.pgm"
    bad.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(ValueError):
        read_pgm(bad)
