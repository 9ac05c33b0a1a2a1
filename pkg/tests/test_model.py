import math

import numpy as np
import pytest

from stts_lab import autodiff as ad
from stts_lab.autodiff import Tensor
from stts_lab.config import ModelConfig, SelectionConfig, SpatialSel, TemporalSel, resolve
from stts_lab.model import (
    Block,
    ForwardInfo,
    VideoTransformer,
    attention_block,
    cubes,
    self_attention,
    stage_downsample,
)
from stts_lab.selection import TokenGrid
from stts_lab.topk import PerturbConfig

SMALL = ModelConfig(D=8, Hpx=12, Wpx=12, cube_t=2, cube_p=4, C=8, heads=2, depth=2, classes=3)


def identity_attention(C):
    eye = np.eye(C)
    return (Tensor(np.concatenate([eye, eye, eye], axis=1)), Tensor(np.zeros(3 * C)),
            Tensor(eye), Tensor(np.zeros(C)))


# --- tokenizer ------------------------------------------------------------------------

def test_tokenize_counts():
    cfg = ModelConfig(Hpx=16, Wpx=16)
    m = VideoTransformer(cfg)
    g = m.tokenize(np.zeros((8, 16, 16, 3)))
    assert (g.T, g.N) == (4, 16)
    assert g.T * g.N + g.class_token.shape[1] == 65


def test_zero_clip_gives_positional_encodings():
    m = VideoTransformer(SMALL, seed=3)
    g = m.tokenize(np.zeros((2, 8, 12, 12, 3)))
    np.testing.assert_array_equal(g.tokens.data, np.broadcast_to(m.pos.data, g.tokens.shape))


def test_one_cube_changes_one_token(rng):
    m = VideoTransformer(SMALL, seed=1)
    a = rng.uniform(size=(8, 12, 12, 3)).astype(np.float32)
    b = a.copy()
    b[2:4, 4:8, 8:12] += 0.5  # temporal cube 1, spatial cell (1, 2)
    diff = np.any(m.tokenize(a).tokens.data != m.tokenize(b).tokens.data, axis=-1)[0]
    assert diff.sum() == 1 and diff[1, 1 * 3 + 2]


def test_cubes_layout():
    clip = np.arange(8 * 12 * 12 * 3, dtype=np.float32).reshape(8, 12, 12, 3)
    x = cubes(clip, SMALL)
    np.testing.assert_array_equal(x[0, 1, 4], clip[2:4, 4:8, 4:8].ravel())


def test_tokenize_divisibility():
    with pytest.raises(ValueError):
        cubes(np.zeros((7, 12, 12, 3)), SMALL)


# --- attention ------------------------------------------------------------------------

def test_attention_single_token_returns_value():
    x = Tensor([[[0.3, -1.2]]])
    out, w = self_attention(x, *identity_attention(2), heads=1, return_weights=True)
    np.testing.assert_array_equal(w.data, [[[[1.0]]]])
    np.testing.assert_allclose(out.data, x.data)


def test_attention_two_token_hand_case():
    x = Tensor([[[1.0, 0.0], [0.0, 1.0]]])
    out, w = self_attention(x, *identity_attention(2), heads=1, return_weights=True)
    # q k^T / sqrt(2) = diag(1/sqrt 2); row softmax of [1/sqrt 2, 0]
    a = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
    np.testing.assert_allclose(w.data[0, 0], [[a, 1 - a], [1 - a, a]], atol=1e-5)
    np.testing.assert_allclose(out.data[0], [[a, 1 - a], [1 - a, a]], atol=1e-5)


def test_attention_rows_sum_to_one(rng):
    C = 8
    blk = Block.init(C, 4, rng)
    x = Tensor(rng.normal(size=(3, 7, C)))
    _, w = self_attention(x, blk.wqkv, blk.bqkv, blk.wo, blk.bo, heads=2, return_weights=True)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_block_shape_and_width_check(rng):
    blk = Block.init(8, 4, rng)
    assert attention_block(Tensor(rng.normal(size=(2, 5, 8))), blk, 2).shape == (2, 5, 8)
    with pytest.raises(ad.DimensionError):
        attention_block(Tensor(rng.normal(size=(2, 5, 6))), blk, 2)


# --- downsample -------------------------------------------------------------------------

def test_downsample_counts_and_pooling_oracle(rng):
    C = 3
    x = rng.normal(size=(2, 2, 16, C))
    w, b = Tensor(np.eye(C)), Tensor(np.zeros(C))
    out = stage_downsample(TokenGrid(Tensor(x), Tensor(np.ones((2, 1, C)))), w, b)
    assert out.N == 4
    grid = x.reshape(2, 2, 4, 4, C)
    for r in range(2):
        for c in range(2):
            oracle = grid[:, :, 2 * r:2 * r + 2, 2 * c:2 * c + 2].mean(axis=(2, 3))
            np.testing.assert_allclose(out.tokens.data[:, :, r * 2 + c], oracle, atol=1e-6)


def test_downsample_constant_grid(rng):
    C = 4
    x = np.full((1, 1, 16, C), 0.7)
    out = stage_downsample(TokenGrid(Tensor(x)), Tensor(np.eye(C)), Tensor(np.zeros(C)))
    np.testing.assert_allclose(out.tokens.data, 0.7, atol=1e-7)


def test_downsample_doubles_width_and_class_token(rng):
    m = VideoTransformer(resolve("tinyds")[0], seed=0)
    w, b = m.downsamples[2]
    g = TokenGrid(Tensor(rng.normal(size=(1, 4, 36, 32))), Tensor(rng.normal(size=(1, 1, 32))))
    out = stage_downsample(g, w, b)
    assert out.tokens.shape == (1, 4, 9, 64) and out.class_token.shape == (1, 1, 64)


def test_downsample_odd_side():
    with pytest.raises(ValueError):
        stage_downsample(TokenGrid(Tensor(np.zeros((1, 1, 9, 2)))), Tensor(np.eye(2)), Tensor(np.zeros(2)))


# --- forward ------------------------------------------------------------------------------

def test_identity_selections_bit_identical(rng):
    clips = rng.uniform(size=(3, 8, 24, 24, 3))
    plain = VideoTransformer(resolve("tiny")[0], seed=5)
    ident = VideoTransformer(*resolve("tiny-T0_1.0-S0_1.0"), seed=5)
    assert np.array_equal(plain.forward(clips).data, ident.forward(clips).data)


def test_logits_depend_on_every_frame(rng):
    m = VideoTransformer(SMALL, seed=2)
    clips = rng.uniform(size=(1, 8, 12, 12, 3))
    base = m.forward(clips).data
    for f in range(0, 8, 2):
        c = clips.copy()
        c[0, f] = 0
        assert not np.array_equal(m.forward(c).data, base)


def test_hard_mode_ignores_unselected_frames(rng):
    sel = SelectionConfig(TemporalSel(0, 0.5))
    m = VideoTransformer(SMALL, sel, seed=4)
    unchanged = 0
    for _ in range(20):
        clips = rng.uniform(size=(1, 8, 12, 12, 3))
        info = ForwardInfo()
        base = m.forward(clips, info=info).data
        kept = set(info.temporal_indices[0].tolist())
        drop = next(t for t in range(4) if t not in kept)
        c = clips.copy()
        c[0, 2 * drop:2 * drop + 2] = 0
        info2 = ForwardInfo()
        out = m.forward(c, info=info2).data
        # the ablated frame still feeds the scorer's global feature, so the kept set can move;
        # whenever it does not, the logits must not move either
        if set(info2.temporal_indices[0].tolist()) == kept:
            unchanged += 1
            assert np.array_equal(out, base)
    assert unchanged >= 10


def test_hard_mode_gradients_ignore_unselected(rng):
    sel = SelectionConfig(TemporalSel(0, 0.5))
    m = VideoTransformer(SMALL, sel, seed=4)
    clips = rng.uniform(size=(2, 8, 12, 12, 3))
    info = ForwardInfo()
    with ad.Tape() as tape:
        loss = ad.cross_entropy(m.forward(clips, info=info), [0, 1])
    tape.backward(loss)
    g = m.pos.grad[0]  # (T, N, C), positional encodings of each frame
    for t in range(4):
        used = any(t in row for row in info.temporal_indices.tolist())
        assert (np.abs(g[t]).sum() > 0) == used


def test_head_row_permutation(rng):
    m = VideoTransformer(SMALL, seed=1)
    clips = rng.uniform(size=(2, 8, 12, 12, 3))
    base = m.forward(clips).data
    perm = np.array([2, 0, 1])
    m.head_w.data = m.head_w.data[:, perm].copy()
    m.head_b.data = m.head_b.data[perm].copy()
    np.testing.assert_allclose(m.forward(clips).data, base[:, perm], rtol=1e-6)


def test_smoothed_needs_perturb_config():
    m = VideoTransformer(SMALL, SelectionConfig(TemporalSel(0, 0.5)))
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 8, 12, 12, 3)), mode="smoothed")


def test_spatial_on_non_square_grid():
    cfg = ModelConfig(D=8, Hpx=12, Wpx=16, C=8, depth=2, classes=3)
    m = VideoTransformer(cfg, SelectionConfig(None, SpatialSel(0, 0.5)))
    with pytest.raises(ad.DimensionError):
        m.forward(np.zeros((1, 8, 12, 16, 3)))


def _fd_errors(m, clips, labels, pc, names, h, rng, per_tensor=4):
    """Norm-wise relative error of tape gradients vs central differences, per parameter tensor."""
    def loss():
        return ad.cross_entropy(m.forward(clips, "smoothed", pc), labels)

    params = m.params
    for p in params.values():
        p.grad = None
    with ad.Tape() as tape:
        out = loss()
    tape.backward(out)
    errs = {}
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        fd, an = [], []
        for j in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + h
            up = float(loss().data)
            flat[j] = old - h
            dn = float(loss().data)
            flat[j] = old
            fd.append((up - dn) / (2 * h))
            an.append(float(p.grad.reshape(-1)[j]))
        fd, an = np.array(fd), np.array(an)
        # scorer.*.b3 only shifts scores before min-max normalisation: true gradient is zero
        if np.linalg.norm(fd) < 1e-4 and np.linalg.norm(an) < 1e-4:
            continue
        errs[name] = float(np.linalg.norm(fd - an) / np.linalg.norm(fd))
    return errs


def test_end_to_end_gradient_check():
    """T=4, N=9, C=8, two blocks, smoothed temporal selection, common random numbers.

    Backbone weights see the selection as a fixed soft mixture, so a small
    step and few samples suffice. Parameters upstream of the scorer are
    differentiated through the Monte-Carlo estimator, whose noise needs
    many more samples and a wider step to stay under 5%.
    """
    rng = np.random.default_rng(0)
    m = VideoTransformer(SMALL, SelectionConfig(TemporalSel(0, 0.5)), seed=0)
    clips = rng.uniform(size=(2, 8, 12, 12, 3)).astype(np.float32)
    labels = [0, 2]
    upstream = [k for k in m.params if k.startswith("scorer.")] + ["pos", "embed.w", "embed.b"]
    backbone = [k for k in m.params if k not in upstream]
    errs = _fd_errors(m, clips, labels, PerturbConfig(0.5, 20_000, 7), backbone, 1e-3, rng)
    errs.update(_fd_errors(m, clips, labels, PerturbConfig(0.5, 400_000, 7), upstream, 2e-2, rng))
    assert len(errs) >= len(m.params) - 1
    bad = {k: v for k, v in errs.items() if v > 0.05}
    assert not bad, bad
