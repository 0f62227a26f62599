import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tclseg import autodiff as ad
from tclseg.config import ModelConfig, PretrainConfig, TrainConfig
from tclseg.corpus import build_vocabulary, generate_samples
from tclseg.dual_encoder import block_prefix
from tclseg.losses import LossWeights, duplicate_pairs, weighted_total
from tclseg.params import ParamSet
from tclseg.trainer import (Checkpoint, CheckpointError, CheckpointVersionError, OptimizerState,
                            adamw_step, augment_batch, batch_indices, load_checkpoint, lr_at,
                            pretrain_dual_encoder, save_checkpoint, train_grounder, unfreeze_step)

MCFG = ModelConfig(image_size=64, width=16, blocks=2, heads=2, mlp_ratio=2)


@pytest.fixture(scope="module")
def data():
    samples = generate_samples(11, "train", 16)
    images = np.stack([s.image_float() for s in samples])
    return images, [s.caption for s in samples], build_vocabulary()


@pytest.fixture(scope="module")
def encoder(data):
    images, caps, vocab = data
    params, hist, _ = pretrain_dual_encoder(images, caps, vocab, MCFG,
                                            PretrainConfig(batch=8, iterations=3, warmup=1), 0)
    return params, hist


# ---------------------------------------------------------------- optimizer

def one_param(value, grad):
    ps = ParamSet()
    p = ps.add("w", np.asarray(value, dtype=np.float64))
    p.grad = np.asarray(grad, dtype=np.float64)
    return ps


def test_adamw_null_update():
    ps = one_param([[1.0, -2.0]], [[0.0, 0.0]])
    adamw_step(ps, OptimizerState(), 0.1, 0.0)
    np.testing.assert_array_equal(ps["w"].data, [[1.0, -2.0]])


def test_adamw_pure_decay():
    ps = one_param([[1.0, -2.0]], [[0.0, 0.0]])
    adamw_step(ps, OptimizerState(), 0.1, 0.05)
    np.testing.assert_allclose(ps["w"].data, [[0.995, -1.99]], rtol=1e-15)


def test_adamw_first_step_sign_update():
    g = np.array([0.3, -2.0, 1e-3])
    ps = one_param(np.zeros(3), g)
    adamw_step(ps, OptimizerState(), 0.01, 0.0)
    np.testing.assert_allclose(ps["w"].data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adamw_errors_leave_params_alone():
    ps = one_param([1.0], [np.nan])
    with pytest.raises(ad.NumericError):
        adamw_step(ps, OptimizerState(), 0.1, 0.0)
    assert ps["w"].data[0] == 1.0
    ps = one_param([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        adamw_step(ps, OptimizerState(), 0.1, 0.0)


def test_adamw_skips_frozen():
    ps = one_param([1.0], [1.0])
    ps["w"].requires_grad = False
    state = OptimizerState()
    adamw_step(ps, state, 0.1, 0.05)
    assert ps["w"].data[0] == 1.0 and not state.m


# ---------------------------------------------------------------- schedule

def test_lr_endpoints():
    assert lr_at(0, 2000, 600, 3e-4) == 0.0
    assert lr_at(600, 2000, 600, 3e-4) == 3e-4
    assert lr_at(1300, 2000, 600, 3e-4) == pytest.approx(1.5e-4, rel=1e-12)
    assert lr_at(2000, 2000, 600, 3e-4) < 1e-12 * 3e-4
    with pytest.raises(ValueError):
        lr_at(2001, 2000, 600, 3e-4)


@given(st.integers(1, 500), st.integers(0, 499))
def test_lr_bounded_and_monotone_after_warmup(total, warmup):
    warmup = min(warmup, total - 1)
    lrs = [lr_at(s, total, warmup, 1.0) for s in range(total + 1)]
    assert all(0 <= v <= 1.0 + 1e-12 for v in lrs)
    tail = lrs[warmup:]
    assert all(a >= b - 1e-15 for a, b in zip(tail, tail[1:]))


def test_batch_indices_cover_each_epoch():
    n, b = 10, 4
    stream = np.concatenate([batch_indices(0, s, b, n) for s in range(5)])
    assert sorted(stream[:10]) == list(range(10)) and sorted(stream[10:20]) == list(range(10))
    np.testing.assert_array_equal(batch_indices(0, 3, b, n), batch_indices(0, 3, b, n))


def test_augment_is_seeded_and_preserves_pixels():
    x = np.random.default_rng(0).uniform(size=(6, 3, 8, 8))
    a, b = augment_batch(x, 1, 2), augment_batch(x, 1, 2)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(np.sort(a.reshape(6, -1)), np.sort(x.reshape(6, -1)))


def test_augment_shift_is_an_edge_padded_translation():
    x = np.random.default_rng(1).uniform(size=(5, 3, 8, 8))
    plain, shifted = augment_batch(x, 3, 4), augment_batch(x, 3, 4, max_shift=2)
    for p, q in zip(plain, shifted):
        # some translation (dy, dx) within range reproduces the shifted image
        pad = np.pad(p, ((0, 0), (2, 2), (2, 2)), mode="edge")
        hits = [(dy, dx) for dy in range(-2, 3) for dx in range(-2, 3)
                if np.array_equal(pad[:, 2 - dy:10 - dy, 2 - dx:10 - dx], q)]
        assert hits
        # the interior of the original survives intact
        dy, dx = hits[0]
        np.testing.assert_array_equal(q[:, max(dy, 0):8 + min(dy, 0), max(dx, 0):8 + min(dx, 0)],
                                      p[:, max(-dy, 0):8 + min(-dy, 0), max(-dx, 0):8 + min(-dx, 0)])


# ---------------------------------------------------------------- checkpoints

def _ckpt():
    rng = np.random.default_rng(0)
    ps = ParamSet()
    ps.add("a", rng.standard_normal((3, 4)).astype(np.float32))
    ps.add("b", rng.standard_normal(5))
    ps.add("gate", np.asarray(0.25, np.float32))
    st_ = OptimizerState()
    st_.m["a"], st_.v["a"], st_.t["a"] = rng.standard_normal((3, 4)), rng.uniform(size=(3, 4)), 7
    return Checkpoint(12, 99, "tcl", ps, st_)


def test_checkpoint_round_trip(tmp_path):
    ck = _ckpt()
    save_checkpoint(tmp_path / "c.ckpt", ck)
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert (back.step, back.seed, back.stage) == (12, 99, "tcl")
    for k in ck.params:
        assert back.params[k].dtype == ck.params[k].dtype
        assert back.params[k].shape == ck.params[k].shape
        np.testing.assert_array_equal(back.params[k].data, ck.params[k].data)
    np.testing.assert_array_equal(back.opt.m["a"], ck.opt.m["a"])
    np.testing.assert_array_equal(back.opt.v["a"], ck.opt.v["a"])
    assert back.opt.t == {"a": 7}


def test_checkpoint_version_and_truncation(tmp_path):
    save_checkpoint(tmp_path / "v.ckpt", _ckpt(), version=2)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.ckpt")
    save_checkpoint(tmp_path / "t.ckpt", _ckpt())
    raw = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")


# ---------------------------------------------------------------- pretraining

@pytest.mark.parametrize("exclude", [False, True])
def test_pretrain_initial_loss_near_chance(exclude):
    # default model size: random embeddings are nearly uncorrelated, so the
    # first loss sits close to chance level, log of the number of candidates
    # each row and column competes against
    samples = generate_samples(12, "train", 64)
    images = np.stack([s.image_float() for s in samples])
    caps = [s.caption for s in samples]
    _, hist, _ = pretrain_dual_encoder(
        images, caps, build_vocabulary(), ModelConfig(),
        PretrainConfig(batch=64, iterations=1, warmup=0, exclude_duplicates=exclude), 0)
    if exclude:
        dup = duplicate_pairs([caps[i] for i in batch_indices(0, 0, 64, len(caps))])
        chance = float(np.mean(np.log(64 - dup.sum(axis=1))))
    else:
        chance = math.log(64)
    assert hist[0] == pytest.approx(chance, rel=0.15)


def test_pretrain_bit_deterministic(data, encoder):
    images, caps, vocab = data
    _, hist2, _ = pretrain_dual_encoder(images, caps, vocab, MCFG,
                                        PretrainConfig(batch=8, iterations=3, warmup=1), 0)
    assert hist2 == encoder[1]


# ---------------------------------------------------------------- grounder training

TCFG = TrainConfig(batch=4, iterations=10, warmup=2, unfreeze_fraction=0.5, checkpoint_every=5)


def test_freeze_then_unfreeze_last_block(data, encoder):
    images, caps, vocab = data
    enc = encoder[0]
    params, _, _ = train_grounder(images, caps, vocab, enc, MCFG, TCFG, 0, stop_at=unfreeze_step(TCFG))
    for k, p in params.items():
        if k.startswith(("img.", "txt.")):
            np.testing.assert_array_equal(p.data, enc[k].data.astype(np.float32), err_msg=k)
    params, _, _ = train_grounder(images, caps, vocab, enc, MCFG, TCFG, 0)
    last = block_prefix(MCFG.blocks - 1)
    for k, p in params.items():
        if k.startswith(("img.", "txt.")):
            same = np.array_equal(p.data, enc[k].data.astype(np.float32))
            assert same != k.startswith(last), k
            assert p.requires_grad == k.startswith(last), k


def test_total_equals_weighted_recomputation(data, encoder):
    images, caps, vocab = data
    _, hist, _ = train_grounder(images, caps, vocab, encoder[0], MCFG, TCFG, 0, stop_at=4)
    w = LossWeights()
    for h in hist:
        bd = h["breakdown"]
        assert bd.total == weighted_total(bd.tcl_v, bd.tcl_f, bd.area, bd.tv, w)
        assert all(math.isfinite(v) for v in bd.as_row())


def test_resume_matches_uninterrupted(tmp_path, data, encoder):
    images, caps, vocab = data
    _, full, _ = train_grounder(images, caps, vocab, encoder[0], MCFG, TCFG, 0)
    _, first, _ = train_grounder(images, caps, vocab, encoder[0], MCFG, TCFG, 0,
                                 out_dir=tmp_path, stop_at=5)
    ck = load_checkpoint(tmp_path / "grounder.ckpt")
    assert ck.step == 5
    _, rest, _ = train_grounder(images, caps, vocab, encoder[0], MCFG, TCFG, 0,
                                out_dir=tmp_path, resume=ck)
    got = [h["breakdown"].as_row() for h in first + rest]
    want = [h["breakdown"].as_row() for h in full]
    assert got == want
    log_lines = (tmp_path / "train.log").read_text().splitlines()
    assert log_lines[0].split("\t") == ["step", "lr", "tcl_v", "tcl_f", "area", "tv", "total"]
    assert len(log_lines) == 11


def test_resume_seed_mismatch(tmp_path, data, encoder):
    images, caps, vocab = data
    train_grounder(images, caps, vocab, encoder[0], MCFG, TCFG, 0, out_dir=tmp_path, stop_at=5)
    with pytest.raises(CheckpointError):
        train_grounder(images, caps, vocab, encoder[0], MCFG, TCFG, 1,
                       resume=load_checkpoint(tmp_path / "grounder.ckpt"))
