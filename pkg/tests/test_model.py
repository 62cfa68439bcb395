import math

import numpy as np
import pytest

from mmasr import layers as L
from mmasr import model as M
from mmasr import numcore as nc
from mmasr.errors import ContractError, FormatError, InputError
from mmasr.numcore import Tape, grad_check

WORDS = ["dog", "cat", "runs", "red", "park", "on", "big", "two"]


def toy(kind="Unimodal", seed=0, **kw):
    cfg = dict(kind=kind, feat_dim=4, visual_dim=5, visual_proj=6, enc_hidden=3, enc_layers=2,
               subsample_after=(1,), emb_dim=4, dec_hidden=5, att_dim=4)
    cfg.update(kw)
    return M.FusionModel(M.ModelConfig(**cfg), M.Vocabulary(WORDS), seed=seed)


def randomize(model, rng, scale=0.4):
    for t in model.params.values():
        t.data[...] = rng.normal(scale=scale, size=t.shape)


def sample(rng, T=9, d=4, f=5):
    return rng.normal(size=(T, d)), rng.normal(size=f)


def test_vocabulary_reserved_tokens():
    v = M.Vocabulary(["dog", "<eos>", "cat", "dog"])
    assert v.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert v.encode(["cat", "zebra"]) == [5, v.unk]
    assert len(v) == 6


def test_fusion_kind_parse():
    assert M.FusionKind.parse("hier-attn-df") is M.FusionKind.HIER_ATTN_DF
    assert M.FusionKind.parse("unimodal") is M.FusionKind.UNIMODAL
    with pytest.raises(InputError):
        M.FusionKind.parse("late")


def test_shift_adapt_zero_shift_equals_unimodal():
    rng = np.random.default_rng(0)
    uni = toy("Unimodal", seed=3)
    sa = toy("ShiftAdapt", seed=3)
    frames, v = sample(rng)
    # shared parameters are drawn first, so they coincide across kinds
    sa.load_arrays({**uni.state_arrays(), "shift.w": np.zeros((4, 5)), "shift.b": np.zeros(4)})
    e1 = M.encode(uni, frames).states.data
    e2 = M.encode(sa, frames, v).states.data
    np.testing.assert_array_equal(e1, e2)
    r1 = M.greedy_decode(uni, frames, None, 6)
    r2 = M.greedy_decode(sa, frames, v, 6)
    assert r1.token_ids == r2.token_ids
    np.testing.assert_array_equal(r1.log_probs, r2.log_probs)


def test_shift_adapt_adds_shift_to_every_frame():
    rng = np.random.default_rng(1)
    sa = toy("ShiftAdapt")
    randomize(sa, rng)
    frames, v = sample(rng)
    x = M.encoder_input(sa, frames, v).data[0]
    s = sa.fusion["shift.w"].data @ v + sa.fusion["shift.b"].data
    np.testing.assert_allclose(x - frames, np.tile(s, (len(frames), 1)), rtol=0, atol=1e-12)


def test_multimodal_needs_visual_vector():
    rng = np.random.default_rng(2)
    frames, _ = sample(rng)
    for kind in ("ShiftAdapt", "EarlyDF", "HierAttnDF"):
        with pytest.raises(ContractError):
            M.encode(toy(kind), frames, None)


def test_encode_too_short():
    with pytest.raises(InputError):
        M.encode(toy(), np.zeros((1, 4)))


def test_hier_identical_items_give_half_weight():
    rng = np.random.default_rng(3)
    m = toy("HierAttnDF")
    randomize(m, rng)
    frames, v = sample(rng)
    enc = M.encode(m, frames, v)
    state = M.initial_state(m, 1)
    # make the projected visual vector equal the audio context of the step
    y = nc.take_rows(m.embedding, [1])
    h1 = L.gru_cell(m.gru1, y, state[0])
    z, _ = L.additive_attention(enc.keys, enc.states, h1, m.attention, enc.mask)
    enc.visual = nc.as_tensor(z.data.copy())
    _, _, rec = M.decode_step(m, enc, [1], state)
    assert rec.hier_weights[0, 1] == pytest.approx(0.5, abs=1e-12)
    assert rec.hier_weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_weighted_df_orthogonal_gate_is_half():
    rng = np.random.default_rng(4)
    m = toy("WeightedDF")
    randomize(m, rng)
    frames, v = sample(rng)
    enc = M.encode(m, frames, v)
    y = m.embedding.data[1]
    vhat = enc.visual.data[0]
    orth = vhat - (vhat @ y) / (y @ y) * y
    enc.visual = nc.as_tensor(orth[None, :])
    _, _, rec = M.decode_step(m, enc, [1], M.initial_state(m, 1))
    assert rec.lam[0] == pytest.approx(0.5, abs=1e-12)


def test_decode_step_rejects_bad_token():
    rng = np.random.default_rng(5)
    m = toy()
    frames, _ = sample(rng)
    enc = M.encode(m, frames)
    with pytest.raises(InputError):
        M.decode_step(m, enc, [len(m.vocab)], M.initial_state(m, 1))


def test_uniform_output_loss_is_log_vocab():
    rng = np.random.default_rng(6)
    m = toy("HierAttnDF")
    m.out_w.data[...] = 0.0
    frames, v = sample(rng)
    loss = M.forward_loss(m, frames, v, ["dog", "runs"]).item()
    assert loss == pytest.approx(math.log(len(m.vocab)), rel=1e-12)


def test_eos_only_target_loss():
    rng = np.random.default_rng(7)
    m = toy()
    randomize(m, rng)
    frames, _ = sample(rng)
    loss = M.forward_loss(m, frames, None, []).item()
    logits, _, _ = M.decode_step(m, M.encode(m, frames), [m.vocab.bos], M.initial_state(m, 1))
    z = logits.data[0]
    logp = z - np.log(np.exp(z - z.max()).sum()) - z.max()
    assert loss == pytest.approx(-logp[m.vocab.eos], rel=1e-12)


def test_padded_batch_matches_single_utterance_loss():
    rng = np.random.default_rng(8)
    for kind in M.FusionKind:
        m = toy(kind)
        randomize(m, rng)
        f1, v1 = sample(rng, T=7)
        f2, v2 = sample(rng, T=12)
        words1, words2 = ["dog", "runs"], ["two", "red", "cat", "on", "park"]
        single = M.forward_loss(m, f1, v1, words1).item()
        vis = [v1, v2] if kind.multimodal else None
        b = M.make_batch(m, [f1, f2], vis, [words1, words2])
        # per-utterance losses from a padded batch: reweight by hand
        b2 = M.make_batch(m, [f1, f2], vis, [words1, words2])
        b2.targets[1, :] = m.vocab.pad
        padded = M.batch_loss(m, b2).item()
        assert padded == pytest.approx(single, abs=1e-9)
        assert math.isfinite(M.batch_loss(m, b).item())


def test_unimodal_ignores_visual_vector():
    rng = np.random.default_rng(9)
    m = toy()
    randomize(m, rng)
    frames, v = sample(rng)
    a = M.greedy_decode_batch(m, [frames], [v], 6)[0]
    b = M.greedy_decode_batch(m, [frames], [v * -3.0 + 1.0], 6)[0]
    assert a.token_ids == b.token_ids and a.log_probs == b.log_probs


def test_max_len_one_and_trace_lengths():
    rng = np.random.default_rng(10)
    m = toy("HierAttnDF")
    randomize(m, rng)
    frames, v = sample(rng)
    r = M.greedy_decode(m, frames, v, max_len=1)
    assert len(r.token_ids) <= 1
    r = M.greedy_decode(m, frames, v, max_len=8)
    assert len(r.hier_weights) == len(r.token_ids) == len(r.audio_weights)
    for a, w in r.hier_weights:
        assert a >= 0 and w >= 0 and a + w == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(InputError):
        M.greedy_decode(m, frames, v, max_len=0)


def test_non_hier_kinds_have_no_hier_trace():
    rng = np.random.default_rng(11)
    m = toy("MiddleDF")
    frames, v = sample(rng)
    assert M.greedy_decode(m, frames, v, 4).hier_weights is None


@pytest.mark.parametrize("kind", [k.value for k in M.FusionKind])
def test_full_model_grad_check(kind):
    rng = np.random.default_rng(12)
    m = toy(kind)
    randomize(m, rng)
    frames = [rng.normal(size=(8, 4)), rng.normal(size=(6, 4))]
    vis = [rng.normal(size=5), rng.normal(size=5)] if m.kind.multimodal else None
    batch = M.make_batch(m, frames, vis, [["dog", "runs"], ["red", "cat"]])
    params = list(m.params.values())
    rep = grad_check(lambda _: M.batch_loss(m, batch), params)
    assert rep.passed, rep
    if kind != "Unimodal":
        # every fusion parameter receives gradient
        m.zero_grad()
        with Tape() as tape:
            loss = M.batch_loss(m, batch)
        tape.backward(loss)
        for name, t in m.fusion.items():
            assert np.abs(t.grad).max() > 0, name


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    m = toy("HierAttnDF")
    randomize(m, rng)
    frames, v = sample(rng)
    before = M.forward_loss(m, frames, v, ["dog", "runs"]).item()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    M.save_checkpoint(m, p1)
    loaded = M.load_checkpoint(p1)
    M.save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for k, t in m.params.items():
        np.testing.assert_array_equal(t.data, loaded.params[k].data)
    assert M.forward_loss(loaded, frames, v, ["dog", "runs"]).item() == before
    r1, r2 = M.greedy_decode(m, frames, v, 6), M.greedy_decode(loaded, frames, v, 6)
    assert r1.token_ids == r2.token_ids and r1.hier_weights == r2.hier_weights


def test_checkpoint_float32_blobs(tmp_path):
    m = toy("EarlyDF", dtype="float32")
    M.save_checkpoint(m, tmp_path / "m.ckpt")
    loaded = M.load_checkpoint(tmp_path / "m.ckpt", expected_kind="EarlyDF")
    assert loaded.dtype is np.float32
    assert M.checkpoint_bytes(loaded) == M.checkpoint_bytes(m)


def test_checkpoint_errors(tmp_path):
    m = toy("MiddleDF")
    raw = M.checkpoint_bytes(m)
    (tmp_path / "t.ckpt").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="expected .* found"):
        M.load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "ok.ckpt").write_bytes(raw)
    with pytest.raises(FormatError, match="expected fusion kind HierAttnDF, found MiddleDF"):
        M.load_checkpoint(tmp_path / "ok.ckpt", expected_kind="HierAttnDF")
    with pytest.raises(FormatError, match="magic"):
        M.model_from_bytes(b"NOTACKPT" + raw[8:])
    bumped = raw[:8] + (99).to_bytes(4, "little") + raw[12:]
    with pytest.raises(FormatError, match="expected checkpoint version 1, found 99"):
        M.model_from_bytes(bumped)
