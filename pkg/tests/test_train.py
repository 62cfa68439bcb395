from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmasr import metrics as X
from mmasr import model as M
from mmasr import synthdata as S
from mmasr.errors import InputError, TrainingDivergence
from mmasr.numcore import Tensor
from mmasr.train import Adam, TrainConfig, clip_global_norm, global_norm, length_batches, train

TINY = dict(enc_hidden=16, enc_layers=2, subsample_after=(1,), visual_proj=16, emb_dim=16, dec_hidden=32, att_dim=16)


@pytest.fixture(scope="module")
def vocab():
    return S.gen_vocab(seed=0)


@pytest.fixture(scope="module")
def small(vocab):
    return S.gen_corpus(vocab, 10, seed=11)


def tiny_config(**kw):
    base = dict(lr=3e-2, batch_size=5, max_epochs=3, patience=100, probabilities=(0.0,), model=M.ModelConfig(kind="HierAttnDF", **TINY))
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(InputError):
        TrainConfig(patience=0)
    with pytest.raises(InputError):
        TrainConfig(clip_norm=0.0)
    with pytest.raises(InputError):
        TrainConfig(probabilities=(0.2, 1.2))
    cfg = TrainConfig(model={"kind": "ShiftAdapt"})
    assert cfg.model.kind is M.FusionKind.SHIFT_ADAPT
    assert cfg.to_dict()["model"]["kind"] == "ShiftAdapt"


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_clipping_bounds_global_norm(seed, max_norm):
    rng = np.random.default_rng(seed)
    grads = [rng.normal(scale=rng.uniform(0.01, 50), size=s) for s in [(3, 4), (7,), (2, 2, 2)]]
    before = global_norm(grads)
    returned = clip_global_norm(grads, max_norm)
    assert returned == pytest.approx(before)
    after = global_norm(grads)
    assert after <= max_norm + 1e-9
    if before <= max_norm:
        assert after == pytest.approx(before)


def test_adam_zero_grad_leaves_params():
    p = {"w": Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)}
    p["w"].grad = np.zeros((2, 3))
    opt = Adam(p, lr=0.1)
    for _ in range(3):
        opt.step()
    np.testing.assert_array_equal(p["w"].data, np.arange(6.0).reshape(2, 3))


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    p["w"].grad = np.array([2.0, -0.5, 1e-3])
    Adam(p, lr=0.1).step()
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(p["w"].data, [-0.1, 0.1, -0.1], rtol=1e-4)


def test_length_batches_partition_and_grouping():
    rng = np.random.default_rng(0)
    lengths = rng.integers(50, 400, size=103)
    batches = length_batches(lengths, 10, np.random.default_rng(1))
    flat = sorted(i for b in batches for i in b)
    assert flat == list(range(103))
    assert sum(len(b) == 10 for b in batches) == 10
    # similar lengths share a batch: each batch spans a narrow slice of the sorted order
    rank = np.argsort(np.argsort(lengths, kind="stable"), kind="stable")
    for b in batches:
        r = rank[b]
        assert r.max() - r.min() < 15


def test_patience_one_constant_dev_wer_stops_after_two_epochs(vocab, small):
    def constant(model, corpus):
        return X.EvalReport(errors=5, ref_words=10)

    res = train(small, small, tiny_config(max_epochs=10, patience=1), vocab=M.Vocabulary(vocab.words), evaluate_fn=constant)
    assert len(res.log.epochs) == 2
    assert res.log.stopped_early
    assert res.log.best_epoch == 0


def test_best_epoch_has_min_dev_wer(vocab, small):
    wers = iter([0.8, 0.5, 0.6, 0.7])

    def scripted(model, corpus):
        w = next(wers)
        return X.EvalReport(errors=int(w * 10), ref_words=10)

    res = train(small, small, tiny_config(max_epochs=4, patience=5), vocab=M.Vocabulary(vocab.words), evaluate_fn=scripted)
    assert res.log.best_epoch == 1
    assert res.log.best_dev_wer == min(e.dev_wer for e in res.log.epochs)
    # the returned model is the epoch-1 checkpoint
    assert M.checkpoint_bytes(res.model) == res.checkpoint


def test_same_seed_is_deterministic(vocab, small):
    cfg = tiny_config(max_epochs=2)
    a = train(small, small, cfg, vocab=M.Vocabulary(vocab.words))
    b = train(small, small, cfg, vocab=M.Vocabulary(vocab.words))
    assert a.checkpoint == b.checkpoint
    assert a.log.to_dict() == b.log.to_dict()


def test_memorizes_ten_utterances(vocab, small):
    res = train(small, None, tiny_config(max_epochs=100), vocab=M.Vocabulary(vocab.words))
    assert res.log.epochs[res.log.best_epoch].train_loss < 0.1
    assert X.evaluate(res.model, small).wer.value == 0


def test_divergence_keeps_last_good(vocab, small):
    # one corrupt utterance makes the loss NaN partway through the epoch
    utts = list(small.utterances)
    bad = utts[7].frames.copy()
    bad[5] = np.nan
    utts[7] = replace(utts[7], frames=bad)
    with pytest.raises(TrainingDivergence) as info:
        train(small.with_utterances(utts), None, tiny_config(batch_size=2), vocab=M.Vocabulary(vocab.words))
    good = M.model_from_bytes(info.value.last_good)
    assert all(np.isfinite(t.data).all() for t in good.params.values())


def test_empty_corpus_rejected(vocab):
    with pytest.raises(InputError):
        train(S.gen_corpus(vocab, 0), None, tiny_config(), vocab=M.Vocabulary(vocab.words))
