import itertools

import numpy as np
import pytest

from mmasr import synthdata as S
from mmasr.errors import AmbiguousMatch, GenerationError


@pytest.fixture(scope="module")
def vocab():
    return S.gen_vocab(seed=0)


def test_vocab_layout(vocab):
    assert len(vocab) == sum(S.DEFAULT_SIZES.values())
    assert vocab.prototypes.shape == (len(vocab), 12, 24)
    assert vocab.embeddings.shape == (len(vocab), 64)
    assert len(set(vocab.words)) == len(vocab)


def test_groundability_encoding(vocab):
    norms = np.linalg.norm(vocab.embeddings, axis=1)
    for w, t, n in zip(vocab.words, vocab.tags, norms):
        assert n == pytest.approx(S.GROUNDING[t], abs=1e-12), w
    assert not vocab.groundable[vocab.by_category("ADV")].any()
    assert vocab.groundable[vocab.by_category("NOUN")].all()


def test_prototype_margin_by_pair_scan(vocab):
    protos = vocab.prototypes
    dmin = min(np.linalg.norm(protos[a] - protos[b]) for a, b in itertools.combinations(range(len(protos)), 2))
    assert dmin > 8.0


def test_vocab_deterministic():
    a, b = S.gen_vocab(seed=5), S.gen_vocab(seed=5)
    np.testing.assert_array_equal(a.prototypes, b.prototypes)
    np.testing.assert_array_equal(a.embeddings, b.embeddings)
    assert a.words == b.words and a.prefers == b.prefers


def test_unattainable_margin():
    with pytest.raises(GenerationError, match="smaller margin"):
        S.gen_vocab({"NOUN": 2}, d=2, L=1, margin=100.0, max_tries=20)


def test_noiseless_corpus_is_prototype_concatenation(vocab):
    c = S.gen_corpus(vocab, 5, noise=S.Noise(acoustic=0.0, visual=0.0), seed=3)
    idx = vocab.index
    for u in c:
        body = np.concatenate([vocab.prototypes[idx[w]] for w in u.words])
        np.testing.assert_array_equal(u.frames[30:-30], body.astype(np.float32))
        np.testing.assert_array_equal(u.frames[:30], np.tile(vocab.silence, (30, 1)).astype(np.float32))
        np.testing.assert_allclose(u.visual, S.visual_vector(vocab, u.words), atol=1e-7)


def test_empty_corpus(vocab):
    assert len(S.gen_corpus(vocab, 0)) == 0


def test_grammar_shape(vocab):
    c = S.gen_corpus(vocab, 300, seed=4)
    order = {t: k for k, t in enumerate(["CARDINAL", "ADJ", "COLOR", "NOUN", "VERB", "ADV", "FUNC", "PLACE"])}
    for u in c:
        ranks = [order[t] for t in u.tags]
        assert ranks == sorted(ranks)
        assert u.tags.count("NOUN") == 1 and u.tags.count("VERB") == 1
        assert ("FUNC" in u.tags) == ("PLACE" in u.tags)


def test_nearest_prototype_recovers_noiseless_transcripts(vocab):
    c = S.gen_corpus(vocab, 100, noise=S.Noise(acoustic=0.0), seed=5)
    for u in c:
        assert S.nearest_prototype_decode(vocab, u.frames, u.alignments) == u.words


def test_alignments_tile_speech(vocab):
    c = S.gen_corpus(vocab, 20, seed=6)
    for u in c:
        a = u.alignments
        assert a[0].start_s == pytest.approx(0.3)
        assert a[-1].end_s == pytest.approx(u.n_frames / 100 - 0.3)
        for x, y in zip(a, a[1:]):
            assert x.end_s == y.start_s


def test_corpus_reproducible(vocab):
    a, b = S.gen_corpus(vocab, 10, seed=7), S.gen_corpus(vocab, 10, seed=7)
    for x, y in zip(a, b):
        assert x.words == y.words
        assert x.frames.tobytes() == y.frames.tobytes()
        assert x.visual.tobytes() == y.visual.tobytes()


def test_visual_vector_ignores_non_groundable_tokens(vocab):
    # same groundable words, different adverb, same noise stream -> same vector
    adv = [vocab.words[i] for i in vocab.by_category("ADV")]
    base = ["red", "dog", "runs"]
    vs = [S.visual_vector(vocab, base + [a], np.random.default_rng(9), 0.02) for a in adv]
    for v in vs[1:]:
        np.testing.assert_array_equal(v, vs[0])


def test_oracle_visual_trivial_cases(vocab):
    assert S.oracle_visual_decode(vocab, vocab.embeddings[vocab.index["dog"]], grammar=(S.Slot("NOUN"),)) == ["dog"]
    func_only = (S.Slot("FUNC"), S.Slot("ADV", 0.5))
    assert S.oracle_visual_decode(vocab, np.zeros(64), grammar=func_only) == []


def test_oracle_visual_ambiguity(vocab):
    # a vector halfway between two nouns fits both equally well
    e = vocab.embeddings
    v = 0.5 * (e[vocab.index["dog"]] + e[vocab.index["cat"]])
    with pytest.raises(AmbiguousMatch) as info:
        S.oracle_visual_decode(vocab, v, grammar=(S.Slot("NOUN"),), tol=1e-9)
    assert len(info.value.candidates) == 2


def test_oracle_visual_monte_carlo(vocab):
    c = S.gen_corpus(vocab, 1000, seed=8)
    hits = sum(S.oracle_visual_decode(vocab, u.visual) == S.groundable_bag(vocab, u.words) for u in c)
    assert hits >= 990


def test_associations_shape_the_corpus(vocab):
    strict = S.gen_corpus(vocab, 200, noise=S.Noise(association=1.0), seed=9)
    for u in strict:
        w = dict(zip(u.tags, u.words))
        for dep, head in S.ASSOCIATIONS.items():
            if dep in w and head in w:
                assert w[dep] == vocab.prefers[dep][w[head]]
    loose = S.gen_corpus(vocab, 2000, noise=S.Noise(association=0.0), seed=9)
    pairs = [(u.words[u.tags.index("NOUN")], u.words[u.tags.index("VERB")]) for u in loose]
    hits = sum(v == vocab.prefers["VERB"][n] for n, v in pairs) / len(pairs)
    assert abs(hits - 1 / 8) < 0.03  # uniform over eight verbs
