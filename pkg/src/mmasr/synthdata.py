"""Synthetic grounded captions with exactly known acoustics and visuals.

Every word has a fixed acoustic prototype (``L`` frames of ``d`` features)
and, if it is groundable, a visual embedding.  An utterance is drawn from a
slot grammar with soft word associations (a noun prefers some verb and
colour, a verb some adverb and place), rendered as silence + prototypes +
silence with additive Gaussian noise, and paired with an "image": the mean
embedding of its groundable words plus a little visual noise.  Adverbs and
function words leave no trace in the image.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Utterance, WordAlignment
from .errors import AmbiguousMatch, GenerationError, InputError

CATEGORIES = ("NOUN", "PLACE", "ADJ", "COLOR", "VERB", "ADV", "CARDINAL", "FUNC")

# visual embedding scale per category; 0 means not groundable
GROUNDING = {"NOUN": 1.0, "PLACE": 1.0, "ADJ": 1.0, "COLOR": 1.0, "CARDINAL": 1.0, "VERB": 0.5, "ADV": 0.0, "FUNC": 0.0}

DEFAULT_SIZES = {"NOUN": 12, "PLACE": 8, "ADJ": 8, "COLOR": 6, "VERB": 8, "ADV": 5, "CARDINAL": 5, "FUNC": 4}

SURFACE = {
    "NOUN": ["dog", "girl", "boy", "man", "woman", "horse", "ball", "bike", "child", "cat", "bird", "car"],
    "PLACE": ["beach", "park", "street", "field", "water", "snow", "grass", "road"],
    "ADJ": ["young", "small", "big", "old", "little", "tall", "wet", "happy"],
    "COLOR": ["red", "blue", "green", "black", "white", "brown"],
    "VERB": ["runs", "jumps", "plays", "sits", "walks", "swims", "climbs", "rides"],
    "ADV": ["quickly", "slowly", "happily", "together", "outside"],
    "CARDINAL": ["two", "three", "four", "five", "six"],
    "FUNC": ["on", "in", "at", "near"],
}


@dataclass(frozen=True)
class Slot:
    category: str
    prob: float = 1.0  # inclusion probability
    group: int | None = None  # slots sharing a group appear together


# dependent category -> head category whose word it prefers a partner for
ASSOCIATIONS = {"VERB": "NOUN", "COLOR": "NOUN", "ADV": "VERB", "PLACE": "VERB"}

# [CARDINAL?] [ADJ?] [COLOR?] NOUN VERB [ADV?] [FUNC PLACE]?
DEFAULT_GRAMMAR = (
    Slot("CARDINAL", 0.3),
    Slot("ADJ", 0.5),
    Slot("COLOR", 0.5),
    Slot("NOUN"),
    Slot("VERB"),
    Slot("ADV", 0.5),
    Slot("FUNC", 0.6, group=1),
    Slot("PLACE", 0.6, group=1),
)


@dataclass
class SynthVocab:
    words: list  # surface forms, ordered by category then index
    tags: list
    prototypes: np.ndarray  # [W x L x d]
    embeddings: np.ndarray  # [W x d_v], zero rows for non-groundable words
    silence: np.ndarray  # [d]
    prefers: dict = field(default_factory=dict)  # dependent category -> {head word: preferred word}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def adverb_of(self) -> dict:
        return dict(self.prefers.get("ADV", {}))

    @property
    def index(self) -> dict:
        return {w: i for i, w in enumerate(self.words)}

    @property
    def categories(self) -> dict:
        return dict(zip(self.words, self.tags))

    def by_category(self, tag: str) -> list:
        return [i for i, t in enumerate(self.tags) if t == tag]

    @property
    def groundable(self) -> np.ndarray:
        return np.abs(self.embeddings).sum(axis=1) > 0

    @property
    def frames_per_word(self) -> int:
        return int(self.prototypes.shape[1])


def _names(tag: str, n: int) -> list:
    base = SURFACE.get(tag, [])
    return [base[i] if i < len(base) else f"{tag.lower()}{i}" for i in range(n)]


def gen_vocab(
    sizes: dict | None = None,
    d: int = 24,
    d_v: int = 64,
    L: int = 12,
    margin: float = 8.0,
    seed: int = 0,
    silence_level: float = -2.5,
    max_tries: int = 200,
) -> SynthVocab:
    """Draw acoustic prototypes (pairwise Frobenius distance > margin) and visual embeddings."""
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    for tag, n in sizes.items():
        if tag not in CATEGORIES:
            raise InputError(f"unknown category {tag!r}")
        if n < 1:
            raise InputError(f"category {tag} needs at least one word, got {n}")
    rng = np.random.default_rng([seed, 0])
    words, tags = [], []
    for tag in CATEGORIES:
        if tag in sizes:
            words += _names(tag, sizes[tag])
            tags += [tag] * sizes[tag]
    W = len(words)
    silence = np.full((1, d), silence_level)
    protos = np.zeros((W, L, d))
    for w in range(W):
        for _ in range(max_tries):
            cand = rng.normal(size=(L, d))
            dists = [np.linalg.norm(cand - protos[k]) for k in range(w)]
            dists.append(np.linalg.norm(cand - silence))
            if min(dists) > margin:
                protos[w] = cand
                break
        else:
            raise GenerationError(
                f"could not place prototype {w + 1} of {W} with margin {margin} after {max_tries} draws; "
                f"try a smaller margin (typical distances are about {np.sqrt(2 * L * d):.1f})"
            )
    emb = rng.normal(size=(W, d_v))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    emb *= np.array([GROUNDING[t] for t in tags])[:, None]
    prefers = {}
    for dep, head in ASSOCIATIONS.items():
        deps = [words[i] for i, t in enumerate(tags) if t == dep]
        heads = [words[i] for i, t in enumerate(tags) if t == head]
        if deps and heads:
            prefers[dep] = {h: deps[int(rng.integers(len(deps)))] for h in heads}
    return SynthVocab(words, tags, protos, emb, silence[0], prefers)


@dataclass
class Noise:
    acoustic: float = 0.3
    visual: float = 0.02
    silence_s: float = 0.3  # leading and trailing silence
    association: float = 0.6  # chance a dependent word is its head's preferred partner


def _depth(category: str) -> int:
    d = 0
    while category in ASSOCIATIONS:
        category = ASSOCIATIONS[category]
        d += 1
    return d


def sample_tokens(vocab: SynthVocab, grammar, rng, association: float = 0.6) -> list:
    """Draw slot presence in grammar order, then words with heads before dependents."""
    words = vocab.words
    group_on = {}
    present = []
    for slot in grammar:
        if slot.group is not None:
            if slot.group not in group_on:
                group_on[slot.group] = rng.random() < slot.prob
            on = group_on[slot.group]
        else:
            on = slot.prob >= 1.0 or rng.random() < slot.prob
        if on:
            present.append(slot.category)
    picks: dict = {}
    for k in sorted(range(len(present)), key=lambda k: _depth(present[k])):
        cat = present[k]
        choices = vocab.by_category(cat)
        if not choices:
            raise InputError(f"grammar references category {cat} with no words")
        pick = words[choices[int(rng.integers(len(choices)))]]
        head = ASSOCIATIONS.get(cat)
        if head in present:
            head_word = picks[present.index(head)]
            preferred = vocab.prefers.get(cat, {}).get(head_word)
            if preferred is not None and rng.random() < association:
                pick = preferred
        picks[k] = pick
    return [picks[k] for k in range(len(present))]


def visual_vector(vocab: SynthVocab, tokens, noise_rng=None, sigma: float = 0.0) -> np.ndarray:
    """Mean embedding of the groundable tokens plus optional Gaussian noise."""
    idx = vocab.index
    ground = vocab.groundable
    rows = [idx[w] for w in tokens if ground[idx[w]]]
    d_v = vocab.embeddings.shape[1]
    v = vocab.embeddings[rows].mean(axis=0) if rows else np.zeros(d_v)
    if sigma > 0:
        v = v + sigma * noise_rng.normal(size=d_v)
    return v


def render(vocab: SynthVocab, tokens, rng, sigma: float, frame_rate: float = 100.0, silence_s: float = 0.3):
    """Frames and exact alignments for a token sequence."""
    idx = vocab.index
    L = vocab.frames_per_word
    pad = int(round(silence_s * frame_rate))
    d = vocab.prototypes.shape[2]
    T = 2 * pad + L * len(tokens)
    frames = np.tile(vocab.silence, (T, 1))
    aligns = []
    for k, w in enumerate(tokens):
        a = pad + k * L
        frames[a : a + L] = vocab.prototypes[idx[w]]
        aligns.append(WordAlignment(k, a / frame_rate, (a + L) / frame_rate))
    if sigma > 0:
        frames = frames + sigma * rng.normal(size=(T, d))
    return frames.astype(np.float32), aligns


def gen_corpus(
    vocab: SynthVocab,
    n_utterances: int,
    grammar=DEFAULT_GRAMMAR,
    noise: Noise | None = None,
    seed: int = 0,
    prefix: str = "utt",
    frame_rate: float = 100.0,
) -> Corpus:
    noise = noise or Noise()
    for slot in grammar:
        if slot.category not in CATEGORIES or not vocab.by_category(slot.category):
            raise InputError(f"grammar slot {slot.category} has no words in this vocabulary")
    cats = vocab.categories
    utts = []
    for i in range(n_utterances):
        rng = np.random.default_rng([seed, i, 0])
        tokens = sample_tokens(vocab, grammar, rng, noise.association)
        frames, aligns = render(vocab, tokens, rng, noise.acoustic, frame_rate, noise.silence_s)
        # the image has its own stream so it depends on nothing but (seed, i)
        vrng = np.random.default_rng([seed, i, 1])
        v = visual_vector(vocab, tokens, vrng, noise.visual)
        utts.append(Utterance(f"{prefix}{i:05d}", tokens, frames, aligns, v.astype(np.float32), [cats[w] for w in tokens]))
    return Corpus(utts, frame_rate, vocab.silence.astype(np.float32), 0.0, 1.0, cats)


def gen_splits(vocab: SynthVocab, sizes=(2000, 200, 200), noise: Noise | None = None, seed: int = 0) -> dict:
    names = ("train", "dev", "test")
    return {n: gen_corpus(vocab, k, noise=noise, seed=seed * 10 + j + 1, prefix=f"{n}") for j, (n, k) in enumerate(zip(names, sizes))}


def nearest_prototype_decode(vocab: SynthVocab, frames: np.ndarray, alignments, frame_rate: float = 100.0) -> list:
    """Label each aligned segment with the closest prototype (generator self-check)."""
    out = []
    L = vocab.frames_per_word
    for a in alignments:
        s = int(round(a.start_s * frame_rate))
        seg = frames[s : s + L]
        dist = ((vocab.prototypes - seg[None]) ** 2).sum(axis=(1, 2))
        out.append(vocab.words[int(dist.argmin())])
    return out


def oracle_visual_decode(vocab: SynthVocab, v: np.ndarray, grammar=DEFAULT_GRAMMAR, tol: float = 1e-6) -> list:
    """Recover the groundable word bag from a visual vector.

    Every presence pattern of the grammar's groundable slots fixes the count
    ``k`` of averaged embeddings.  ``k v`` is matched slot by slot, each slot
    refined against what the others leave over, and the pattern whose mean
    lies closest to ``v`` wins.  Two patterns with different bags whose
    residuals differ by at most ``tol`` raise :class:`AmbiguousMatch`.
    """
    v = np.asarray(v, dtype=np.float64)
    emb = vocab.embeddings
    slots = [s for s in grammar if GROUNDING[s.category] > 0]
    optional = [k for k, s in enumerate(slots) if s.prob < 1.0]
    # slots in a shared group toggle together
    toggles: list = []
    groups: dict = {}
    for k in optional:
        g = slots[k].group
        if g is None:
            toggles.append([k])
        elif g in groups:
            groups[g].append(k)
        else:
            groups[g] = [k]
            toggles.append(groups[g])
    scored = []
    for on in itertools.product((False, True), repeat=len(toggles)):
        present = [k for k, s in enumerate(slots) if s.prob >= 1.0]
        for flag, ks in zip(on, toggles):
            if flag:
                present += ks
        present.sort()
        if not present:
            scored.append((float(np.linalg.norm(v)), ()))
            continue
        target = v * len(present)
        rows = [vocab.by_category(slots[k].category) for k in present]
        picks = [r[int(np.argmax(emb[r] @ target))] for r in rows]
        for _ in range(3):
            # coordinate refinement against the residual of the other slots
            for j, r in enumerate(rows):
                rest = target - emb[picks].sum(axis=0) + emb[picks[j]]
                picks[j] = r[int(np.argmin(((rest[None, :] - emb[r]) ** 2).sum(axis=1)))]
        total = emb[picks].sum(axis=0)
        scored.append((float(np.linalg.norm(v - total / len(present))), tuple(sorted(vocab.words[i] for i in picks))))
        # single-word swaps, so near-ties inside a slot are noticed too
        for j, r in enumerate(rows):
            for alt in r:
                if alt != picks[j]:
                    swapped = picks[:j] + [alt] + picks[j + 1 :]
                    res = float(np.linalg.norm(v - (total - emb[picks[j]] + emb[alt]) / len(present)))
                    scored.append((res, tuple(sorted(vocab.words[i] for i in swapped))))
    scored.sort()
    best_res, best_bag = scored[0]
    close = [bag for res, bag in scored[1:] if res - best_res <= tol and bag != best_bag]
    if close:
        raise AmbiguousMatch(f"{len(close) + 1} word bags fit within {tol}", [list(best_bag)] + [list(b) for b in close])
    return list(best_bag)


def groundable_bag(vocab: SynthVocab, tokens) -> list:
    idx = vocab.index
    ground = vocab.groundable
    return sorted(w for w in tokens if ground[idx[w]])
