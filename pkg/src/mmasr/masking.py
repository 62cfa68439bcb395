"""Word-level masking of aligned feature sequences.

A masked word's alignment is widened by a fraction of its duration on both
sides (absorbing alignment error), overlapping or touching widened spans are
merged, and each merged span is cut out and replaced by a fixed-length fill
block: the corpus silence vector repeated, or i.i.d. Gaussian frames.  The
transcript and visual vector are never touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Utterance, WordAlignment
from .errors import InputError

SILENCE = "silence"
WHITENOISE = "whitenoise"
FILL_KINDS = (SILENCE, WHITENOISE)


@dataclass(frozen=True)
class Scheme:
    """How masked indices were chosen: none, rand(p), entity(words) or category(tag)."""

    kind: str = "none"
    prob: float = 0.0
    words: tuple = ()
    tag: str | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "rand":
            d["prob"] = self.prob
        if self.kind == "entity":
            d["words"] = list(self.words)
        if self.kind == "category":
            d["tag"] = self.tag
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scheme":
        return cls(d["kind"], float(d.get("prob", 0.0)), tuple(d.get("words", ())), d.get("tag"))


@dataclass
class Fill:
    kind: str = SILENCE
    silence: np.ndarray | None = None
    mean: float = 0.0
    std: float = 1.0
    seconds: float = 0.5

    def __post_init__(self):
        if self.kind not in FILL_KINDS:
            raise InputError(f"fill must be one of {FILL_KINDS}, got {self.kind!r}")

    @classmethod
    def for_corpus(cls, corpus: Corpus, kind: str = SILENCE, seconds: float = 0.5) -> "Fill":
        silence = corpus.silence_vector() if kind == SILENCE else None
        return cls(kind, silence, corpus.noise_mean, corpus.noise_std, seconds)

    def frames(self, n: int, d: int, rng) -> np.ndarray:
        if self.kind == SILENCE:
            if self.silence is None:
                raise InputError("silence fill needs a silence vector")
            return np.tile(np.asarray(self.silence, dtype=np.float32), (n, 1))
        return (self.mean + self.std * rng.normal(size=(n, d))).astype(np.float32)


@dataclass
class MaskPlan:
    masked: tuple = ()  # sorted word indices
    fill: str = SILENCE
    scheme: Scheme = field(default_factory=Scheme)
    seed: tuple = ()  # entropy for the white-noise stream
    spans: tuple = ()  # merged (start, end) frames in the source sequence
    fill_spans: tuple = ()  # where each fill block landed in the output
    in_place: bool = False

    @property
    def realized(self) -> bool:
        return bool(self.spans) or not self.masked


def expand_alignment(a: WordAlignment, factor: float = 0.25) -> tuple:
    """Widen ``a`` by ``factor`` of its duration on each side; start clipped at 0."""
    if factor < 0:
        raise InputError(f"expansion factor must be >= 0, got {factor}")
    d = a.end_s - a.start_s
    return max(0.0, a.start_s - factor * d), a.end_s + factor * d


def sample_mask(n_words: int, p: float, seed) -> set:
    if not 0.0 <= p <= 1.0:
        raise InputError(f"mask probability must be in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    draws = rng.random(n_words)
    return {int(i) for i in np.flatnonzero(draws < p)}


def merge_spans(spans) -> list:
    """Sort and merge overlapping or touching half-open spans."""
    out: list = []
    for s, e in sorted(spans):
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def frame_spans(alignments, masked, n_frames: int, frame_rate: float, factor: float = 0.25) -> list:
    by_index = {a.index: a for a in alignments}
    raw = []
    for i in sorted(masked):
        if i not in by_index:
            raise InputError(f"masked word {i} has no alignment")
        s, e = expand_alignment(by_index[i], factor)
        # widen to whole frames; the epsilon keeps exact boundaries exact
        fs = min(n_frames, max(0, math.floor(s * frame_rate + 1e-9)))
        fe = min(n_frames, math.ceil(e * frame_rate - 1e-9))
        if fe > fs:
            raw.append((fs, fe))
    return merge_spans(raw)


def apply_mask(
    frames: np.ndarray,
    alignments,
    plan: MaskPlan,
    frame_rate: float = 100.0,
    fill: Fill | None = None,
    factor: float = 0.25,
    in_place: bool | None = None,
):
    """Cut every merged span of ``plan.masked`` and splice in a fill block.

    Returns the new frames and a copy of ``plan`` with the realized spans.
    With ``in_place`` the span frames are overwritten instead, so the length
    is preserved.
    """
    if frame_rate <= 0:
        raise InputError(f"frame rate must be positive, got {frame_rate}")
    fill = fill or Fill(plan.fill)
    in_place = plan.in_place if in_place is None else in_place
    frames = np.asarray(frames, dtype=np.float32)
    T, d = frames.shape
    spans = frame_spans(alignments, plan.masked, T, frame_rate, factor)
    rng = np.random.default_rng(list(plan.seed) + [1]) if fill.kind == WHITENOISE else None
    n_fill = int(round(fill.seconds * frame_rate))
    pieces, fill_spans = [], []
    cursor = out_len = 0
    for s, e in spans:
        pieces.append(frames[cursor:s])
        out_len += s - cursor
        block = fill.frames(e - s if in_place else n_fill, d, rng)
        pieces.append(block)
        fill_spans.append((out_len, out_len + len(block)))
        out_len += len(block)
        cursor = e
    pieces.append(frames[cursor:])
    new = np.concatenate(pieces) if spans else frames.copy()
    realized = MaskPlan(tuple(sorted(plan.masked)), fill.kind, plan.scheme, tuple(plan.seed), tuple(spans), tuple(fill_spans), in_place)
    return new, realized


def mask_utterance(utt: Utterance, plan: MaskPlan, frame_rate: float, fill: Fill, uid: str | None = None) -> Utterance:
    frames, realized = apply_mask(utt.frames, utt.alignments, plan, frame_rate, fill)
    return Utterance(uid or utt.uid, list(utt.words), frames, list(utt.alignments), utt.visual, utt.tags, realized, utt.uid)


@dataclass
class AugmentedCorpus:
    source: Corpus
    probabilities: tuple
    variants: list  # variants[i][j]: utterance i masked at probabilities[j]

    def flat(self) -> Corpus:
        return self.source.with_utterances(u for group in self.variants for u in group)

    def level(self, j: int) -> Corpus:
        return self.source.with_utterances(group[j] for group in self.variants)

    def __len__(self) -> int:
        return sum(len(g) for g in self.variants)


def variant_id(uid: str, p: float) -> str:
    return f"{uid}_p{int(round(p * 100)):02d}"


def build_augmented_corpus(corpus: Corpus, probabilities, fill: str | Fill = SILENCE, seed: int = 0) -> AugmentedCorpus:
    """One RandWordMask variant per (utterance, probability), seeded by position."""
    probabilities = tuple(float(p) for p in probabilities)
    if not probabilities:
        raise InputError("need at least one masking probability")
    for p in probabilities:
        if not 0.0 <= p <= 1.0:
            raise InputError(f"mask probability must be in [0, 1], got {p}")
    fill = fill if isinstance(fill, Fill) else Fill.for_corpus(corpus, fill)
    variants = []
    for i, utt in enumerate(corpus.utterances):
        group = []
        for j, p in enumerate(probabilities):
            masked = sample_mask(len(utt.words), p, [seed, i, j, 0])
            plan = MaskPlan(tuple(sorted(masked)), fill.kind, Scheme("rand", p), (seed, i, j))
            group.append(mask_utterance(utt, plan, corpus.frame_rate, fill, variant_id(utt.uid, p)))
        variants.append(group)
    return AugmentedCorpus(corpus, probabilities, variants)


def build_entity_mask(corpus: Corpus, entity_words) -> list:
    """Plans masking every occurrence of ``entity_words`` (and nothing else)."""
    words = frozenset(entity_words)
    if not words:
        raise InputError("entity word set is empty")
    scheme = Scheme("entity", words=tuple(sorted(words)))
    return [MaskPlan(tuple(i for i, w in enumerate(u.words) if w in words), SILENCE, scheme) for u in corpus.utterances]


def category_plans(corpus: Corpus, tag: str, known=None) -> list:
    known = set(known) if known is not None else set(corpus.categories.values())
    if tag not in known:
        raise InputError(f"unknown category {tag!r}; corpus has {sorted(known)}")
    scheme = Scheme("category", tag=tag)
    plans = []
    for u in corpus.utterances:
        tags = u.tags if u.tags is not None else [corpus.categories.get(w) for w in u.words]
        plans.append(MaskPlan(tuple(i for i, t in enumerate(tags) if t == tag), SILENCE, scheme))
    return plans


def mask_corpus(corpus: Corpus, plans, fill: str | Fill = SILENCE, seed: int = 0, suffix: str = "") -> Corpus:
    fill = fill if isinstance(fill, Fill) else Fill.for_corpus(corpus, fill)
    out = []
    for i, (utt, plan) in enumerate(zip(corpus.utterances, plans)):
        plan = MaskPlan(plan.masked, fill.kind, plan.scheme, (seed, i), in_place=plan.in_place)
        out.append(mask_utterance(utt, plan, corpus.frame_rate, fill, utt.uid + suffix))
    return corpus.with_utterances(out)


def build_category_testset(corpus: Corpus, tag: str, fill: str | Fill = SILENCE, seed: int = 0, known=None) -> Corpus:
    """Mask every occurrence of words tagged ``tag``; ids get a ``_<tag>`` suffix."""
    return mask_corpus(corpus, category_plans(corpus, tag, known), fill, seed, suffix=f"_{tag.lower()}")


def reapply(utt: Utterance, source: Utterance, frame_rate: float, fill: Fill) -> np.ndarray:
    """Recompute a masked utterance's frames from its source and stored plan."""
    frames, _ = apply_mask(source.frames, source.alignments, utt.plan, frame_rate, fill)
    return frames


def plan_to_dict(plan: MaskPlan) -> dict:
    return {
        "masked": list(plan.masked),
        "fill": plan.fill,
        "scheme": plan.scheme.to_dict(),
        "seed": list(plan.seed),
        "spans": [list(s) for s in plan.spans],
        "fill_spans": [list(s) for s in plan.fill_spans],
        "in_place": plan.in_place,
    }


def plan_from_dict(d: dict) -> MaskPlan:
    return MaskPlan(
        tuple(int(i) for i in d["masked"]),
        d["fill"],
        Scheme.from_dict(d["scheme"]),
        tuple(int(s) for s in d.get("seed", ())),
        tuple(tuple(s) for s in d.get("spans", ())),
        tuple(tuple(s) for s in d.get("fill_spans", ())),
        bool(d.get("in_place", False)),
    )
