"""Error rates, recovery of masked words and visual-grounding statistics.

Ratios are kept as integer ``Rate(num, den)`` pairs so every percentage in
a report can be recomputed; a rate over nothing is ``None``, never 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


@dataclass(frozen=True)
class Rate:
    num: int
    den: int

    @property
    def value(self) -> float | None:
        return None if self.den == 0 else self.num / self.den

    @property
    def percent(self) -> float | None:
        v = self.value
        return None if v is None else 100.0 * v

    def __add__(self, other: "Rate") -> "Rate":
        return Rate(self.num + other.num, self.den + other.den)

    def to_dict(self) -> dict:
        return {"num": self.num, "den": self.den, "percent": self.percent}


def edit_alignment(ref, hyp) -> list:
    """Minimal-cost Levenshtein alignment as ``(op, i, j)`` triples.

    Ties in the backtrace prefer match, then substitution, deletion,
    insertion.  ``i``/``j`` are None for insertions/deletions respectively.
    """
    n, m = len(ref), len(hyp)
    # plain lists: numpy scalar indexing is several times slower for tables this small
    D = [list(range(m + 1))]
    for i in range(1, n + 1):
        row = [i] + [0] * m
        up = D[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            row[j] = min(up[j - 1] + (r != hyp[j - 1]), up[j] + 1, row[j - 1] + 1)
        D.append(row)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = ref[i - 1] == hyp[j - 1]
            if same and D[i][j] == D[i - 1][j - 1]:
                ops.append((MATCH, i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
            if not same and D[i][j] == D[i - 1][j - 1] + 1:
                ops.append((SUB, i - 1, j - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and D[i][j] == D[i - 1][j] + 1:
            ops.append((DEL, i - 1, None))
            i -= 1
        else:
            ops.append((INS, None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def edit_counts(ops) -> dict:
    counts = {MATCH: 0, SUB: 0, DEL: 0, INS: 0}
    for op, _, _ in ops:
        counts[op] += 1
    return counts


def edit_errors(ref, hyp) -> int:
    c = edit_counts(edit_alignment(ref, hyp))
    return c[SUB] + c[DEL] + c[INS]


def wer(ref, hyp) -> float:
    if len(ref) == 0:
        raise InputError("WER needs a non-empty reference")
    return edit_errors(ref, hyp) / len(ref)


@dataclass
class RecoveryRecord:
    uid: str
    index: int  # masked position in the reference
    word: str
    recovered: bool
    hyp_index: int | None = None  # aligned hypothesis step (match or substitution)
    visual_weight: float | None = None
    category: str | None = None

    def __post_init__(self):
        if self.visual_weight is not None and not (0.0 <= self.visual_weight <= 1.0):
            raise ContractError(f"visual weight {self.visual_weight} outside [0, 1]")


def mark_recovery(ref, hyp, masked, alignment=None, visual_weights=None, uid: str = "", tags=None) -> list:
    """One record per masked reference index; recovered iff aligned to an exact match."""
    alignment = edit_alignment(ref, hyp) if alignment is None else alignment
    if visual_weights is not None and len(visual_weights) < len(hyp):
        raise ContractError(f"attention trace has {len(visual_weights)} steps for {len(hyp)} hypothesis tokens")
    aligned = {i: (op, j) for op, i, j in alignment if i is not None}
    out = []
    for i in sorted(masked):
        op, j = aligned.get(i, (DEL, None))
        w = None if visual_weights is None or j is None else float(visual_weights[j])
        out.append(RecoveryRecord(uid, i, ref[i], op == MATCH, j, w, None if tags is None else tags[i]))
    return out


def recovery_rate(records) -> Rate:
    return Rate(sum(r.recovered for r in records), len(records))


def grounding_rate(records, threshold: float = 0.5) -> Rate:
    """Share of recovered masked words decoded with visual weight strictly above ``threshold``."""
    rec = [r for r in records if r.recovered and r.visual_weight is not None]
    return Rate(sum(r.visual_weight > threshold for r in rec), len(rec))


@dataclass
class Profile:
    offsets: list
    sums: list
    counts: list

    @property
    def means(self) -> list:
        return [s / c if c else None for s, c in zip(self.sums, self.counts)]

    def at(self, offset: int) -> float | None:
        return self.means[self.offsets.index(offset)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["offset", "mean_visual_weight", "count"])
        for o, m, c in zip(self.offsets, self.means, self.counts):
            w.writerow([o, "" if m is None else repr(float(m)), c])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Profile":
        rows = list(csv.DictReader(io.StringIO(text)))
        offsets = [int(r["offset"]) for r in rows]
        counts = [int(r["count"]) for r in rows]
        sums = [float(r["mean_visual_weight"]) * c if r["mean_visual_weight"] else 0.0 for r, c in zip(rows, counts)]
        return cls(offsets, sums, counts)


def attention_profile(traces, records, k: int = 2, recovered_only: bool = True) -> Profile:
    """Mean visual weight at decoder steps ``j + o`` around each masked word's step ``j``.

    ``traces`` maps utterance id to the per-step visual weights of that
    utterance's decode; records come from :func:`mark_recovery`.
    """
    offsets = list(range(-k, k + 1))
    sums = [0.0] * len(offsets)
    counts = [0] * len(offsets)
    for r in records:
        if r.hyp_index is None or (recovered_only and not r.recovered):
            continue
        trace = traces[r.uid]
        if trace is None:
            raise ContractError("attention profile needs hierarchical (HierAttnDF) traces")
        for n, o in enumerate(offsets):
            t = r.hyp_index + o
            if 0 <= t < len(trace):
                sums[n] += float(trace[t])
                counts[n] += 1
    return Profile(offsets, sums, counts)


def derangement(n: int, seed) -> np.ndarray:
    """Seeded uniformly random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise InputError(f"no derangement exists for {n} item(s)")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        if np.all(perm != np.arange(n)):
            return perm


# --- reports ------------------------------------------------------------------------


@dataclass
class EvalReport:
    errors: int = 0
    ref_words: int = 0
    recovery: Rate = Rate(0, 0)
    grounding: Rate = Rate(0, 0)
    by_level: dict = field(default_factory=dict)  # label -> Rate
    by_category: dict = field(default_factory=dict)  # tag -> Rate
    grounding_by_category: dict = field(default_factory=dict)
    records: list = field(default_factory=list, repr=False)
    traces: dict = field(default_factory=dict, repr=False)  # uid -> visual weights per step
    meta: dict = field(default_factory=dict)

    @property
    def wer(self) -> Rate:
        return Rate(self.errors, self.ref_words)

    @property
    def rr(self) -> float | None:
        return self.recovery.percent

    def to_dict(self) -> dict:
        return {
            "wer": self.wer.to_dict(),
            "recovery_rate": self.recovery.to_dict(),
            "grounding_rate": self.grounding.to_dict(),
            "recovery_by_level": {k: v.to_dict() for k, v in sorted(self.by_level.items())},
            "recovery_by_category": {k: v.to_dict() for k, v in sorted(self.by_category.items())},
            "grounding_by_category": {k: v.to_dict() for k, v in sorted(self.grounding_by_category.items())},
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def table(self) -> str:
        """Plain-text table: WER and RR per masking level, then per category."""

        def pct(r: Rate) -> str:
            p = r.percent
            return "   n/a" if p is None else f"{p:6.1f}"

        lines = [f"{'split':<12}{'RR%':>8}{'count':>12}"]
        for k, r in sorted(self.by_level.items()):
            lines.append(f"{k:<12}{pct(r):>8}{r.num:>6}/{r.den:<5}")
        lines.append(f"{'all':<12}{pct(self.recovery):>8}{self.recovery.num:>6}/{self.recovery.den:<5}")
        gr = "n/a" if self.grounding.percent is None else f"{self.grounding.percent:.1f}%"
        lines.append(f"WER {pct(self.wer).strip()}%  ({self.errors}/{self.ref_words})   GR {gr}")
        if self.by_category:
            lines.append("")
            lines.append(f"{'category':<12}{'RR%':>8}{'GR%':>8}")
            for k, r in sorted(self.by_category.items()):
                g = self.grounding_by_category.get(k, Rate(0, 0))
                lines.append(f"{k:<12}{pct(r):>8}{pct(g):>8}")
        return "\n".join(lines) + "\n"


def level_label(utt) -> str:
    scheme = utt.plan.scheme if utt.plan is not None else None
    if scheme is None or scheme.kind == "none":
        return "clean"
    if scheme.kind == "rand":
        return f"p{int(round(scheme.prob * 100)):02d}"
    if scheme.kind == "category":
        return f"cat:{scheme.tag}"
    return scheme.kind


def summarize(refs, hyps, masked, visual_traces, uids, tags=None, levels=None, threshold: float = 0.5) -> EvalReport:
    """Aggregate per-utterance decodes into an :class:`EvalReport`."""
    report = EvalReport()
    for n, (ref, hyp) in enumerate(zip(refs, hyps)):
        ops = edit_alignment(ref, hyp)
        c = edit_counts(ops)
        report.errors += c[SUB] + c[DEL] + c[INS]
        report.ref_words += len(ref)
        recs = mark_recovery(ref, hyp, masked[n], ops, visual_traces[n], uids[n], None if tags is None else tags[n])
        report.records.extend(recs)
        if levels is not None:
            lab = levels[n]
            report.by_level[lab] = report.by_level.get(lab, Rate(0, 0)) + recovery_rate(recs)
    report.recovery = recovery_rate(report.records)
    report.grounding = grounding_rate(report.records, threshold)
    cats = sorted({r.category for r in report.records if r.category is not None})
    for cat in cats:
        sub = [r for r in report.records if r.category == cat]
        report.by_category[cat] = recovery_rate(sub)
        report.grounding_by_category[cat] = grounding_rate(sub, threshold)
    return report


def evaluate(model, corpus, batch_size: int = 64, max_len: int = 30, visuals=None) -> EvalReport:
    """Greedy-decode ``corpus`` and score WER, RR and GR against its mask plans."""
    from .model import greedy_decode_batch

    utts = list(corpus.utterances)
    if visuals is None:
        visuals = [u.visual for u in utts]
    order = sorted(range(len(utts)), key=lambda i: (utts[i].n_frames, i))
    hyps: list = [None] * len(utts)
    traces: list = [None] * len(utts)
    for s in range(0, len(order), batch_size):
        idx = order[s : s + batch_size]
        vis = [visuals[i] for i in idx] if model.kind.multimodal else None
        results = greedy_decode_batch(model, [utts[i].frames for i in idx], vis, max_len)
        for i, res in zip(idx, results):
            hyps[i] = res.words
            traces[i] = res.visual_weights
    tags = [u.tags if u.tags is not None else [corpus.categories.get(w) for w in u.words] for u in utts]
    report = summarize(
        [u.words for u in utts],
        hyps,
        [u.masked for u in utts],
        traces,
        [u.uid for u in utts],
        tags,
        [level_label(u) for u in utts],
    )
    report.meta["hypotheses"] = {u.uid: h for u, h in zip(utts, hyps)}
    report.traces = {u.uid: t for u, t in zip(utts, traces)}
    return report


def congruency_eval(model, corpus, seed: int = 0, **kw):
    """Evaluate with the true visual pairing and with a seeded derangement of it.

    The derangement runs over source utterances, so masked variants of one
    recording never receive each other's (identical) visual vector.
    """
    keys = [u.source or u.uid for u in corpus]
    sources = list(dict.fromkeys(keys))
    first = {}
    for u, key in zip(corpus, keys):
        first.setdefault(key, u.visual)
    perm = derangement(len(sources), seed)
    swap = {sources[i]: sources[int(k)] for i, k in enumerate(perm)}
    congruent = evaluate(model, corpus, **kw)
    visuals = [first[swap[key]] for key in keys]
    incongruent = evaluate(model, corpus, visuals=visuals, **kw)
    incongruent.meta["permutation"] = {a: b for a, b in swap.items()}
    return congruent, incongruent
