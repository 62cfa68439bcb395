"""Utterances, corpora and their on-disk layout.

A corpus directory holds one JSON manifest per split plus a ``feats/``
directory of binary feature files::

    feats/<id>.feat   b"MMFT" | u32 version | u32 rows | u32 cols | f32 LE data

Manifest records carry the transcript, word alignments in seconds, the
visual vector inline and optional per-token category tags.  Masked corpora
add ``plan`` (relative path of a MaskPlan sidecar) and ``source`` fields.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

FEAT_MAGIC = b"MMFT"
FEAT_VERSION = 1
MANIFEST_FORMAT = "mmasr-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class WordAlignment:
    index: int
    start_s: float
    end_s: float

    def __post_init__(self):
        if not (0 <= self.start_s < self.end_s):
            raise InputError(f"word {self.index}: need 0 <= start < end, got ({self.start_s}, {self.end_s})")

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s


@dataclass
class Utterance:
    uid: str
    words: list
    frames: np.ndarray  # [T x d] float32
    alignments: list
    visual: np.ndarray | None = None
    tags: list | None = None
    plan: object = None  # MaskPlan for masked variants
    source: str | None = None

    def __post_init__(self):
        if len(self.alignments) != len(self.words):
            raise InputError(f"{self.uid}: {len(self.alignments)} alignments for {len(self.words)} tokens")
        if self.tags is not None and len(self.tags) != len(self.words):
            raise InputError(f"{self.uid}: {len(self.tags)} category tags for {len(self.words)} tokens")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def masked(self) -> tuple:
        return tuple(self.plan.masked) if self.plan is not None else ()


@dataclass
class Corpus:
    utterances: list
    frame_rate: float = 100.0
    silence: np.ndarray | None = None  # per-dimension silence feature
    noise_mean: float = 0.0
    noise_std: float = 1.0
    categories: dict = field(default_factory=dict)  # word -> tag

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    @property
    def feat_dim(self) -> int | None:
        if self.utterances:
            return int(self.utterances[0].frames.shape[1])
        return None if self.silence is None else int(len(self.silence))

    def with_utterances(self, utterances) -> "Corpus":
        return Corpus(list(utterances), self.frame_rate, self.silence, self.noise_mean, self.noise_std, dict(self.categories))

    def silence_vector(self) -> np.ndarray:
        """Silence fill; falls back to the per-dimension 1st percentile of all frames."""
        if self.silence is not None:
            return np.asarray(self.silence, dtype=np.float32)
        if not self.utterances:
            raise InputError("cannot estimate a silence vector from an empty corpus")
        allf = np.concatenate([u.frames for u in self.utterances])
        return np.percentile(allf, 1, axis=0).astype(np.float32)

    def words(self) -> list:
        seen = dict.fromkeys(w for u in self.utterances for w in u.words)
        return list(self.categories) + [w for w in seen if w not in self.categories]


# --- feature files ----------------------------------------------------------------


def feature_bytes(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise InputError(f"feature matrix must be 2-D, got shape {frames.shape}")
    T, d = frames.shape
    return struct.pack("<4sIII", FEAT_MAGIC, FEAT_VERSION, T, d) + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def write_features(path, frames: np.ndarray) -> None:
    Path(path).write_bytes(feature_bytes(frames))


def read_features(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"feature file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: too short for a feature header")
    magic, version, T, d = struct.unpack_from("<4sIII", raw)
    if magic != FEAT_MAGIC:
        raise FormatError(f"{path}: expected magic {FEAT_MAGIC!r}, found {magic!r}")
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: expected feature version {FEAT_VERSION}, found {version}")
    if len(raw) - 16 != T * d * 4:
        raise FormatError(f"{path}: expected {T * d * 4} payload bytes for {T}x{d}, found {len(raw) - 16}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(T, d).astype(np.float32)


# --- manifests --------------------------------------------------------------------


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a, dtype=np.float32)]


def manifest_dict(corpus: Corpus, feature_paths: list, plan_paths: list | None = None) -> dict:
    records = []
    for k, u in enumerate(corpus.utterances):
        rec = {
            "id": u.uid,
            "features": feature_paths[k],
            "words": list(u.words),
            "alignments": [[u.words[a.index], a.start_s, a.end_s] for a in u.alignments],
            "visual": None if u.visual is None else _floats(u.visual),
        }
        if u.tags is not None:
            rec["tags"] = list(u.tags)
        if u.source is not None:
            rec["source"] = u.source
        if plan_paths is not None and plan_paths[k] is not None:
            rec["plan"] = plan_paths[k]
        records.append(rec)
    return {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "frame_rate": corpus.frame_rate,
        "feat_dim": corpus.feat_dim,
        "silence": None if corpus.silence is None else _floats(corpus.silence),
        "noise": {"mean": corpus.noise_mean, "std": corpus.noise_std},
        "categories": corpus.categories,
        "utterances": records,
    }


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def save_corpus(corpus: Corpus, directory, name: str = "manifest") -> Path:
    """Write ``<name>.json`` plus feature files (and plan sidecars) under ``directory``."""
    from .masking import plan_to_dict

    directory = Path(directory)
    (directory / "feats").mkdir(parents=True, exist_ok=True)
    feats, plans = [], []
    for u in corpus.utterances:
        rel = f"feats/{u.uid}.feat"
        write_features(directory / rel, u.frames)
        feats.append(rel)
        if u.plan is not None:
            (directory / "plans").mkdir(exist_ok=True)
            prel = f"plans/{u.uid}.json"
            dump_json(plan_to_dict(u.plan), directory / prel)
            plans.append(prel)
        else:
            plans.append(None)
    path = directory / f"{name}.json"
    dump_json(manifest_dict(corpus, feats, plans), path)
    return path


def load_corpus(path) -> Corpus:
    """Load a manifest, validating counts, feature dims and file presence."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FormatError(f"manifest not found: {path}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from None
    if m.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: expected format {MANIFEST_FORMAT!r}, found {m.get('format')!r}")
    if m.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: expected manifest version {MANIFEST_VERSION}, found {m.get('version')}")
    try:
        return _corpus_from_manifest(m, path)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed manifest ({type(exc).__name__}: {exc})") from None


def _corpus_from_manifest(m: dict, path: Path) -> Corpus:
    from .masking import plan_from_dict

    base = path.parent
    utts = []
    dim = m.get("feat_dim")
    for rec in m["utterances"]:
        uid = rec["id"]
        words = rec["words"]
        if len(rec["alignments"]) != len(words):
            raise FormatError(f"{uid}: alignment count {len(rec['alignments'])} does not match token count {len(words)}")
        fpath = base / rec["features"]
        if not fpath.exists():
            raise FormatError(f"{uid}: missing feature file {fpath}")
        frames = read_features(fpath)
        if dim is None:
            dim = frames.shape[1]
        if frames.shape[1] != dim:
            raise FormatError(f"{uid}: feature dim {frames.shape[1]} differs from corpus dim {dim}")
        aligns = [WordAlignment(i, float(s), float(e)) for i, (_, s, e) in enumerate(rec["alignments"])]
        visual = None if rec.get("visual") is None else np.asarray(rec["visual"], dtype=np.float32)
        plan = None
        if rec.get("plan"):
            ppath = base / rec["plan"]
            if not ppath.exists():
                raise FormatError(f"{uid}: missing plan sidecar {ppath}")
            plan = plan_from_dict(json.loads(ppath.read_text()))
        utts.append(Utterance(uid, list(words), frames, aligns, visual, rec.get("tags"), plan, rec.get("source")))
    silence = None if m.get("silence") is None else np.asarray(m["silence"], dtype=np.float32)
    noise = m.get("noise") or {}
    return Corpus(utts, float(m["frame_rate"]), silence, float(noise.get("mean", 0.0)), float(noise.get("std", 1.0)), dict(m.get("categories") or {}))
