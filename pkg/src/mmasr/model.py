"""Attention encoder-decoder recogniser with pluggable visual fusion.

The decoder is two stacked GRUs around an additive attention over encoder
states:  h1 = GRU1(y, h1);  z = Attn(E, h1);  h2 = GRU2(z, h2);  logits =
W_out h2 + b_out.  The fusion kind decides where the visual vector enters:

=============  ==============================================================
Unimodal       not at all
ShiftAdapt     shift ``s = W_v f + b`` added to every input frame
EarlyDF        ``y <- W_proj [y; v]`` before GRU1
WeightedDF     ``lam = sigmoid(y . P v)``, ``y <- W_proj [y; lam P v]``
MiddleDF       ``z <- W_proj [z; v]`` before GRU2
HierAttnDF     ``z <- Attn({z, Q v}, h1)``, a second attention over modalities
=============  ==============================================================

``f`` is the raw visual feature and ``v = W f`` its learned projection
(``visual_proj`` dims).
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from . import numcore as nc
from .errors import ContractError, FormatError, InputError
from .numcore import Tensor

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)


class FusionKind(str, enum.Enum):
    UNIMODAL = "Unimodal"
    SHIFT_ADAPT = "ShiftAdapt"
    EARLY_DF = "EarlyDF"
    WEIGHTED_DF = "WeightedDF"
    MIDDLE_DF = "MiddleDF"
    HIER_ATTN_DF = "HierAttnDF"

    @classmethod
    def parse(cls, name) -> "FusionKind":
        if isinstance(name, cls):
            return name
        key = str(name).replace("-", "").replace("_", "").lower()
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise InputError(f"unknown fusion kind {name!r}; expected one of {[k.value for k in cls]}")

    @property
    def multimodal(self) -> bool:
        return self is not FusionKind.UNIMODAL


class Vocabulary:
    """Token <-> id map; ids 0..3 are the reserved tokens."""

    def __init__(self, words):
        words = [w for w in words if w not in RESERVED]
        self.tokens = list(RESERVED) + sorted(set(words), key=words.index)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    eos = property(lambda self: 2)
    unk = property(lambda self: 3)

    def encode(self, words) -> list[int]:
        return [self.index.get(w, self.unk) for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class ModelConfig:
    kind: FusionKind = FusionKind.UNIMODAL
    feat_dim: int = 24
    visual_dim: int = 64
    visual_proj: int = 256
    enc_hidden: int = 64
    enc_layers: int = 4
    subsample_after: tuple = (2, 3)
    emb_dim: int = 32
    dec_hidden: int = 64
    att_dim: int = 64
    dtype: str = "float64"

    def __post_init__(self):
        self.kind = FusionKind.parse(self.kind)
        self.subsample_after = tuple(int(k) for k in self.subsample_after)
        if np.dtype(self.dtype).type not in (np.float32, np.float64):
            raise InputError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def enc_dim(self) -> int:
        return 2 * self.enc_hidden

    @property
    def min_frames(self) -> int:
        n_sub = sum(1 for k in self.subsample_after if 1 <= k <= self.enc_layers)
        return 2**n_sub

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["subsample_after"] = list(self.subsample_after)
        return d


class FusionModel:
    """Parameters of one recogniser; ``params`` is the ordered flat view."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        self.config = config
        self.vocab = vocab
        c = config
        dt = np.dtype(c.dtype).type
        rng = np.random.default_rng(seed)
        V, e = len(vocab), c.enc_dim
        self.encoder = []
        d_in = c.feat_dim
        for _ in range(c.enc_layers):
            self.encoder.append(
                (L.LstmCellParams.init(rng, d_in, c.enc_hidden, dt), L.LstmCellParams.init(rng, d_in, c.enc_hidden, dt))
            )
            d_in = e
        self.embedding = nc.parameter(rng.normal(0.0, 0.1, size=(V, c.emb_dim)).astype(dt))
        self.gru1 = L.GruCellParams.init(rng, c.emb_dim, c.dec_hidden, dt)
        self.attention = L.AttentionParams.init(rng, e, c.dec_hidden, c.att_dim, dt)
        self.gru2 = L.GruCellParams.init(rng, e, c.dec_hidden, dt)
        self.out_w = nc.parameter(L.uniform_init(rng, (V, c.dec_hidden), c.dec_hidden, dt))
        self.out_b = nc.parameter(np.zeros(V, dtype=dt))
        self.fusion: dict[str, Tensor] = {}
        self.hier: L.AttentionParams | None = None
        kind, pv, f = c.kind, c.visual_proj, c.visual_dim
        if kind is FusionKind.SHIFT_ADAPT:
            self.fusion["shift.w"] = nc.parameter(L.uniform_init(rng, (c.feat_dim, f), f, dt))
            self.fusion["shift.b"] = nc.parameter(np.zeros(c.feat_dim, dtype=dt))
        elif kind.multimodal:
            self.fusion["visual.w"] = nc.parameter(L.uniform_init(rng, (pv, f), f, dt))
            if kind is FusionKind.EARLY_DF:
                self.fusion["fuse.w"] = nc.parameter(L.uniform_init(rng, (c.emb_dim, c.emb_dim + pv), c.emb_dim + pv, dt))
            elif kind is FusionKind.WEIGHTED_DF:
                self.fusion["visual_emb.w"] = nc.parameter(L.uniform_init(rng, (c.emb_dim, pv), pv, dt))
                self.fusion["fuse.w"] = nc.parameter(L.uniform_init(rng, (c.emb_dim, 2 * c.emb_dim), 2 * c.emb_dim, dt))
            elif kind is FusionKind.MIDDLE_DF:
                self.fusion["fuse.w"] = nc.parameter(L.uniform_init(rng, (e, e + pv), e + pv, dt))
            elif kind is FusionKind.HIER_ATTN_DF:
                self.fusion["visual_enc.w"] = nc.parameter(L.uniform_init(rng, (e, pv), pv, dt))
                self.hier = L.AttentionParams.init(rng, e, c.dec_hidden, c.att_dim, dt)
        self.params = self._collect()

    def _collect(self) -> dict[str, Tensor]:
        out = {}
        for k, (fwd, bwd) in enumerate(self.encoder):
            for tag, cell in (("fwd", fwd), ("bwd", bwd)):
                for name, t in cell.tensors():
                    out[f"enc.{k}.{tag}.{name}"] = t
        out["embedding"] = self.embedding
        for prefix, block in (("gru1", self.gru1), ("att", self.attention), ("gru2", self.gru2)):
            for name, t in block.tensors():
                out[f"{prefix}.{name}"] = t
        out["out.w"] = self.out_w
        out["out.b"] = self.out_b
        out.update(self.fusion)
        if self.hier is not None:
            for name, t in self.hier.tensors():
                out[f"hier.{name}"] = t
        for name, t in out.items():
            t.name = name
        return out

    @property
    def kind(self) -> FusionKind:
        return self.config.kind

    @property
    def dtype(self):
        return np.dtype(self.config.dtype).type

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data[...] = arrays[k]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


@dataclass
class Batch:
    frames: np.ndarray  # [B x T x d]
    frame_mask: np.ndarray  # [B x T] bool
    visual: np.ndarray | None  # [B x f]
    inputs: np.ndarray  # [B x N] previous-token ids, starting with <bos>
    targets: np.ndarray  # [B x N] ids ending with <eos>, padded with <pad>

    @property
    def size(self) -> int:
        return self.frames.shape[0]


def make_batch(model: FusionModel, frames_list, visuals, token_lists) -> Batch:
    """Right-pad utterances into a batch; ``token_lists`` are word strings."""
    if len(frames_list) == 0:
        raise InputError("cannot build an empty batch")
    dt = model.dtype
    vocab = model.vocab
    B = len(frames_list)
    T = max(f.shape[0] for f in frames_list)
    d = frames_list[0].shape[1]
    frames = np.zeros((B, T, d), dtype=dt)
    fmask = np.zeros((B, T), dtype=bool)
    for b, f in enumerate(frames_list):
        frames[b, : f.shape[0]] = f
        fmask[b, : f.shape[0]] = True
    ids = [vocab.encode(toks) + [vocab.eos] for toks in token_lists]
    N = max(len(x) for x in ids)
    targets = np.full((B, N), vocab.pad, dtype=np.int64)
    inputs = np.full((B, N), vocab.pad, dtype=np.int64)
    for b, x in enumerate(ids):
        targets[b, : len(x)] = x
        inputs[b, 0] = vocab.bos
        inputs[b, 1 : len(x)] = x[:-1]
    visual = None if visuals is None else np.asarray(np.stack(visuals), dtype=dt)
    return Batch(frames, fmask, visual, inputs, targets)


@dataclass
class Encoded:
    states: Tensor  # [B x T' x e]
    keys: Tensor  # [B x T' x a]
    mask: np.ndarray  # [B x T']
    visual: Tensor | None  # kind-specific projected visual vector


def _visual_tensor(model: FusionModel, visual, batch: int) -> Tensor | None:
    if not model.kind.multimodal:
        return None
    if visual is None:
        raise ContractError(f"{model.kind.value} model needs a visual vector")
    v = np.asarray(visual, dtype=model.dtype)
    if v.ndim == 1:
        v = v[None, :]
    if v.shape != (batch, model.config.visual_dim):
        raise ContractError(f"visual vectors must have shape ({batch}, {model.config.visual_dim}), got {v.shape}")
    return Tensor._wrap(v, False)


def encoder_input(model: FusionModel, frames, visual=None) -> Tensor:
    """Frames as seen by the first encoder layer (shifted for ShiftAdapt)."""
    x = frames if isinstance(frames, Tensor) else nc.as_tensor(np.asarray(frames, dtype=model.dtype))
    if x.ndim == 2:
        x = nc.reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    f = _visual_tensor(model, visual, B)
    if model.kind is FusionKind.SHIFT_ADAPT:
        s = f @ model.fusion["shift.w"].T + model.fusion["shift.b"]
        tiled = nc.reshape(nc.take_rows(s, np.repeat(np.arange(B), T)), (B, T, d))
        x = x + tiled
    return x


def encode(model: FusionModel, frames, visual=None, mask: np.ndarray | None = None) -> Encoded:
    x = encoder_input(model, frames, visual)
    B, T, _ = x.shape
    if T < model.config.min_frames:
        raise InputError(f"{T} frames is shorter than the encoder minimum of {model.config.min_frames}")
    states, emask = L.bilstm_encoder(model.encoder, x, set(model.config.subsample_after), mask)
    keys = states @ model.attention.w_item.T
    f = _visual_tensor(model, visual, B)
    v = None
    if f is not None and model.kind is not FusionKind.SHIFT_ADAPT:
        v = f @ model.fusion["visual.w"].T
        if model.kind is FusionKind.WEIGHTED_DF:
            v = v @ model.fusion["visual_emb.w"].T
        elif model.kind is FusionKind.HIER_ATTN_DF:
            v = v @ model.fusion["visual_enc.w"].T
    return Encoded(states, keys, emask, v)


@dataclass
class StepRecord:
    audio_weights: np.ndarray  # [B x T']
    hier_weights: np.ndarray | None  # [B x 2] as (audio, visual)
    lam: np.ndarray | None = None  # WeightedDF gate


def initial_state(model: FusionModel, batch: int) -> tuple[Tensor, Tensor]:
    z = np.zeros((batch, model.config.dec_hidden), dtype=model.dtype)
    return Tensor._wrap(z, False), Tensor._wrap(z.copy(), False)


def decode_step(model: FusionModel, enc: Encoded, y_prev, state):
    """One decoder step for a batch of previous-token ids."""
    y_prev = np.atleast_1d(np.asarray(y_prev, dtype=np.int64))
    V = len(model.vocab)
    if y_prev.size and (y_prev.min() < 0 or y_prev.max() >= V):
        raise InputError(f"token id outside vocabulary of size {V}: {y_prev.tolist()}")
    kind = model.kind
    h1, h2 = state
    y = nc.take_rows(model.embedding, y_prev)
    lam = None
    if kind is FusionKind.EARLY_DF:
        y = nc.concat([y, enc.visual], axis=1) @ model.fusion["fuse.w"].T
    elif kind is FusionKind.WEIGHTED_DF:
        vhat = enc.visual
        B, E = vhat.shape
        gate = nc.sigmoid((y * vhat) @ np.ones(E, dtype=model.dtype))
        lam = gate.data
        gate_cols = nc.reshape(gate, (B, 1)) @ np.ones((1, E), dtype=model.dtype)
        y = nc.concat([y, gate_cols * vhat], axis=1) @ model.fusion["fuse.w"].T
    h1 = L.gru_cell(model.gru1, y, h1)
    z, alpha = L.additive_attention(enc.keys, enc.states, h1, model.attention, enc.mask)
    hier = None
    if kind is FusionKind.MIDDLE_DF:
        z = nc.concat([z, enc.visual], axis=1) @ model.fusion["fuse.w"].T
    elif kind is FusionKind.HIER_ATTN_DF:
        items = nc.stack([z, enc.visual], axis=1)
        keys = items @ model.hier.w_item.T
        z, hier = L.additive_attention(keys, items, h1, model.hier)
    h2 = L.gru_cell(model.gru2, z, h2)
    logits = h2 @ model.out_w.T + model.out_b
    return logits, (h1, h2), StepRecord(alpha, hier, lam)


def batch_loss(model: FusionModel, batch: Batch) -> Tensor:
    """Mean per-token NLL under teacher forcing; ``<pad>`` targets excluded."""
    if batch.targets.shape[1] == 0:
        raise InputError("empty target sequence")
    enc = encode(model, batch.frames, batch.visual, batch.frame_mask)
    state = initial_state(model, batch.size)
    logits = []
    for t in range(batch.targets.shape[1]):
        step_logits, state, _ = decode_step(model, enc, batch.inputs[:, t], state)
        logits.append(step_logits)
    flat_targets = batch.targets.T.reshape(-1)
    weights = (flat_targets != model.vocab.pad).astype(model.dtype)
    total = nc.cross_entropy(nc.concat(logits, axis=0), flat_targets, weights)
    return total * (1.0 / weights.sum())


def forward_loss(model: FusionModel, frames, visual, words) -> Tensor:
    """Teacher-forced loss of one utterance (``words`` excludes ``<eos>``)."""
    return batch_loss(model, make_batch(model, [np.asarray(frames)], None if visual is None else [visual], [words]))


@dataclass
class DecodeResult:
    token_ids: list  # emitted ids, including the final <eos> when produced
    log_probs: list
    audio_weights: list  # one [T'] array per emitted token
    hier_weights: list | None  # one (audio_w, visual_w) pair per emitted token
    vocab: Vocabulary = field(repr=False, default=None)

    @property
    def ended(self) -> bool:
        return bool(self.token_ids) and self.token_ids[-1] == 2

    @property
    def word_ids(self) -> list:
        return self.token_ids[:-1] if self.ended else list(self.token_ids)

    @property
    def words(self) -> list[str]:
        return self.vocab.decode(self.word_ids)

    @property
    def visual_weights(self) -> np.ndarray | None:
        if self.hier_weights is None:
            return None
        return np.array([w[1] for w in self.hier_weights])


def greedy_decode_batch(model: FusionModel, frames_list, visuals, max_len: int = 30) -> list[DecodeResult]:
    if max_len < 1:
        raise InputError("max_len must be at least 1")
    B = len(frames_list)
    if B == 0:
        return []
    T = max(f.shape[0] for f in frames_list)
    frames = np.zeros((B, T, frames_list[0].shape[1]), dtype=model.dtype)
    mask = np.zeros((B, T), dtype=bool)
    for b, f in enumerate(frames_list):
        frames[b, : len(f)] = f
        mask[b, : len(f)] = True
    visual = None if visuals is None or not model.kind.multimodal else np.stack(visuals)
    enc = encode(model, frames, visual, mask)
    lengths = enc.mask.sum(axis=1)
    state = initial_state(model, B)
    y = np.full(B, model.vocab.bos, dtype=np.int64)
    hier = model.kind is FusionKind.HIER_ATTN_DF
    results = [DecodeResult([], [], [], [] if hier else None, model.vocab) for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        logits, state, rec = decode_step(model, enc, y, state)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        y = logp.argmax(axis=1)
        for b in np.flatnonzero(~done):
            r = results[b]
            r.token_ids.append(int(y[b]))
            r.log_probs.append(float(logp[b, y[b]]))
            r.audio_weights.append(rec.audio_weights[b, : lengths[b]].copy())
            if hier:
                r.hier_weights.append((float(rec.hier_weights[b, 0]), float(rec.hier_weights[b, 1])))
        done |= y == model.vocab.eos
        if done.all():
            break
    return results


def greedy_decode(model: FusionModel, frames, visual=None, max_len: int = 30) -> DecodeResult:
    return greedy_decode_batch(model, [np.asarray(frames)], None if visual is None else [visual], max_len)[0]


# --- checkpoints ----------------------------------------------------------------

MAGIC = b"MMASRCKP"
FORMAT_VERSION = 1


def _header(model: FusionModel) -> dict:
    dt = "<f4" if model.dtype is np.float32 else "<f8"
    return {
        "kind": model.kind.value,
        "config": model.config.to_dict(),
        "vocab": model.vocab.tokens,
        "dtype": dt,
        "params": [[name, list(t.shape)] for name, t in model.params.items()],
    }


def checkpoint_bytes(model: FusionModel) -> bytes:
    header = _header(model)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    for t in model.params.values():
        parts.append(np.ascontiguousarray(t.data, dtype=header["dtype"]).tobytes())
    return b"".join(parts)


def save_checkpoint(model: FusionModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def model_from_bytes(raw: bytes, expected_kind=None, source: str = "<bytes>") -> FusionModel:
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (expected magic {MAGIC!r}, found {raw[:len(MAGIC)]!r})")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: expected checkpoint version {FORMAT_VERSION}, found {version}")
    start = len(MAGIC) + 8
    if len(raw) < start + hlen:
        raise FormatError(f"{source}: truncated header (expected {hlen} bytes, found {len(raw) - start})")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable header: {exc}") from None
    if expected_kind is not None:
        want = FusionKind.parse(expected_kind)
        if header["kind"] != want.value:
            raise FormatError(f"{source}: expected fusion kind {want.value}, found {header['kind']}")
    config = ModelConfig(**header["config"])
    model = FusionModel(config, Vocabulary(header["vocab"]), seed=0)
    dt = np.dtype(header["dtype"])
    expected_params = [[n, list(t.shape)] for n, t in model.params.items()]
    if header["params"] != expected_params:
        raise FormatError(f"{source}: parameter layout does not match a {config.kind.value} model of these dims")
    offset = start + hlen
    need = sum(int(np.prod(s)) for _, s in expected_params) * dt.itemsize
    if len(raw) - offset != need:
        raise FormatError(f"{source}: expected {need} parameter bytes, found {len(raw) - offset}")
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(shape)
        model.params[name].data[...] = arr
        offset += count * dt.itemsize
    return model


def load_checkpoint(path, expected_kind=None) -> FusionModel:
    path = Path(path)
    return model_from_bytes(path.read_bytes(), expected_kind, str(path))
