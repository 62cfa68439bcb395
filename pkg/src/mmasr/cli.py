"""Command line: gen-data, mask, train, eval, attn, congruency.

Exit codes: 0 success, 2 usage or contract error, 3 data-format or I/O
error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import __version__
from . import corpus as C
from . import masking as K
from . import metrics as X
from . import model as M
from . import synthdata as S
from .errors import ContractError, FormatError, InputError, MmasrError, TrainingDivergence
from .experiments import desk_config, scheme_corpus
from .train import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_DIVERGED = 0, 2, 3, 4


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def provenance(**inputs) -> dict:
    return {"tool": "mmasr", "version": __version__, "inputs": {k: sha256(v) for k, v in sorted(inputs.items())}}


def write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def write_json(path, obj) -> None:
    write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def manifest_path(p) -> Path:
    p = Path(p)
    return p / "manifest.json" if p.is_dir() else p


def parse_floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"expected a comma-separated list of numbers, got {text!r}") from None


# --- gen-data ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    sizes = (args.n, args.n, args.n) if args.n is not None else tuple(int(x) for x in parse_floats(args.sizes))
    if len(sizes) != 3:
        raise InputError("--sizes needs three counts: train,dev,test")
    noise = S.Noise(acoustic=args.noise_acoustic, visual=args.noise_visual, association=args.association)
    vocab = S.gen_vocab(seed=args.seed)
    splits = S.gen_splits(vocab, sizes, noise, seed=args.seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, corpus in splits.items():
            C.save_corpus(corpus, out, name)
        write_json(
            out / "vocab.json",
            {"words": vocab.words, "tags": vocab.tags, "prefers": vocab.prefers, "seed": args.seed},
        )
    except OSError as exc:
        raise OSError(f"cannot write corpus under {out}: {exc.strerror or exc}") from None
    for name, corpus in splits.items():
        n_words = sum(len(u.words) for u in corpus)
        n_frames = sum(u.n_frames for u in corpus)
        print(f"{name:<6} {len(corpus):>6} utterances {n_words:>7} words {n_frames:>9} frames")
    print(f"vocabulary {len(vocab)} words; wrote {out}")
    return EXIT_OK


# --- mask ---------------------------------------------------------------------------


def parse_scheme(text: str):
    kind, _, arg = text.partition(":")
    if kind == "rand":
        return "rand", (float(arg) if arg else None)
    if kind == "entity":
        if not arg:
            raise InputError("entity scheme needs a word file: entity:<file>")
        words = [w for w in Path(arg).read_text().split() if w]
        return "entity", words
    if kind == "category":
        if not arg:
            raise InputError("category scheme needs a tag: category:<TAG>")
        return "category", arg
    raise InputError(f"unknown scheme {text!r}; use rand:p, entity:file or category:tag")


def cmd_mask(args) -> int:
    src = manifest_path(args.input)
    corpus = C.load_corpus(src)
    kind, arg = parse_scheme(args.scheme)
    if kind == "rand":
        probs = parse_floats(args.probs) if args.probs else [arg if arg is not None else 0.0]
        out = K.build_augmented_corpus(corpus, probs, args.fill, args.seed).flat()
    elif kind == "entity":
        out = K.mask_corpus(corpus, K.build_entity_mask(corpus, arg), args.fill, args.seed)
    else:
        out = K.build_category_testset(corpus, arg, args.fill, args.seed, known=S.CATEGORIES)
    C.save_corpus(out, args.out)
    n_masked = sum(len(u.masked) for u in out)
    print(f"{len(out)} utterances, {n_masked} masked words -> {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


# --- train --------------------------------------------------------------------------


def load_config(path, overrides: dict) -> TrainConfig:
    raw = {}
    if path:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise InputError(f"{path}: config must be a mapping")
    model = dict(raw.pop("model", {}) or {})
    scheme = raw.pop("scheme", "rand")
    for k, v in overrides.items():
        if v is None:
            continue
        if k == "kind":
            model["kind"] = v
        else:
            raw[k] = v
    base = desk_config(model.pop("kind", "HierAttnDF"))
    try:
        cfg = replace(base, **raw, model=replace(base.model, **model))
    except TypeError as exc:
        raise InputError(f"bad config key: {exc}") from None
    cfg.__post_init__()
    return cfg, scheme


def cmd_train(args) -> int:
    cfg, scheme = load_config(args.config, {"kind": args.fusion, "seed": args.seed, "max_epochs": args.epochs})
    data = manifest_path(args.data)
    train_src = C.load_corpus(data)
    if any(u.plan is not None for u in train_src):
        tr = train_src  # already masked on disk
    else:
        tr = scheme_corpus(train_src, scheme, cfg.probabilities, cfg.fill, cfg.seed + 101)
    dev = None
    inputs = {"train": data}
    if args.dev:
        dpath = manifest_path(args.dev)
        inputs["dev"] = dpath
        dev_src = C.load_corpus(dpath)
        dev = dev_src if any(u.plan is not None for u in dev_src) else scheme_corpus(dev_src, scheme, cfg.probabilities, cfg.fill, cfg.seed + 202)
    vocab = M.Vocabulary(train_src.words())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def log(e):
        print(f"epoch {e.epoch}: loss {e.train_loss:.4f}  dev WER {e.dev_wer}  dev RR {e.dev_rr}", flush=True)

    try:
        res = train(tr, dev, cfg, vocab=vocab, log=log)
    except TrainingDivergence as exc:
        if exc.last_good is not None:
            (out / "last_good.ckpt").write_bytes(exc.last_good)
        raise
    (out / "model.ckpt").write_bytes(res.checkpoint)
    resolved = cfg.to_dict()
    resolved["scheme"] = scheme
    write_json(out / "trainlog.json", {"config": resolved, "log": res.log.to_dict(), **provenance(**inputs)})
    # wall clock is kept apart so the other outputs stay byte-reproducible
    write_json(out / "timing.json", {"wall_clock_s": res.log.wall_clock_s})
    print(f"best epoch {res.log.best_epoch}; wrote {out / 'model.ckpt'}")
    return EXIT_OK


# --- eval / attn / congruency ---------------------------------------------------------


def _load(args):
    model = M.load_checkpoint(args.ckpt, expected_kind=getattr(args, "fusion", None))
    path = manifest_path(args.data)
    corpus = C.load_corpus(path)
    if model.kind.multimodal and corpus.utterances and corpus[0].visual is not None:
        if len(corpus[0].visual) != model.config.visual_dim:
            raise FormatError(f"corpus visual dim {len(corpus[0].visual)} does not match checkpoint {model.config.visual_dim}")
    return model, corpus, path


def report_dict(report: X.EvalReport, model, extra: dict) -> dict:
    d = report.to_dict()
    d.pop("meta", None)
    d["model"] = {"kind": model.kind.value, "config": model.config.to_dict()}
    d.update(extra)
    return d


def cmd_eval(args) -> int:
    model, corpus, path = _load(args)
    rep = X.evaluate(model, corpus, max_len=args.max_len)
    d = report_dict(rep, model, provenance(ckpt=args.ckpt, data=path))
    d["hypotheses"] = rep.meta["hypotheses"]
    if args.report:
        write_json(args.report, d)
    if args.table:
        write_text(args.table, rep.table())
    print(rep.table(), end="")
    return EXIT_OK


def cmd_attn(args) -> int:
    model, corpus, path = _load(args)
    if model.kind is not M.FusionKind.HIER_ATTN_DF:
        raise ContractError(f"attention profiles need a HierAttnDF checkpoint, got {model.kind.value}")
    rep = X.evaluate(model, corpus, max_len=args.max_len)
    records = rep.records
    if args.category:
        records = [r for r in records if r.category in set(args.category.split(","))]
    prof = X.attention_profile(rep.traces, records, k=args.window, recovered_only=not args.all_aligned)
    csv = prof.to_csv()
    if args.out:
        write_text(args.out, csv)
    if args.traces:
        recs = [
            {"uid": r.uid, "index": r.index, "word": r.word, "category": r.category, "recovered": r.recovered, "hyp_index": r.hyp_index}
            for r in rep.records
        ]
        write_json(args.traces, {"traces": {k: [float(x) for x in v] for k, v in sorted(rep.traces.items())}, "records": recs})
    print(csv, end="")
    return EXIT_OK


def cmd_congruency(args) -> int:
    model, corpus, path = _load(args)
    cong, incong = X.congruency_eval(model, corpus, seed=args.seed, max_len=args.max_len)
    levels = sorted(set(cong.by_level) | set(incong.by_level))
    rows = {}
    for lab in levels:
        a, b = cong.by_level.get(lab, X.Rate(0, 0)), incong.by_level.get(lab, X.Rate(0, 0))
        delta = None if a.percent is None or b.percent is None else b.percent - a.percent
        rel = None if delta is None or not a.percent else 100.0 * delta / a.percent
        rows[lab] = {"congruent": a.to_dict(), "incongruent": b.to_dict(), "delta_abs": delta, "delta_rel_percent": rel}
    d = {
        "congruent": report_dict(cong, model, {}),
        "incongruent": report_dict(incong, model, {"permutation_seed": args.seed}),
        "by_level": rows,
        **provenance(ckpt=args.ckpt, data=path),
    }
    if args.report:
        write_json(args.report, d)
    print(f"{'level':<8}{'congruent':>11}{'incongruent':>13}{'delta':>8}")
    for lab, r in rows.items():
        a, b = r["congruent"]["percent"], r["incongruent"]["percent"]
        fmt = lambda x: "n/a" if x is None else f"{x:.1f}"  # noqa: E731
        print(f"{lab:<8}{fmt(a):>11}{fmt(b):>13}{fmt(r['delta_abs']):>8}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmasr", description="Multimodal recognition under word masking.")
    p.add_argument("--version", action="version", version=f"mmasr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus (train/dev/test manifests)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sizes", default="2000,200,200", help="train,dev,test utterance counts")
    g.add_argument("--n", type=int, default=None, help="use this count for every split")
    g.add_argument("--noise-acoustic", type=float, default=0.3)
    g.add_argument("--noise-visual", type=float, default=0.02)
    g.add_argument("--association", type=float, default=0.6, help="strength of head-dependent word preferences")
    g.set_defaults(func=cmd_gen_data)

    m = sub.add_parser("mask", help="mask a corpus and write plan sidecars")
    m.add_argument("--in", dest="input", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--scheme", default="rand:0", help="rand:p | entity:<file> | category:<TAG>")
    m.add_argument("--fill", choices=K.FILL_KINDS, default="silence")
    m.add_argument("--probs", default=None, help="comma-separated levels; one variant per level (rand only)")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_mask)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", default=None, help="YAML training config")
    t.add_argument("--data", required=True, help="training manifest")
    t.add_argument("--dev", default=None, help="dev manifest for early stopping")
    t.add_argument("--fusion", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "WER / RR / GR report"),
        ("attn", cmd_attn, "visual-attention profile around masked words"),
        ("congruency", cmd_congruency, "congruent vs deranged visual pairing"),
    ):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--ckpt", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--fusion", default=None, help="expected fusion kind of the checkpoint")
        e.add_argument("--max-len", type=int, default=30)
        if name == "eval":
            e.add_argument("--report", default=None)
            e.add_argument("--table", default=None)
        if name == "attn":
            e.add_argument("--window", type=int, default=2)
            e.add_argument("--out", default=None, help="CSV output")
            e.add_argument("--traces", default=None, help="JSON dump of the per-step traces")
            e.add_argument("--category", default=None, help="comma-separated category filter")
            e.add_argument("--all-aligned", action="store_true", help="include substituted words, not only recovered")
        if name == "congruency":
            e.add_argument("--seed", type=int, default=0)
            e.add_argument("--report", default=None)
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (MmasrError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
