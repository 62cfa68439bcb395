"""Experiment recipes shared by the command line, the demos and the acceptance suite.

A :class:`Setup` pins everything: vocabulary and corpus seeds, split sizes,
masking levels and the training configuration.  Recipes build the corpora
each experiment needs (augmented, clean, entity-masked, per-category test
sets) and train or evaluate models on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import masking as K
from . import metrics as X
from . import model as M
from . import synthdata as S
from .train import TrainConfig, TrainResult, train

ENTITY_TAGS = ("NOUN", "PLACE")
REPORT_CATEGORIES = ("NOUN", "PLACE", "ADJ", "COLOR", "VERB", "ADV", "CARDINAL")


def desk_config(kind="HierAttnDF", **kw) -> TrainConfig:
    """Training defaults sized for one CPU core.

    Two 32-unit bidirectional layers with one subsampling step: the deeper
    default encoder learns the audio alignment far more slowly at this scale.
    """
    model = M.ModelConfig(kind=kind, enc_hidden=32, enc_layers=2, subsample_after=(1,), dtype="float32")
    base = dict(lr=3e-3, batch_size=16, max_epochs=12, patience=2, model=model)
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class Setup:
    seed: int = 0
    sizes: tuple = (2000, 200, 200)
    noise: S.Noise = field(default_factory=S.Noise)
    config: TrainConfig = field(default_factory=desk_config)

    @property
    def probabilities(self) -> tuple:
        return self.config.probabilities


@dataclass
class Data:
    vocab: S.SynthVocab
    splits: dict

    @property
    def vocabulary(self) -> M.Vocabulary:
        return M.Vocabulary(self.vocab.words)


def build_data(setup: Setup) -> Data:
    vocab = S.gen_vocab(seed=setup.seed)
    return Data(vocab, S.gen_splits(vocab, setup.sizes, setup.noise, seed=setup.seed))


def entity_words(corpus, tags=ENTITY_TAGS) -> set:
    return {w for w, t in corpus.categories.items() if t in tags}


def scheme_corpus(corpus, scheme: str, probabilities, fill: str, seed: int):
    """The training (or model-selection) corpus for one masking scheme.

    ``rand``: one RandWordMask variant per probability.  ``none``: the clean
    corpus.  ``entity``: each utterance clean plus with every entity masked.
    """
    if scheme == "rand":
        return K.build_augmented_corpus(corpus, probabilities, fill, seed).flat()
    if scheme == "none":
        return corpus
    if scheme == "entity":
        masked = K.mask_corpus(corpus, K.build_entity_mask(corpus, entity_words(corpus)), fill, seed, suffix="_ent")
        return corpus.with_utterances(list(corpus.utterances) + list(masked.utterances))
    raise ValueError(f"unknown training scheme {scheme!r}; expected rand, none or entity")


def train_recipe(data: Data, setup: Setup, kind: str, scheme: str = "rand", fill: str = "silence", log=None) -> TrainResult:
    cfg = replace(setup.config, fill=fill, model=replace(setup.config.model, kind=M.FusionKind.parse(kind)))
    tr = scheme_corpus(data.splits["train"], scheme, cfg.probabilities, fill, setup.seed + 101)
    dev = scheme_corpus(data.splits["dev"], scheme, cfg.probabilities, fill, setup.seed + 202)
    return train(tr, dev, cfg, vocab=data.vocabulary, log=log)


def level_testset(data: Data, setup: Setup, fill: str = "silence", split: str = "dev") -> K.AugmentedCorpus:
    return K.build_augmented_corpus(data.splits[split], setup.probabilities, fill, setup.seed + 303)


def category_testsets(data: Data, split: str = "test", tags=REPORT_CATEGORIES, fill: str = "silence") -> dict:
    corpus = data.splits[split]
    return {t: K.build_category_testset(corpus, t, fill, seed=7, known=S.CATEGORIES) for t in tags}


def level_rr(report: X.EvalReport) -> dict:
    """Recovery rate (percent) per masking level, leaving out unmasked levels."""
    return {k: r.percent for k, r in sorted(report.by_level.items()) if r.den}


def category_rr(model, testsets: dict) -> dict:
    """Per-category report on each all-occurrences-masked test set."""
    return {t: X.evaluate(model, c) for t, c in testsets.items()}


def compare_schemes(data: Data, setup: Setup, schemes=("none", "entity", "rand"), kind="HierAttnDF", log=None) -> dict:
    """Scheme x category RR table (percent) for models trained under each scheme."""
    tests = category_testsets(data)
    table = {}
    for scheme in schemes:
        res = train_recipe(data, setup, kind, scheme, log=log)
        reps = category_rr(res.model, tests)
        table[scheme] = {t: r.recovery.percent for t, r in reps.items()}
    return table


def format_table(table: dict, cols=REPORT_CATEGORIES) -> str:
    lines = [f"{'':<10}" + "".join(f"{c:>10}" for c in cols)]
    for row, vals in table.items():
        cells = "".join(f"{'n/a':>10}" if vals.get(c) is None else f"{vals[c]:>10.1f}" for c in cols)
        lines.append(f"{row:<10}{cells}")
    return "\n".join(lines) + "\n"
