"""
Masking words in the audio
==========================

A masked word's aligned segment is widened by a quarter of its duration on
each side, the widened spans are merged, and each merged span is replaced by
half a second of silence or white noise.
"""

import numpy as np

from mmasr import masking as K
from mmasr import synthdata as S
from mmasr.corpus import WordAlignment

print(K.expand_alignment(WordAlignment(0, 1.0, 2.0), 0.25))

###############################################################################
# A 0.2 s word at 1.0 s becomes the frame span [95, 125) and is replaced by
# 50 fill frames, so the utterance grows by 20 frames.

frames = np.zeros((300, 2), np.float32)
out, plan = K.apply_mask(frames, [WordAlignment(0, 1.0, 1.2)], K.MaskPlan((0,)), 100.0, K.Fill("silence", np.ones(2)))
print(plan.spans, plan.fill_spans, frames.shape, "->", out.shape)

###############################################################################
# RandWordMask draws each word independently.  The augmented corpus holds
# one variant per masking probability for every utterance.

vocab = S.gen_vocab(seed=0)
corpus = S.gen_corpus(vocab, 50, seed=3)
aug = K.build_augmented_corpus(corpus, [0.0, 0.2, 0.4, 0.6], "silence", seed=1)
for j, p in enumerate(aug.probabilities):
    level = aug.level(j)
    masked = sum(len(u.masked) for u in level)
    words = sum(len(u.words) for u in level)
    print(f"p={p:.1f}: {masked}/{words} words masked")

###############################################################################
# Per-category test sets mask every occurrence of one category.  The stored
# plan is enough to rebuild a masked utterance byte for byte.

nouns = K.build_category_testset(corpus, "NOUN", known=S.CATEGORIES)
u = nouns[0]
print(u.uid, [w if i not in u.masked else "___" for i, w in enumerate(u.words)])
fill = K.Fill.for_corpus(corpus, "silence")
print("re-applied plan matches:", K.reapply(u, corpus[0], 100.0, fill).tobytes() == u.frames.tobytes())
