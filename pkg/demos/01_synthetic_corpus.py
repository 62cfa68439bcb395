"""
A grounded toy corpus
=====================

Every word gets an acoustic prototype (a short run of feature frames) and,
depending on its category, a visual embedding.  Nouns, places, adjectives,
colours and cardinals are fully visible in the "image"; verbs half so;
adverbs and function words not at all.  An utterance's visual vector is the
mean embedding of its visible words plus a little noise.
"""

import numpy as np

from mmasr import synthdata as S

vocab = S.gen_vocab(seed=0)
print(len(vocab), "words;", {c: len(vocab.by_category(c)) for c in S.CATEGORIES})

# embedding norms encode how groundable each category is
norms = np.linalg.norm(vocab.embeddings, axis=1)
for cat in S.CATEGORIES:
    print(f"{cat:<9} |e| = {norms[vocab.by_category(cat)].mean():.2f}")

###############################################################################
# Sentences follow a fixed slot grammar.  Each adverb is tied to a verb's
# preferred adverb most of the time, which gives a language model something
# to learn even when the adverb itself is masked.

corpus = S.gen_corpus(vocab, 5, seed=1)
for u in corpus:
    print(f"{u.uid}  {' '.join(u.words):<40} {u.n_frames} frames")

###############################################################################
# The visual vector alone pins down which visible words were said: an
# exhaustive decoder over the grammar's presence patterns recovers the bag.

u = corpus[0]
print("visible words:", S.groundable_bag(vocab, u.words))
print("decoded from v:", S.oracle_visual_decode(vocab, u.visual))

###############################################################################
# And with clean audio, nearest-prototype matching over the true alignments
# recovers the transcript, so both modalities carry the information a
# recogniser needs.

clean = S.gen_corpus(vocab, 3, noise=S.Noise(acoustic=0.0), seed=2)
for u in clean:
    print(S.nearest_prototype_decode(vocab, u.frames, u.alignments) == u.words)
