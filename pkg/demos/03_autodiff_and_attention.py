"""
Gradients and attention
=======================

The recogniser runs on a small tape-based autodiff library.  Every fused op
(LSTM scan, GRU cell, additive attention) has a hand-written backward pass,
checked here against central differences.
"""

import numpy as np

from mmasr import model as M
from mmasr.numcore import grad_check

words = ["dog", "cat", "runs", "red"]
rng = np.random.default_rng(0)
for kind in M.FusionKind:
    cfg = M.ModelConfig(kind=kind, feat_dim=4, visual_dim=5, visual_proj=6, enc_hidden=3, enc_layers=2,
                        subsample_after=(1,), emb_dim=4, dec_hidden=5, att_dim=4)
    m = M.FusionModel(cfg, M.Vocabulary(words), seed=1)
    vis = [rng.normal(size=5)] if kind.multimodal else None
    batch = M.make_batch(m, [rng.normal(size=(8, 4))], vis, [["red", "dog"]])
    rep = grad_check(lambda _: M.batch_loss(m, batch), list(m.params.values()))
    print(f"{kind.value:<11} max relative error {rep.max_rel_error:.1e}")

###############################################################################
# Greedy decoding with the hierarchical model records, at each output step,
# how the decoder split its attention between the audio context and the
# visual vector.  An untrained model has no preference yet.

cfg = M.ModelConfig(kind="HierAttnDF", feat_dim=4, visual_dim=5, visual_proj=6, enc_hidden=3, enc_layers=2,
                    subsample_after=(1,), emb_dim=4, dec_hidden=5, att_dim=4)
m = M.FusionModel(cfg, M.Vocabulary(words), seed=2)
res = M.greedy_decode(m, rng.normal(size=(10, 4)), rng.normal(size=5), max_len=5)
print("tokens:", res.words)
print("visual weight per step:", np.round(res.visual_weights, 3))
print("audio weights sum to", [round(float(a.sum()), 6) for a in res.audio_weights])
