"""Masked reconstruction on synthetic moving-blob clips, then feature extraction.

Run: python demos/mae_pretraining.py   (about 10 s)
"""
import numpy as np

from seqformer.mae import MAEConfig, MAEModel, extract_features, pretrain, sample_mask, synth_clips
from seqformer.rng import Rng

cfg = MAEConfig()
print(f"{cfg.n_tokens} tubelets per clip, {cfg.token_dim} values each; "
      f"{sample_mask(cfg.n_tokens, cfg.mask_ratio).masked_indices.size} masked at ratio {cfg.mask_ratio}")

clips = synth_clips(0, 64, cfg.frames, cfg.height, cfg.width, cfg.channels)
model = MAEModel(cfg, Rng.for_stage(0, "mae:init"))
losses = pretrain(model, clips, steps=300, seed=0)
for s in (0, 50, 100, 200, 299):
    print(f"step {s:3d}  loss {losses[s]:.4f}")
print(f"mean of last 10 / first 10: {np.mean(losses[-10:]) / np.mean(losses[:10]):.3f}")

long_clip = synth_clips(1, 1, 2 * cfg.frames, cfg.height, cfg.width, cfg.channels)[0]
seq = extract_features(model, long_clip, source_id="demo")
print(f"features for a {long_clip.shape[0]}-frame clip: {seq.values.shape} (T, D)")
