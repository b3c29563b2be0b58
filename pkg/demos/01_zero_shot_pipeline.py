"""
Zero-shot decoding on a planted-signal dataset
==============================================

A small end-to-end run: generate EEG whose trials are a fixed linear image of
image features plus noise, train the TSConv encoder contrastively against
those features, then classify held-out concepts by matching against templates
built from images the network never saw.
"""
import numpy as np

from nice_eeg.contrastive import TrainConfig, train
from nice_eeg.data_io import SynthSpec, pair, split_train_val, synth_generate
from nice_eeg.encoders import HyperParams, encode
from nice_eeg.preprocess import average_repetitions
from nice_eeg.zeroshot import build_templates, classify, topk_accuracy

# layout: 16 electrodes, 0.6 s at 250 Hz, 32-d image features
layout = dict(C=16, T=150, D=32, signal_window=(25, 125), noise_std=1.0)
train_spec = SynthSpec(n_concepts=80, images_per_concept=4, repetitions=4, seed=1,
                       concept_prefix="tr", **layout)
test_spec = SynthSpec(n_concepts=20, images_per_concept=1, repetitions=20, seed=2,
                      concept_prefix="te", template_images=5, **layout)
eeg, bank, truth = synth_generate(train_spec)
test_eeg, test_bank, _ = synth_generate(test_spec)
print("training trials:", eeg.epochs.shape, " image features:", bank.features.shape)

# repetitions of the same image are averaged before pairing
ds = pair(average_repetitions(eeg), bank)
tr, va = split_train_val(ds, n_val=32, seed=0)

# smaller kernels than the full-size defaults so this runs in seconds
hyper = HyperParams(C=16, T=150, D=32, k=20, m1=13, m2=25, s2=5)
cfg = TrainConfig(batch_size=64, epochs=15, seed=0, n_val=32)
model, state = train(tr, va, hyper, cfg)
print("train loss", np.round(state.train_loss[::3], 3))
print("val loss  ", np.round(state.val_loss[::3], 3), " best epoch", state.best_epoch)
print("learned exp(t) =", round(model.scale, 2))

# templates come from images that were never shown as stimuli
tpl_rows = [i for i, s in enumerate(test_bank.image_ids) if "_tpl" in s]
templates = build_templates(test_bank.subset(tpl_rows), stimulus_ids=test_eeg.stimulus_ids)

avg = average_repetitions(test_eeg)
feats = encode(avg.epochs[:, None], model)
report = classify(feats, templates, avg.concept_ids, ks=(1, 5))
print(f"{len(templates.concept_ids)}-way zero-shot: top-1 {topk_accuracy(report, 1):.2f}, "
      f"top-5 {topk_accuracy(report, 5):.2f}  (chance {1 / len(templates.concept_ids):.2f})")
