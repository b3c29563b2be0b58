"""
Time-frequency power and concept similarity
===========================================

Morlet power of a toy occipital recording, then an RDM (here a similarity
matrix) between EEG features and image templates when concepts cluster into
categories.
"""
import numpy as np

from nice_eeg import analysis as an
from nice_eeg.data_io import EEGEpochSet, SynthSpec, synth_generate
from nice_eeg.zeroshot import build_templates

sr, n = 250.0, 250
t = np.arange(n) / sr
rng = np.random.default_rng(0)
# a 10 Hz burst in the first half, a 24 Hz burst in the second
sig = np.where(t < 0.5, np.sin(2 * np.pi * 10 * t), 0.6 * np.sin(2 * np.pi * 24 * t))
trials = sig + 0.3 * rng.standard_normal((20, 3, n))
eeg = EEGEpochSet(trials, sr, ["O1", "Oz", "O2"], [f"s{i}" for i in range(20)], ["c"] * 20, np.zeros(20))
tf = an.time_frequency(eeg, "occipital", freqs=np.arange(4.0, 41.0, 2.0))
for label, cols in (("0.1-0.4 s", slice(25, 100)), ("0.6-0.9 s", slice(150, 225))):
    peak = tf.freqs[np.argmax(tf.power[:, cols].mean(axis=1))]
    print(f"peak frequency {label}: {peak:g} Hz")

# RDM with planted categories: features are noisy copies of the templates
spec = SynthSpec(n_concepts=25, images_per_concept=1, repetitions=1, C=4, T=50, D=32,
                 signal_window=(0, 10), n_categories=5, category_spread=0.4, template_images=4)
_, bank, truth = synth_generate(spec)
tpl = bank.subset([i for i, s in enumerate(bank.image_ids) if "_tpl" in s])
templates = build_templates(tpl)
names = list(an.CATEGORY_ORDER)
cmap = {c: names[k] for c, k in truth.categories.items()}
feats = templates.templates + 0.5 * rng.standard_normal(templates.templates.shape) / np.sqrt(32)
m = an.rdm_from_features(feats, templates, cmap)
within, between = m.block_means()
print(f"RDM blocks: within-category {within:.2f}, between {between:.2f}")
print("category order:", list(dict.fromkeys(m.categories)))
