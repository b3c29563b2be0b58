"""
Self- and graph-attention over electrodes
=========================================

Both plug-in modules mix information across electrodes before the temporal
convolution. Neither uses electrode positions, so relabelling the electrodes
just relabels the output rows. After training, Grad-CAM on the module output
points at the electrodes that carry the signal.
"""
import numpy as np

from nice_eeg import analysis as an
from nice_eeg import encoders as enc
from nice_eeg.contrastive import TrainConfig
from nice_eeg.data_io import SynthSpec, pair, synth_generate

rng = np.random.default_rng(0)
C, T = 12, 40
x = rng.standard_normal((C, T))
perm = rng.permutation(C)

wq, wk, wv = rng.standard_normal((3, T, T)) / np.sqrt(T)
sa_out, sa_cache = enc.sa_forward(x, wq, wk, wv)
print("SA attention rows sum to one:", np.allclose(sa_cache[4].sum(axis=-1), 1))
print("SA permutation error:", np.abs(enc.sa_forward(x[perm], wq, wk, wv)[0] - sa_out[perm]).max())

w, a = rng.standard_normal((T, T)) / np.sqrt(T), rng.standard_normal(2 * T) / np.sqrt(T)
ga_out, _ = enc.ga_forward(x, w, a)
print("GA permutation error:", np.abs(enc.ga_forward(x[perm], w, a)[0] - ga_out[perm]).max())

# signal only on electrodes 0..2 of 8
layout = dict(C=8, T=100, D=16, signal_window=(10, 60), noise_std=0.5, signal_electrodes=(0, 1, 2))
eeg, bank, _ = synth_generate(SynthSpec(n_concepts=60, images_per_concept=3, repetitions=1,
                                        seed=21, **layout))
for module in ("sa", "ga"):
    hyper = enc.HyperParams(C=8, T=100, D=16, k=6, m1=5, m2=7, s2=3, spatial_module=module)
    model = an.make_factory(hyper, TrainConfig(batch_size=20, epochs=30, seed=0, n_val=20))(pair(eeg, bank))
    targets = np.stack([bank.get(s) for s in eeg.stimulus_ids])
    weights = an.grad_cam_spatial(model, eeg.epochs, targets)
    print(module.upper(), "Grad-CAM:", np.round(weights, 2), " top-3:", sorted(np.argsort(-weights)[:3].tolist()))
