import numpy as np
import pytest

from nice_eeg.data_io import SynthSpec, pair, split_train_val, synth_generate
from nice_eeg.encoders import HyperParams
from nice_eeg.preprocess import average_repetitions
from nice_eeg.zeroshot import build_templates

# layout small enough for sub-second training epochs
TINY = dict(C=8, T=100, D=16, signal_window=(10, 60))
TINY_HYPER = dict(k=6, m1=5, m2=7, s2=3)


@pytest.fixture(scope="session")
def tiny_data():
    """Averaged training pairs plus a held-out set with template images."""
    tr_spec = SynthSpec(n_concepts=40, images_per_concept=3, repetitions=2, seed=11,
                        concept_prefix="tr", noise_std=0.5, **TINY)
    te_spec = SynthSpec(n_concepts=10, images_per_concept=1, repetitions=6, seed=12,
                        concept_prefix="te", template_images=3, noise_std=0.5, **TINY)
    eeg, bank, _ = synth_generate(tr_spec)
    teeg, tbank, _ = synth_generate(te_spec)
    ds = pair(average_repetitions(eeg), bank)
    tr, va = split_train_val(ds, 20, 0)
    tpl = tbank.subset([i for i, s in enumerate(tbank.image_ids) if "_tpl" in s])
    tb = build_templates(tpl, stimulus_ids=teeg.stimulus_ids)
    return dict(raw=eeg, bank=bank, ds=ds, train=tr, val=va, test_eeg=teeg, templates=tb)


@pytest.fixture
def tiny_hyper():
    def make(module="none", **kw):
        return HyperParams(C=TINY["C"], T=TINY["T"], D=TINY["D"], spatial_module=module,
                           **{**TINY_HYPER, **kw})
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """Collect the per-criterion verdict lines recorded by the acceptance suite."""
    import sys
    lines = []
    for mod in list(sys.modules.values()):
        lines.extend(getattr(mod, "ACCEPTANCE_RESULTS", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
