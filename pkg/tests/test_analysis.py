import csv
import hashlib
import json

import numpy as np
import pytest
from scipy.stats import binom

from conftest import TINY, TINY_HYPER
from nice_eeg import analysis as an
from nice_eeg import preprocess as pp
from nice_eeg.contrastive import TrainConfig
from nice_eeg.data_io import EEGEpochSet, SynthSpec, pair, synth_generate
from nice_eeg.encoders import HyperParams, init_params, save_checkpoint
from nice_eeg.zeroshot import TemplateBank, build_templates


def chance_bound(n_trials, n_concepts, q=0.999):
    """Upper ``q`` quantile of top-1 accuracy for an uninformed classifier."""
    return binom.ppf(q, n_trials, 1.0 / n_concepts) / n_trials


def eval_set(spec):
    eeg, bank, truth = synth_generate(spec)
    tpl = bank.subset([i for i, s in enumerate(bank.image_ids) if "_tpl" in s])
    return an.EvalSet(eeg, build_templates(tpl, stimulus_ids=eeg.stimulus_ids)), truth


@pytest.fixture(scope="module")
def model(tiny_data):
    h = HyperParams(C=TINY["C"], T=TINY["T"], D=TINY["D"], spatial_module="sa", **TINY_HYPER)
    factory = an.make_factory(h, TrainConfig(batch_size=20, epochs=30, seed=0, n_val=20))
    return factory(tiny_data["ds"])


@pytest.fixture(scope="module")
def test_set(tiny_data):
    return an.EvalSet(tiny_data["test_eeg"], tiny_data["templates"])


# -- evaluation -------------------------------------------------------------

def test_evaluate_averages_in_signal_space(model, test_set):
    rep = an.evaluate(model, test_set)
    assert len(rep.true_index) == 10  # 60 trials, 6 repetitions each
    direct = an.evaluate(model, an.EvalSet(pp.average_repetitions(test_set.eeg), test_set.templates))
    np.testing.assert_array_equal(rep.similarity, direct.similarity)
    feat = an.evaluate(model, test_set, feature_average=True)
    assert len(feat.true_index) == 10
    assert an.topk_accuracy(rep, 1) > 0.3


# -- time -------------------------------------------------------------------

def test_time_window_grids():
    assert an.time_windows(1000, "forward")[:2] == [(0.0, 100.0), (0.0, 200.0)]
    assert an.time_windows(1000, "forward")[-1] == (0.0, 1000.0)
    assert an.time_windows(1000, "backward")[:2] == [(0.0, 1000.0), (100.0, 1000.0)]
    seg = an.time_windows(1000, "segment")
    assert len(seg) == 10 and seg[-1] == (900.0, 1000.0)
    with pytest.raises(ValueError):
        an.time_windows(1000, "sideways")


def test_time_sweep_full_point_is_unmasked_accuracy(model, test_set):
    r = an.sweep_time(model, test_set, "forward", step_ms=100)
    assert r.values[0] == "full" and r.values[-1] == "0-400"
    base = an._scores(an.evaluate(model, test_set))
    assert r.point("full") == base
    assert r.point("0-400") == base
    assert r.meta["retrained"] is False


def test_time_sweep_chance_outside_planted_window(model):
    # the planted window spans samples [10, 60) = [40, 240) ms
    test, _ = eval_set(SynthSpec(n_concepts=30, images_per_concept=4, repetitions=1, seed=13,
                                 concept_prefix="tw", template_images=3, noise_std=0.5, **TINY))
    r = an.sweep_time(model, test, "segment", step_ms=40, width_ms=40)
    bound = chance_bound(120, 30)
    outside = [v for v in r.values[1:] if float(v.split("-")[0]) >= 240 or float(v.split("-")[1]) <= 40]
    inside = [v for v in r.values[1:] if v not in outside]
    assert outside and inside
    for v in outside:
        assert r.point(v)[0] <= bound, v
    assert max(r.point(v)[0] for v in inside) > bound


def test_time_sweep_retrain_flag(tiny_data, tiny_hyper, test_set):
    calls = []

    def factory(ds):
        calls.append(ds)
        return init_params(tiny_hyper("sa"), 0)
    p = init_params(tiny_hyper("sa"), 0)
    r = an.sweep_time(p, test_set, "segment", step_ms=200, width_ms=200, factory=factory,
                      train_ds=tiny_data["ds"])
    assert len(calls) == 2 and r.meta["retrained"]
    masked = calls[0].eeg.epochs
    assert not masked[..., 50:].any() and masked[..., :50].any()


# -- space ------------------------------------------------------------------

def test_region_sweep_baseline_and_all(model, test_set):
    half = test_set.eeg.channel_names[:4]
    r = an.sweep_regions(model, test_set, regions=[half, "all"])
    assert r.values == ["none", "+".join(half), "all"]
    assert r.point("none") == an._scores(an.evaluate(model, test_set))
    # zero input gives every trial the same ranking: exactly one concept is hit
    assert r.point("all")[0] == pytest.approx(0.1)


def test_region_sweep_default_regions_with_overrides(model, test_set):
    names = test_set.eeg.channel_names
    overrides = {ch: pp.REGIONS[i % 5] for i, ch in enumerate(names)}
    r = an.sweep_regions(model, test_set, overrides=overrides)
    assert r.values == ["none", *pp.REGIONS]
    assert r.meta["channels"]["frontal"] == [names[0], names[5]]


# -- retraining sweeps ------------------------------------------------------

def test_band_sweep_planted_theta():
    tr = SynthSpec(n_concepts=40, images_per_concept=3, repetitions=2, seed=11, concept_prefix="tr",
                   noise_std=0.5, carrier_hz=6.0, **TINY)
    te = SynthSpec(n_concepts=10, images_per_concept=1, repetitions=6, seed=12, concept_prefix="te",
                   template_images=3, noise_std=0.5, carrier_hz=6.0, **TINY)
    eeg, bank, _ = synth_generate(tr)
    test, _ = eval_set(te)
    h = HyperParams(C=TINY["C"], T=TINY["T"], D=TINY["D"], **TINY_HYPER)
    factory = an.make_factory(h, TrainConfig(batch_size=20, epochs=30, seed=0, n_val=20))
    r = an.sweep_bands(factory, pair(pp.average_repetitions(eeg), bank), test,
                       [pp.BANDS["theta"], pp.BANDS["gamma"]])
    assert r.values == ["full", "theta", "gamma"] and r.meta["retrained_per_band"]
    full, theta, gamma = r.top1
    assert theta >= full - 0.1 and theta >= 0.6
    assert gamma <= chance_bound(10, 10)


def test_subsample_training():
    eeg, _, _ = synth_generate(SynthSpec(n_concepts=8, images_per_concept=1, repetitions=4, C=2,
                                         T=20, D=4, signal_window=(0, 10)))
    half = an.subsample_training(eeg, 0.5, "conditions", seed=1)
    assert len(set(half.stimulus_ids)) == 4 and half.n_trials == 16
    reps = an.subsample_training(eeg, 0.25, "repetitions", seed=1)
    assert len(set(reps.repetition_index.tolist())) == 1 and reps.n_trials == 8
    assert an.subsample_training(eeg, 1.0, "conditions").n_trials == 32
    assert an.subsample_training(eeg, 0.5, "conditions", 1).stimulus_ids == half.stimulus_ids
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            an.subsample_training(eeg, bad, "conditions")
    with pytest.raises(ValueError):
        an.subsample_training(eeg, 0.5, "images")


def test_default_grids():
    assert an.DEFAULT_FRACTIONS == (0.25, 0.5, 0.75, 1.0)
    assert an.DEFAULT_TEST_REPS == tuple(range(5, 81, 5))
    assert list(pp.BANDS) == ["delta", "theta", "alpha", "beta", "gamma"]


def _size_data(seed):
    tr = SynthSpec(n_concepts=80, images_per_concept=3, repetitions=4, seed=11 + seed, concept_prefix="tr",
                   noise_std=2.0, mixing_seed=seed, **TINY)
    te = SynthSpec(n_concepts=30, images_per_concept=1, repetitions=20, seed=12 + seed, concept_prefix="te",
                   template_images=3, noise_std=2.0, mixing_seed=seed, **TINY)
    eeg, bank, _ = synth_generate(tr)
    return eeg, bank, eval_set(te)[0]


@pytest.mark.slow
def test_size_and_repetition_sweeps_mean_monotone():
    h = HyperParams(C=TINY["C"], T=TINY["T"], D=TINY["D"], **TINY_HYPER)
    factory = an.make_factory(h, TrainConfig(batch_size=20, epochs=20, seed=0, n_val=20))
    sizes, reps = [], []
    for seed in range(3):
        eeg, bank, test = _size_data(seed)
        sizes.append(an.sweep_training_size(factory, eeg, bank, test, seed=seed).top1)
        model = factory(pair(pp.average_repetitions(eeg), bank))
        reps.append(an.sweep_test_repetitions(model, test, reps=(1, 5, 10, 20)).top1)
    for curve in (np.mean(sizes, axis=0), np.mean(reps, axis=0)):
        assert np.all(np.diff(curve) >= 0), curve
        assert curve[-1] > curve[0]


def test_test_repetition_sweep_full_matches_evaluate(model, test_set):
    r = an.sweep_test_repetitions(model, test_set, reps=(2, 6))
    assert r.point(6) == an._scores(an.evaluate(model, test_set))
    with pytest.raises(ValueError):
        an.sweep_test_repetitions(model, test_set, reps=(7,))


# -- resumability and outputs -----------------------------------------------

def test_sweeps_resume_from_point_records(model, test_set, tmp_path, monkeypatch):
    first = an.sweep_regions(model, test_set, regions=["all"], out_dir=tmp_path, run_key="k1")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ablated_000.json", "ablated_001.json"]

    def boom(*a, **k):
        raise AssertionError("point was recomputed")
    monkeypatch.setattr(an, "evaluate", boom)
    again = an.sweep_regions(model, test_set, regions=["all"], out_dir=tmp_path, run_key="k1")
    assert again.top1 == first.top1
    with pytest.raises(AssertionError, match="recomputed"):
        an.sweep_regions(model, test_set, regions=["all"], out_dir=tmp_path, run_key="k2")


def test_parallel_sweep_matches_serial(model, test_set):
    a = an.sweep_time(model, test_set, "segment", step_ms=100)
    b = an.sweep_time(model, test_set, "segment", step_ms=100, n_jobs=3)
    assert a.top1 == b.top1 and a.top5 == b.top5


def test_sweep_csv_and_manifest(model, test_set, tmp_path):
    r = an.sweep_regions(model, test_set, regions=["all"])
    r.to_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["ablated", "top1", "top5"] and len(rows) == 3
    save_checkpoint(model, tmp_path / "m.nice")
    an.write_manifest(tmp_path / "m.json", {"space": r}, seeds=[0], checkpoint=tmp_path / "m.nice")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["checkpoint_sha256"] == hashlib.sha256((tmp_path / "m.nice").read_bytes()).hexdigest()
    assert doc["sweeps"]["space"]["values"] == ["none", "all"] and doc["seeds"] == [0]
    with pytest.raises(ValueError):
        an.SweepResult("x", [1, 2], [0.1], [0.2])


# -- RDM --------------------------------------------------------------------

def test_rdm_identity_features():
    rng = np.random.default_rng(0)
    T = rng.standard_normal((6, 5))
    tb = TemplateBank(T / np.linalg.norm(T, axis=1, keepdims=True), [f"c{i}" for i in range(6)])
    cmap = {"c0": "tool", "c1": "animal", "c2": "food", "c3": "animal", "c4": "others", "c5": "vehicle"}
    m = an.rdm_from_features(tb.templates, tb, cmap)
    np.testing.assert_allclose(np.diag(m.matrix), 1.0, rtol=0, atol=1e-12)
    assert m.matrix.min() >= -1 and m.matrix.max() <= 1
    assert m.concept_ids == ["c1", "c3", "c2", "c5", "c0", "c4"]
    assert m.categories == ["animal", "animal", "food", "vehicle", "tool", "others"]


def test_rdm_category_blocks(model, tiny_data):
    test, truth = eval_set(SynthSpec(n_concepts=20, images_per_concept=1, repetitions=4, seed=14,
                                     concept_prefix="rd", template_images=3, noise_std=0.5,
                                     n_categories=4, category_spread=0.3, **TINY))
    names = list(an.CATEGORY_ORDER)
    cmap = {c: names[i] for c, i in truth.categories.items()}
    m = an.rdm(model, test, cmap)
    within, between = m.block_means()
    assert within > between
    assert m.matrix.shape == (20, 20) and np.abs(m.matrix).max() <= 1
    dropped = sorted(cmap)[0]
    del cmap[dropped]
    with pytest.raises(pp.MappingError, match=dropped):
        an.rdm(model, test, cmap)


def test_rdm_csv(tmp_path):
    tb = TemplateBank(np.eye(2), ["a", "b"])
    an.rdm_from_features(np.eye(2), tb, {"a": "food", "b": "animal"}).to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["concept", "category", "b", "a"] and rows[1][:3] == ["b", "animal", "1.000000"]


# -- time-frequency ---------------------------------------------------------

def _tone_set(signal, names=("O1", "Oz", "Fz")):
    data = np.stack([signal] * len(names))[None]
    return EEGEpochSet(data, 250.0, list(names), ["s0"], ["c"], np.zeros(1))


def test_tfr_ridge_at_tone():
    t = np.arange(250) / 250.0
    tf = an.time_frequency(_tone_set(np.sin(2 * np.pi * 10 * t)), "occipital")
    row = {f: i for i, f in enumerate(tf.freqs)}
    mid = slice(60, 190)
    assert tf.power[row[10.0], mid].mean() >= 10 * tf.power[row[30.0], mid].mean()
    assert tf.power.min() >= 0
    # unit sine -> wavelet magnitude 1/2 -> power 1/4 away from the edges
    assert tf.power[row[10.0], 125] == pytest.approx(0.25, rel=0.02)
    assert tf.power.shape == (50, 250) and tf.freqs[0] == 2 and tf.freqs[-1] == 100


@pytest.mark.parametrize("freq", [6.0, 12.0, 22.0, 40.0])
def test_tfr_ridge_location(freq):
    t = np.arange(250) / 250.0
    x = np.sin(2 * np.pi * freq * t) + 0.5 * np.sin(2 * np.pi * 70 * t)
    tf = an.time_frequency(_tone_set(x), ["O1"], freqs=np.arange(2.0, 60.0, 2.0))
    got = tf.freqs[np.argmax(tf.power[:, 60:190].mean(axis=1))]
    assert abs(got - freq) <= 2.0


def test_tfr_zero_and_errors(tmp_path):
    tf = an.time_frequency(_tone_set(np.zeros(250)), ["O1", "Oz"])
    assert not tf.power.any()
    tf.to_csv(tmp_path / "t.csv")
    assert len(list(csv.reader(open(tmp_path / "t.csv")))) == 51
    x = _tone_set(np.zeros(250))
    with pytest.raises(ValueError, match="empty"):
        an.time_frequency(x, "temporal")
    with pytest.raises(ValueError):
        an.time_frequency(x, ["O1"], freqs=[10.0, 130.0])
    with pytest.raises(pp.MappingError):
        an.time_frequency(x, ["O1", "P9"])


# -- Grad-CAM ---------------------------------------------------------------

def test_grad_cam_normalized(model, tiny_data):
    avg = pp.average_repetitions(tiny_data["test_eeg"])
    tb = tiny_data["templates"]
    targets = tb.templates[[tb.index_of(c) for c in avg.concept_ids]]
    w = an.grad_cam_spatial(model, avg.epochs, targets)
    assert w.shape == (TINY["C"],)
    assert w.min() >= 0 and w.max() == 1.0
    batched = an.grad_cam_spatial(model, avg.epochs, targets, batch_size=3)
    np.testing.assert_allclose(batched, w, rtol=1e-5)


def test_grad_cam_zero_activation(tiny_hyper):
    p = init_params(tiny_hyper("ga"), 0)
    w = an.grad_cam_spatial(p, np.zeros((2, TINY["C"], TINY["T"]), np.float32), np.ones(TINY["D"]))
    np.testing.assert_array_equal(w, 0)


def test_grad_cam_needs_module(tiny_hyper):
    with pytest.raises(an.UnsupportedModelError):
        an.grad_cam_spatial(init_params(tiny_hyper(), 0), np.zeros((1, 8, 100)), np.ones(16))


def test_grad_cam_localizes_planted_electrodes():
    spec = dict(signal_electrodes=(0, 1, 2), noise_std=0.5, **TINY)
    eeg, bank, _ = synth_generate(SynthSpec(n_concepts=60, images_per_concept=3, repetitions=1,
                                            seed=21, concept_prefix="gc", **spec))
    h = HyperParams(C=TINY["C"], T=TINY["T"], D=TINY["D"], spatial_module="sa", **TINY_HYPER)
    p = an.make_factory(h, TrainConfig(batch_size=20, epochs=30, seed=0, n_val=20))(pair(eeg, bank))
    feats = np.stack([bank.get(s) for s in eeg.stimulus_ids])
    w = an.grad_cam_spatial(p, eeg.epochs, feats)
    assert set(np.argsort(-w)[:3].tolist()) == {0, 1, 2}
