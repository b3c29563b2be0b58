import json
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from nice_eeg import data_io as dio
from nice_eeg.data_io import EEGEpochSet, FeatureBank, SynthSpec


def make_epochs(n=10, C=63, T=250, seed=0, reps=1):
    rng = np.random.default_rng(seed)
    stim = [f"img_{i // reps}" for i in range(n)]
    return EEGEpochSet(rng.standard_normal((n, C, T)).astype(np.float32), 250.0,
                       [f"E{c}" for c in range(C)], stim, [f"c{i // reps % 3}" for i in range(n)],
                       np.arange(n) % reps, tmin=-0.2)


def make_bank(n=5, D=768, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureBank(rng.standard_normal((n, D)).astype(np.float32),
                       [f"img_{i}" for i in range(n)], [f"c{i % 3}" for i in range(n)], "clip-test")


def test_epochs_round_trip_bit_exact(tmp_path):
    eeg = make_epochs()
    dio.save_epochs(eeg, tmp_path / "a.eegt")
    back = dio.load_epochs(tmp_path / "a.eegt")
    assert back.epochs.tobytes() == eeg.epochs.tobytes()
    assert back.channel_names == eeg.channel_names
    assert back.stimulus_ids == eeg.stimulus_ids and back.concept_ids == eeg.concept_ids
    np.testing.assert_array_equal(back.repetition_index, eeg.repetition_index)
    assert back.sample_rate == 250.0 and back.tmin == -0.2


def test_eegt_layout(tmp_path):
    dio.save_epochs(make_epochs(n=2, C=3, T=4), tmp_path / "a.eegt")
    data = (tmp_path / "a.eegt").read_bytes()
    assert data[:4] == b"EEGT"
    assert struct.unpack_from("<I3Q", data, 4) == (1, 2, 3, 4)
    end = 4 + 4 + 24 + 4 * 24
    (mlen,) = struct.unpack_from("<Q", data, end)
    meta = json.loads(data[end + 8:end + 8 + mlen])
    assert set(meta) >= {"sample_rate", "channel_names", "stimulus_ids", "concept_ids",
                         "repetition_index"}


def test_bank_round_trip_and_lookup(tmp_path):
    bank = make_bank()
    dio.save_feature_bank(bank, tmp_path / "b.feat")
    back = dio.load_feature_bank(tmp_path / "b.feat")
    assert back.features.tobytes() == bank.features.tobytes()
    assert back.dim == 768 and back.encoder_tag == "clip-test"
    np.testing.assert_array_equal(back.get("img_3"), bank.features[3])
    assert back.row_of("img_4") == 4


def test_bad_magic_and_version(tmp_path):
    dio.save_epochs(make_epochs(n=2, C=2, T=5), tmp_path / "a.eegt")
    data = (tmp_path / "a.eegt").read_bytes()
    (tmp_path / "m.eegt").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "v.eegt").write_bytes(data[:4] + struct.pack("<I", 7) + data[8:])
    for name in ("m.eegt", "v.eegt"):
        with pytest.raises(dio.FormatError):
            dio.load_epochs(tmp_path / name)
    with pytest.raises(dio.FormatError):
        dio.load_feature_bank(tmp_path / "a.eegt")


def test_truncated_and_overflowing_payloads(tmp_path):
    eeg = make_epochs(n=10, C=2, T=5)
    dio.save_epochs(eeg, tmp_path / "a.eegt")
    data = bytearray((tmp_path / "a.eegt").read_bytes())
    # header says 10 trials, payload holds 9
    nine = data[:32] + data[32:32 + 9 * 2 * 5 * 4]
    (tmp_path / "short.eegt").write_bytes(bytes(nine))
    huge = bytearray(data)
    struct.pack_into("<Q", huge, 8, 2**62)
    (tmp_path / "huge.eegt").write_bytes(bytes(huge))
    (tmp_path / "tail.eegt").write_bytes(bytes(data[:-3]))
    for name in ("short.eegt", "huge.eegt", "tail.eegt"):
        with pytest.raises(dio.CorruptionError):
            dio.load_epochs(tmp_path / name)


def test_bank_integrity_errors(tmp_path):
    with pytest.raises(dio.IntegrityError, match="img_3"):
        FeatureBank(np.ones((2, 4)), ["img_3", "img_3"], ["a", "b"])
    feats = np.ones((2, 4))
    feats[1] = 0
    with pytest.raises(dio.IntegrityError, match="zero-norm"):
        FeatureBank(feats, ["a", "b"], ["a", "b"])
    # the same checks apply on load
    bank = make_bank(n=2, D=3)
    dio.save_feature_bank(bank, tmp_path / "b.feat")
    raw = (tmp_path / "b.feat").read_bytes().replace(b'"img_1"', b'"img_0"')
    (tmp_path / "dup.feat").write_bytes(raw)
    with pytest.raises(dio.IntegrityError):
        dio.load_feature_bank(tmp_path / "dup.feat")


def test_epoch_set_invariants():
    eeg = make_epochs(n=4, C=2, T=3)
    with pytest.raises(dio.IntegrityError):
        EEGEpochSet(eeg.epochs, 250.0, ["a"], eeg.stimulus_ids, eeg.concept_ids, eeg.repetition_index)
    with pytest.raises(dio.IntegrityError):
        EEGEpochSet(eeg.epochs, 250.0, eeg.channel_names, ["s"] * 4, eeg.concept_ids, np.zeros(4))
    with pytest.raises(dio.IntegrityError):
        EEGEpochSet(eeg.epochs, 0.0, eeg.channel_names, eeg.stimulus_ids, eeg.concept_ids,
                    eeg.repetition_index)


def test_pairing_matches_stimulus_ids():
    eeg = make_epochs(n=8, C=2, T=3, reps=2)
    bank = make_bank(n=6, D=4)
    ds = dio.pair(eeg, bank)
    for trial, row in ds.pairs:
        assert bank.image_ids[row] == eeg.stimulus_ids[trial]
    with pytest.raises(dio.IntegrityError):
        dio.pair(eeg, make_bank(n=2, D=4))


def _fake_ds(n):
    eeg = EEGEpochSet(np.zeros((n, 1, 1), np.float32), 250.0, ["E0"], [f"s{i}" for i in range(n)],
                      ["c"] * n, np.zeros(n))
    bank = FeatureBank(np.ones((n, 1), np.float32), [f"s{i}" for i in range(n)], ["c"] * n)
    return dio.pair(eeg, bank)


def test_split_sizes_and_determinism():
    ds = _fake_ds(16540)
    tr, va = dio.split_train_val(ds)
    assert (len(tr), len(va)) == (15800, 740)
    assert not set(tr.pairs[:, 0]) & set(va.pairs[:, 0])
    assert len(set(tr.pairs[:, 0]) | set(va.pairs[:, 0])) == 16540
    tr2, va2 = dio.split_train_val(ds)
    np.testing.assert_array_equal(va.pairs, va2.pairs)
    _, va3 = dio.split_train_val(ds, seed=1)
    assert len(va3) == 740 and not np.array_equal(va.pairs, va3.pairs)
    with pytest.raises(ValueError):
        dio.split_train_val(_fake_ds(10), n_val=10)


# -- synthetic oracle -------------------------------------------------------

def test_synth_noiseless_trials_equal_mixture():
    spec = SynthSpec(n_concepts=4, images_per_concept=2, repetitions=1, C=4, T=30, D=8,
                     noise_std=0.0, signal_window=(5, 20))
    eeg, bank, truth = dio.synth_generate(spec)
    A = truth.mixing
    assert A.shape == (4 * 15, 8)
    for i, s in enumerate(eeg.stimulus_ids):
        clean = (A @ bank.get(s).astype(np.float64)).reshape(4, 15)
        np.testing.assert_allclose(eeg.epochs[i][:, 5:20], clean, rtol=1e-5, atol=1e-6)
        assert not eeg.epochs[i][:, :5].any() and not eeg.epochs[i][:, 20:].any()
    np.testing.assert_allclose(np.linalg.norm(truth.concepts.features, axis=1), 1, rtol=1e-6)


def test_synth_default_window_and_determinism():
    spec = SynthSpec(n_concepts=3, images_per_concept=2, repetitions=2, C=4, T=250, D=8)
    assert spec.signal_window == (25, 150)
    assert spec.signal_window[0] / spec.sample_rate == 0.1
    assert spec.signal_window[1] / spec.sample_rate == 0.6
    a, b = dio.synth_generate(spec), dio.synth_generate(spec)
    assert a[0].epochs.tobytes() == b[0].epochs.tobytes()
    assert a[1].features.tobytes() == b[1].features.tobytes()


def test_synth_mixing_shared_across_layouts():
    s1 = SynthSpec(n_concepts=3, C=4, T=50, D=8, signal_window=(0, 10), seed=1, mixing_seed=7)
    s2 = SynthSpec(n_concepts=5, C=4, T=50, D=8, signal_window=(0, 10), seed=2, mixing_seed=7)
    np.testing.assert_array_equal(dio.mixing_matrix(s1), dio.mixing_matrix(s2))


@pytest.mark.parametrize("kw", [dict(n_concepts=0), dict(signal_window=(10, 5)),
                                dict(signal_window=(0, 300)), dict(signal_electrodes=(40,))])
def test_synth_spec_validation(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)


def test_synth_templates_are_not_stimuli():
    spec = SynthSpec(n_concepts=3, images_per_concept=1, repetitions=2, C=4, T=50, D=8,
                     signal_window=(0, 10), template_images=2)
    eeg, bank, _ = dio.synth_generate(spec)
    tpl = [i for i in bank.image_ids if "_tpl" in i]
    assert len(tpl) == 6 and not set(tpl) & set(eeg.stimulus_ids)


def test_ground_truth_files(tmp_path):
    spec = SynthSpec(n_concepts=3, C=4, T=50, D=8, signal_window=(0, 10))
    _, _, truth = dio.synth_generate(spec)
    dio.save_ground_truth(truth, tmp_path / "gt")
    back = dio.load_feature_bank(tmp_path / "gt.feat")
    np.testing.assert_array_equal(back.features, truth.concepts.features)
    raw = (tmp_path / "gt_mixing.f32").read_bytes()
    rows, cols = struct.unpack_from("<2Q", raw)
    A = np.frombuffer(raw, "<f4", offset=16).reshape(rows, cols)
    np.testing.assert_array_equal(A, truth.mixing.astype(np.float32))


@settings(max_examples=20, deadline=None,
          suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(n=st.integers(1, 6), C=st.integers(1, 5), T=st.integers(2, 40), seed=st.integers(0, 2**32 - 1))
def test_epochs_round_trip_property(tmp_path_factory, n, C, T, seed):
    path = tmp_path_factory.mktemp("rt") / "x.eegt"
    eeg = make_epochs(n=n, C=C, T=T, seed=seed)
    dio.save_epochs(eeg, path)
    assert dio.load_epochs(path).epochs.tobytes() == eeg.epochs.tobytes()
