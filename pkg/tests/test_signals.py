import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from waveformer.errors import InputError, ParameterError, ParseError
from waveformer.signals import (CsvSchema, Recording, SynthConfig, burst_energy, class_channels,
                                class_frequencies, distractor_starts, fit_length, load_csv,
                                make_windows, save_csv, segment, split_indices, synth_gestures,
                                window_offsets, zscore_normalize)


class TestZscore:
    def test_hand_computed(self):
        out = zscore_normalize(Recording([[1.0, 2.0, 3.0]], 0)).samples[0]
        np.testing.assert_allclose(out, [-1.2247448714, 0.0, 1.2247448714], atol=1e-9)

    def test_constant_channel_maps_to_zero(self):
        out = zscore_normalize(Recording([[5.0, 5.0, 5.0]], 0)).samples
        np.testing.assert_array_equal(out, [[0.0, 0.0, 0.0]])

    def test_statistics_and_idempotence(self, rng):
        rec = Recording(rng.standard_normal((4, 300)) * 7 + 3, 1)
        once = zscore_normalize(rec)
        np.testing.assert_allclose(once.samples.mean(1), 0, atol=1e-6)
        np.testing.assert_allclose(once.samples.std(1), 1, atol=1e-6)
        np.testing.assert_allclose(zscore_normalize(once).samples, once.samples, atol=1e-6)

    def test_single_sample_rejected(self):
        with pytest.raises(InputError):
            zscore_normalize(Recording([[1.0]], 0))

    def test_empty_recording_rejected(self):
        with pytest.raises(InputError):
            Recording(np.zeros((2, 0)), 0)


class TestSegment:
    def test_offsets_l400(self):
        assert window_offsets(400, 200, 0.5) == [0, 100, 200]

    def test_single_window(self):
        assert window_offsets(200, 200, 0.5) == [0]

    def test_short_tail_dropped(self):
        assert window_offsets(250, 200, 0.5) == [0, 100]

    def test_half_real_tail_is_padded(self):
        # tail 200..300 is new signal and exactly half a window
        wins = segment(Recording(np.ones((2, 300)), 0), 200, 0.0)
        assert [w[2] for w in wins] == [0, 200]
        np.testing.assert_array_equal(wins[1][0][:, 100:], 0.0)
        tail = segment(Recording(np.ones((1, 350)), 0), 200, 0.5)[-1]
        assert tail[2] == 200 and tail[0].shape == (1, 200)
        np.testing.assert_array_equal(tail[0][0, 150:], 0.0)

    def test_tail_without_new_samples_dropped(self):
        assert window_offsets(300, 200, 0.5) == [0, 100]
        assert window_offsets(299, 200, 0.0) == [0]

    def test_invalid_window(self):
        with pytest.raises(ParameterError):
            window_offsets(100, 0)
        with pytest.raises(ParameterError):
            window_offsets(100, 10, 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 2000), st.integers(1, 300), st.sampled_from([0.0, 0.25, 0.5, 0.75]))
    def test_full_window_count(self, length, window, overlap):
        stride = max(1, int(round(window * (1 - overlap))))
        offs = window_offsets(length, window, overlap)
        full = [o for o in offs if o + window <= length]
        if length >= window:
            assert len(full) == (length - window) // stride + 1
        assert offs == sorted(offs) and all(o % stride == 0 for o in offs)
        ends = [min(o + window, length) for o in offs]
        assert all(b > a for a, b in zip(ends, ends[1:]))  # every window adds new samples
        assert all(2 * min(window, length - o) >= window for o in offs)

    def test_majority_label(self):
        labels = np.array([0] * 120 + [1] * 80)
        ((chunk, lab, off),) = segment(Recording(np.zeros((1, 200)), labels), 200)
        assert lab == 0

    def test_fit_length(self):
        x = np.arange(6.0).reshape(1, 6)
        np.testing.assert_array_equal(fit_length(x, 4), [[0, 1, 2, 3]])
        np.testing.assert_array_equal(fit_length(x, 8), [[0, 1, 2, 3, 4, 5, 0, 0]])


class TestSplit:
    def test_disjoint_cover_and_deterministic(self):
        labels = np.repeat(np.arange(6), 50)
        a = split_indices(labels, 3)
        b = split_indices(labels, 3)
        for x, y in zip((a.train, a.val, a.test), (b.train, b.val, b.test)):
            np.testing.assert_array_equal(x, y)
        allidx = np.concatenate([a.train, a.val, a.test])
        assert len(allidx) == len(set(allidx.tolist())) == 300
        assert len(a.val) == len(a.test) == 30
        for c in range(6):
            assert (labels[a.test] == c).sum() == 5

    def test_seed_changes_split(self):
        labels = np.repeat(np.arange(3), 40)
        assert not np.array_equal(split_indices(labels, 0).test, split_indices(labels, 1).test)


class TestSynthetic:
    def test_deterministic(self):
        a = synth_gestures(6, 8, 3, seed=11)
        b = synth_gestures(6, 8, 3, seed=11)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.samples, rb.samples)
        c = synth_gestures(6, 8, 3, seed=12)
        assert not np.array_equal(a[0].samples, c[0].samples)

    def test_class_balance_and_shape(self):
        recs = synth_gestures(6, 8, 4, seed=0)
        assert len(recs) == 24
        assert np.bincount([r.label for r in recs]).tolist() == [4] * 6
        assert all(r.samples.shape == (8, 200) for r in recs)

    def test_frequencies_geometric_below_quarter_rate(self):
        f = class_frequencies(6)
        np.testing.assert_allclose(f[1:] / f[:-1], SynthConfig().f_ratio)
        assert f.max() < 0.25
        with pytest.raises(ParameterError):
            class_frequencies(6, SynthConfig(f_min=0.2))

    def test_class_peak_frequency_bins_differ(self):
        recs = synth_gestures(6, 8, 40, seed=0)
        nfft = 200
        peaks = []
        for k in range(6):
            power = np.mean([np.abs(np.fft.rfft(r.samples, nfft, axis=1)) ** 2
                             for r in recs if r.label == k], axis=(0, 1))
            peaks.append(int(np.argmax(power[1:])) + 1)
        assert len(set(peaks)) == 6
        np.testing.assert_array_equal(peaks, np.round(class_frequencies(6) * nfft).astype(int))

    def test_zero_noise_energy_matches_closed_form(self):
        recs = synth_gestures(6, 8, 2, seed=4, noise=False)
        for r in recs:
            for b in r.meta["bursts"]:
                for c, ph, a in zip(b["channels"], b["phase"], b["gain"]):
                    e = float(np.sum(r.samples[c] ** 2))
                    ref = burst_energy(a, b["freq"], ph, b["onset"], b["duration"])
                    assert abs(e - ref) <= 1e-9 * ref

    def test_closed_form_energy_against_sum(self):
        n = np.arange(30, 130)
        x = 1.3 * np.sin(2 * math.pi * 0.07 * n + 0.4)
        assert abs(np.sum(x ** 2) - burst_energy(1.3, 0.07, 0.4, 30, 100)) < 1e-9

    def test_distractor_is_off_both_home_groups(self):
        recs = synth_gestures(6, 8, 10, seed=2)
        for r in recs:
            own, other = r.meta["bursts"]
            assert own["cls"] == r.label and other["cls"] != r.label
            assert not set(own["channels"]) & set(other["channels"])
            assert other["channels"] != class_channels(other["cls"], 8).tolist()

    def test_distractor_starts_excludes_home_and_overlap(self):
        starts = distractor_starts(2, 4, 8)
        assert 4 not in starts
        assert all(s not in (1, 2, 3) for s in starts)

    def test_raw_time_domain_class_means_are_flat(self):
        # random phases: class-mean waveforms carry almost no energy, so a
        # linear read-out of raw samples cannot separate classes
        recs = synth_gestures(6, 8, 100, seed=0, noise=False)
        x = np.stack([r.samples for r in recs])
        y = np.array([r.label for r in recs])
        mean_energy = np.mean([np.sum(x[y == k].mean(0) ** 2) for k in range(6)])
        sample_energy = np.mean(np.sum(x ** 2, axis=(1, 2)))
        assert mean_energy < 0.05 * sample_energy

    def test_invalid(self):
        with pytest.raises(ParameterError):
            synth_gestures(1, 8, 3)


class TestCsv:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        rec = Recording(rng.standard_normal((3, 2)), np.array([1, 1]), subject=2, trial=5)
        p = tmp_path / "r.csv"
        save_csv(p, [rec])
        (back,) = load_csv(p)
        np.testing.assert_array_equal(back.samples, rec.samples)
        np.testing.assert_array_equal(back.labels, rec.labels)
        assert (back.subject, back.trial) == (2, 5)

    def test_groups_sorted(self, tmp_path):
        recs = [Recording(np.ones((1, 3)) * i, i, subject=1, trial=3 - i) for i in range(3)]
        p = tmp_path / "g.csv"
        save_csv(p, recs)
        assert [r.trial for r in load_csv(p)] == [1, 2, 3]

    def _write(self, path, rows):
        path.write_text("subject,trial,label,ch0,ch1\n" + "".join(r + "\n" for r in rows))

    def test_non_numeric_cell_cites_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        rows = ["0,0,0,1.0,2.0"] * 5 + ["0,0,0,abc,2.0"]
        self._write(p, rows)
        with pytest.raises(ParseError, match="line 7"):
            load_csv(p)

    def test_label_range(self, tmp_path):
        p = tmp_path / "l.csv"
        self._write(p, ["0,0,0,1,2", "0,1,2,1,2"])
        assert len(load_csv(p, CsvSchema(num_classes=3))) == 2
        self._write(p, ["0,0,0,1,2", "0,1,3,1,2"])
        with pytest.raises(ParseError, match="line 3"):
            load_csv(p, CsvSchema(num_classes=3))

    def test_missing_column_and_channel_count(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("subject,label,ch0\n0,0,1\n")
        with pytest.raises(ParseError, match="trial"):
            load_csv(p)
        self._write(p, ["0,0,0,1"])
        with pytest.raises(ParseError, match="line 2"):
            load_csv(p)
        self._write(p, ["0,0,0,1,2"])
        with pytest.raises(ParseError):
            load_csv(p, CsvSchema(channels=3))


class TestMakeWindows:
    def test_shapes_and_provenance(self):
        recs = [Recording(np.random.default_rng(i).standard_normal((2, 400)), i % 2)
                for i in range(3)]
        w = make_windows(recs, 200, 0.5)
        assert w.data.shape == (9, 2, 200) and w.data.dtype == np.float32
        np.testing.assert_array_equal(w.recording, np.repeat([0, 1, 2], 3))
        np.testing.assert_array_equal(w.offset, np.tile([0, 100, 200], 3))
        np.testing.assert_array_equal(w.labels, np.repeat([0, 1, 0], 3))
