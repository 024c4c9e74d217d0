import numpy as np
import pytest

from hybrid.services.event_io import (
    HEADER,
    EVENT_DTYPE,
    SampleSet,
    bin_events,
    frames_to_events,
    load_events,
    make_events,
    read_dataset,
    stratified_split,
    synth_gestures,
    write_dataset,
    write_events,
)
from hybrid.services.exceptions import ConfigurationError, ContractError, FormatError

SHAPE = (2, 8, 8, 10)


class TestEventFiles:
    def test_write_then_load(self, tmp_path):
        events = make_events([0, 10, 2500], [1, 2, 3], [0, 4, 7], [1, 0, 1])
        path = write_events(tmp_path / 'a.evs', events, 8, 8)
        stream = load_events(path)
        assert (stream.width, stream.height, len(stream)) == (8, 8, 3)
        np.testing.assert_array_equal(stream.events['t'], [0, 10, 2500])

    def test_small_inversions_are_sorted(self, tmp_path):
        events = make_events([0, 100, 90, 200], [0, 1, 2, 3], [0, 0, 0, 0], [1, 1, 1, 1])
        stream = load_events(write_events(tmp_path / 'a.evs', events, 4, 1), sort_tolerance_us=50)
        np.testing.assert_array_equal(stream.events['t'], [0, 90, 100, 200])
        np.testing.assert_array_equal(stream.events['x'], [0, 2, 1, 3])

    def test_large_inversion_is_a_format_error(self, tmp_path):
        events = make_events([0, 5000, 10, 6000], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0])
        path = write_events(tmp_path / 'a.evs', events, 1, 1)
        with pytest.raises(FormatError) as excinfo:
            load_events(path, sort_tolerance_us=100)
        assert excinfo.value.offset == HEADER.size + 2 * EVENT_DTYPE.itemsize

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'a.evs'
        path.write_bytes(b'EVS2' + bytes(12))
        with pytest.raises(FormatError) as excinfo:
            load_events(path)
        assert excinfo.value.offset == 0

    def test_truncated_events(self, tmp_path):
        events = make_events([0, 1, 2], [0, 0, 0], [0, 0, 0], [0, 0, 0])
        path = write_events(tmp_path / 'a.evs', events, 1, 1)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError, match='declares 3 events but holds 2'):
            load_events(path)

    def test_trailing_bytes(self, tmp_path):
        path = write_events(tmp_path / 'a.evs', make_events([0], [0], [0], [0]), 1, 1)
        path.write_bytes(path.read_bytes() + b'\x00')
        with pytest.raises(FormatError, match='trailing'):
            load_events(path)

    def test_large_stream_round_trip(self, tmp_path, rng):
        count = 100_000
        events = make_events(np.sort(rng.integers(0, 10_000_000, count)),
                             rng.integers(0, 128, count), rng.integers(0, 128, count),
                             rng.integers(0, 2, count))
        stream = load_events(write_events(tmp_path / 'big.evs', events, 128, 128))
        assert len(stream) == count
        for name in ('t', 'x', 'y', 'p'):
            np.testing.assert_array_equal(stream.events[name], events[name])


class TestBinning:
    def test_events_land_in_their_bins(self):
        events = make_events([0, 1500, 1600, 3999], [0, 1, 1, 2], [0, 0, 0, 1], [1, 0, 0, 1])
        result = bin_events(events, 3, 2, bin_ms=1, frames_per_sample=4, label=2)
        assert len(result.samples) == 1 and result.rejected == 0
        frames = result.samples[0].frames
        assert frames.shape == (2, 2, 3, 4)
        assert frames[1, 0, 0, 0] == 1 and frames[0, 0, 1, 1] == 1 and frames[1, 1, 2, 3] == 1
        # two events sharing a pixel and bin saturate at one
        assert frames.sum() == 3
        assert result.samples[0].label == 2

    def test_out_of_sensor_events_are_rejected(self):
        events = make_events([0, 10, 20], [0, 9, 0], [0, 0, 9], [1, 1, 1])
        result = bin_events(events, 4, 4, bin_ms=1, frames_per_sample=1)
        assert result.rejected == 2

    def test_frames_match_histogram_of_occupied_pixels(self, rng):
        count, width, height, bin_us = 400, 6, 5, 2000
        events = make_events(rng.integers(0, 20 * bin_us, count), rng.integers(0, width, count),
                             rng.integers(0, height, count), rng.integers(0, 2, count))
        occupied = {}
        for event in events:
            frame = int(event['t']) // bin_us
            occupied.setdefault(frame, set()).add((int(event['p']), int(event['y']),
                                                   int(event['x'])))

        result = bin_events(events, width, height, bin_ms=2, frames_per_sample=5,
                            duration_us=20 * bin_us)
        frames = np.concatenate([s.frames for s in result.samples], axis=-1)
        assert len(result.samples) == 4 and result.rejected == 0
        for frame in range(20):
            assert frames[..., frame].sum() == len(occupied.get(frame, ()))
            for p, y, x in occupied.get(frame, ()):
                assert frames[p, y, x, frame] == 1
        assert result.samples[0].frames.sum() == 1

    def test_partial_trailing_window_dropped(self):
        events = make_events([0, 2500, 5500], [0, 0, 0], [0, 0, 0], [1, 1, 1])
        result = bin_events(events, 1, 1, bin_ms=1, frames_per_sample=2)
        assert len(result.samples) == 3
        short = bin_events(events, 1, 1, bin_ms=1, frames_per_sample=4)
        assert len(short.samples) == 1

    def test_empty_stream(self):
        result = bin_events(make_events([], [], [], []), 2, 2, bin_ms=1, frames_per_sample=2)
        assert result.samples == []

    def test_bin_size_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            bin_events(make_events([0], [0], [0], [0]), 1, 1, bin_ms=-1, frames_per_sample=2)

    def test_frames_survive_events(self, rng):
        frames = (rng.random((2, 4, 5, 6)) < 0.2).astype(np.uint8)
        events = frames_to_events(frames, 1000)
        binned = bin_events(events, 5, 4, bin_ms=1, frames_per_sample=6, duration_us=6000)
        np.testing.assert_array_equal(binned.samples[0].frames, frames)


class TestSyntheticGestures:
    def test_shape_and_labels(self):
        samples = synth_gestures(4, 3, SHAPE, seed=1)
        assert samples.frames.shape == (12,) + SHAPE
        assert np.bincount(samples.labels).tolist() == [3, 3, 3, 3]
        assert samples.frames.dtype == np.uint8

    def test_twins_are_time_reversals(self):
        samples = synth_gestures(2, 4, SHAPE, seed=3)
        for group in np.unique(samples.groups):
            first, second = np.flatnonzero(samples.groups == group)
            assert {samples.labels[first], samples.labels[second]} == {0, 1}
            np.testing.assert_array_equal(samples.frames[first][..., ::-1], samples.frames[second])
            np.testing.assert_array_equal(samples.frames[first].sum(axis=-1),
                                          samples.frames[second].sum(axis=-1))

    def test_odd_class_count_adds_a_palindrome_class(self):
        samples = synth_gestures(3, 2, SHAPE, seed=0)
        assert len(samples) == 6
        assert len(np.unique(samples.groups[samples.labels == 2])) == 2

    def test_same_seed_same_samples(self):
        a, b = synth_gestures(2, 2, SHAPE, seed=9), synth_gestures(2, 2, SHAPE, seed=9)
        np.testing.assert_array_equal(a.frames, b.frames)
        c = synth_gestures(2, 2, SHAPE, seed=10)
        assert not np.array_equal(a.frames, c.frames)

    def test_zero_per_class_is_empty(self):
        samples = synth_gestures(4, 0, SHAPE)
        assert len(samples) == 0
        assert samples.shape == SHAPE

    def test_needs_two_classes(self):
        with pytest.raises(ContractError):
            synth_gestures(1, 5, SHAPE)

    def test_needs_two_polarities(self):
        with pytest.raises(ConfigurationError):
            synth_gestures(2, 1, (1, 8, 8, 10))


class TestSplit:
    def test_groups_stay_whole(self):
        samples = synth_gestures(4, 10, SHAPE, seed=2)
        train, test = stratified_split(samples, 0.3, seed=5)
        assert len(train) + len(test) == len(samples)
        assert not set(train.groups.tolist()) & set(test.groups.tolist())
        assert np.bincount(test.labels, minlength=4).tolist() == [3, 3, 3, 3]

    def test_seeded(self):
        samples = synth_gestures(2, 6, SHAPE, seed=2)
        a = stratified_split(samples, 0.5, seed=1)[1]
        b = stratified_split(samples, 0.5, seed=1)[1]
        np.testing.assert_array_equal(a.groups, b.groups)

    def test_zero_fraction_keeps_everything_for_training(self):
        samples = synth_gestures(2, 3, SHAPE)
        train, test = stratified_split(samples, 0.0)
        assert len(train) == 6 and len(test) == 0

    @pytest.mark.parametrize('fraction', [-0.1, 1.0])
    def test_fraction_range(self, fraction):
        with pytest.raises(ConfigurationError):
            stratified_split(synth_gestures(2, 1, SHAPE), fraction)


class TestDatasetDirectory:
    def test_round_trip(self, tmp_path):
        samples = synth_gestures(3, 2, SHAPE, seed=4)
        write_dataset(tmp_path / 'set', samples, bin_ms=2)
        loaded = read_dataset(tmp_path / 'set')
        np.testing.assert_array_equal(loaded.frames, samples.frames)
        np.testing.assert_array_equal(loaded.labels, samples.labels)
        np.testing.assert_array_equal(loaded.groups, samples.groups)
        assert loaded.class_count == 3
        assert loaded.meta['bin_ms'] == 2

    def test_empty_set(self, tmp_path):
        write_dataset(tmp_path / 'set', SampleSet.empty(SHAPE, 2))
        loaded = read_dataset(tmp_path / 'set')
        assert len(loaded) == 0 and loaded.shape == SHAPE

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path)

    def test_missing_header_fields(self, tmp_path):
        (tmp_path / 'manifest.txt').write_text('# classes 2\n')
        with pytest.raises(ConfigurationError) as excinfo:
            read_dataset(tmp_path)
        assert excinfo.value.missing_fields == ['shape', 'bin_ms']
