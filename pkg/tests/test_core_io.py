import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diarclust.core_io import (
    FormatError,
    RecordingEmbeddings,
    SegmentSpan,
    SpeakerSegmentation,
    format_rttm,
    read_embeddings,
    read_rttm,
    uniform_segments,
    write_embeddings,
    write_rttm,
)


class TestSegmentSpan:
    def test_rejects_nonpositive_duration(self):
        with pytest.raises(ValueError):
            SegmentSpan(0.0, 0.0)

    def test_rejects_negative_onset(self):
        with pytest.raises(ValueError):
            SegmentSpan(-0.1, 1.0)

    def test_end(self):
        assert SegmentSpan(1.25, 0.5).end == pytest.approx(1.75)


class TestReadEmbeddings:
    def test_three_lines_dim_four(self, tmp_path):
        path = tmp_path / "rec1.emb"
        path.write_text(
            "# comment\n"
            "0.0 1.5 1 2 3 4\n"
            "0.75 1.5 5 6 7 8\n"
            "1.5 1.5 9 10 11 12\n"
        )
        rec = read_embeddings(path)
        assert (rec.recording_id, rec.n, rec.dim) == ("rec1", 3, 4)
        np.testing.assert_array_equal(rec.matrix[1], [5, 6, 7, 8])

    def test_dimension_mismatch_names_line(self, tmp_path):
        path = tmp_path / "bad.emb"
        path.write_text("0 1 1 2 3 4\n1 1 1 2 3 4 5\n")
        with pytest.raises(FormatError, match=":2"):
            read_embeddings(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.emb"
        path.write_text("# nothing here\n")
        with pytest.raises(FormatError, match="empty"):
            read_embeddings(path)

    def test_non_finite_value(self, tmp_path):
        path = tmp_path / "nan.emb"
        path.write_text("0 1 1 nan\n")
        with pytest.raises(FormatError, match="non-finite"):
            read_embeddings(path)

    def test_unsorted_rows_are_reordered(self, tmp_path):
        path = tmp_path / "r.emb"
        path.write_text("2 1 2.0\n0 1 0.0\n1 2 1.5\n1 1 1.0\n")
        rec = read_embeddings(path)
        assert [(s.onset, s.duration) for s in rec.segments] == [(0, 1), (1, 1), (1, 2), (2, 1)]
        np.testing.assert_array_equal(rec.matrix[:, 0], [0.0, 1.0, 1.5, 2.0])

    def test_round_trip_precision(self, tmp_path):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 5)) * 10.0 ** rng.integers(-3, 4, size=(6, 5))
        rec = RecordingEmbeddings("r", uniform_segments(5.25, 1.5, 0.75), x)
        write_embeddings(rec, tmp_path / "r.emb")
        back = read_embeddings(tmp_path / "r.emb")
        np.testing.assert_allclose(back.matrix, x, rtol=1e-8)
        assert back.segments == rec.segments


class TestRttm:
    def test_line_format(self):
        seg = SpeakerSegmentation("rec1", [(SegmentSpan(0.0, 1.5), "spk1")])
        assert format_rttm(seg) == "SPEAKER rec1 1 0.000 1.500 <NA> <NA> spk1 <NA> <NA>\n"

    def test_rounding_rule(self, tmp_path):
        seg = SpeakerSegmentation("r", [(SegmentSpan(0.7499, 1.0), "a")])
        write_rttm(seg, tmp_path / "r.rttm")
        assert "0.750" in (tmp_path / "r.rttm").read_text()
        assert read_rttm(tmp_path / "r.rttm").turns[0][0].onset == 0.75

    def test_round_trip_ten_turns(self, tmp_path):
        rng = np.random.default_rng(0)
        turns = [
            (SegmentSpan(round(float(on), 3), round(float(d), 3)), f"s{rng.integers(3)}")
            for on, d in zip(rng.uniform(0, 100, 10), rng.uniform(0.1, 5, 10))
        ]
        seg = SpeakerSegmentation("rec", turns)
        write_rttm(seg, tmp_path / "rec.rttm")
        assert read_rttm(tmp_path / "rec.rttm").turns == seg.turns

    def test_unknown_record_skipped(self, tmp_path, caplog):
        path = tmp_path / "r.rttm"
        path.write_text(
            "SPKR-INFO r 1 <NA> <NA> <NA> unknown a <NA> <NA>\n"
            "SPEAKER r 1 0.000 1.000 <NA> <NA> a <NA> <NA>\n"
        )
        seg = read_rttm(path)
        assert len(seg.turns) == 1
        assert "skipping" in caplog.text

    def test_bad_field_count(self, tmp_path):
        path = tmp_path / "r.rttm"
        path.write_text("SPEAKER r 1 0.000 1.000 a\n")
        with pytest.raises(FormatError):
            read_rttm(path)

    def test_selects_recording(self, tmp_path):
        path = tmp_path / "all.rttm"
        path.write_text(
            "SPEAKER a 1 0.000 1.000 <NA> <NA> x <NA> <NA>\n"
            "SPEAKER b 1 0.000 2.000 <NA> <NA> y <NA> <NA>\n"
        )
        assert read_rttm(path, "b").speakers == ["y"]
        assert read_rttm(path).recording_id == "a"

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 100000), st.integers(1, 100000), st.sampled_from("abc")), max_size=20))
    def test_round_trip_property(self, tmp_path_factory, raw):
        turns = [(SegmentSpan(on / 1000, d / 1000), lab) for on, d, lab in raw]
        seg = SpeakerSegmentation("p", turns)
        path = tmp_path_factory.mktemp("rt") / "p.rttm"
        write_rttm(seg, path)
        back = read_rttm(path, "p")
        assert [(s.onset, s.duration, lab) for s, lab in back.turns] == [
            (s.onset, s.duration, lab) for s, lab in seg.turns
        ]


class TestUniformSegments:
    def test_single_window(self):
        assert uniform_segments(1.5, 1.5, 0.25) == [SegmentSpan(0.0, 1.5)]

    def test_too_short(self):
        with pytest.raises(ValueError):
            uniform_segments(1.0, 1.5, 0.75)

    def test_four_full_windows(self):
        spans = uniform_segments(4.0, 1.5, 0.75)
        assert [s.onset for s in spans] == [0.0, 0.75, 1.5, 2.25]
        assert all(s.duration == 1.5 for s in spans)

    def test_remainder_not_windowed(self):
        spans = uniform_segments(4.7, 1.5, 0.75)
        assert spans[-1] == SegmentSpan(3.0, 1.5)
        assert len(spans) == 5

    @given(st.floats(1.5, 60), st.floats(0.1, 1.5))
    def test_properties(self, total, shift):
        spans = uniform_segments(total, 1.5, shift)
        assert spans[0].onset == 0.0
        for s in spans:
            assert s.end <= total + 1e-9
            assert s.duration == 1.5
        assert total - spans[-1].end < shift + 1e-9
        assert np.allclose(np.diff([s.onset for s in spans]), shift)
