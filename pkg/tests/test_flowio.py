"""File formats: byte-exact round trips and hard rejection of bad input."""

import numpy as np
import pytest

from corrmatch.flowio import (
    BadMagicError,
    FileFormatError,
    FlowField,
    TruncatedFileError,
    read_correspondences,
    read_flo,
    read_image,
    valid_sidecar_path,
    write_correspondences,
    write_flo,
    write_image,
)


def make_field(rng, w=7, h=5):
    flow = rng.standard_normal((h, w, 2)).astype(np.float32) * 10
    valid = rng.uniform(size=(h, w)) > 0.3
    return FlowField(width=w, height=h, flow=flow, valid=valid)


class TestFlo:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        field = make_field(rng)
        p = tmp_path / "a.flo"
        write_flo(field, p)
        back = read_flo(p)
        np.testing.assert_array_equal(back.flow, field.flow)
        np.testing.assert_array_equal(back.valid, field.valid)

    def test_file_bytes_identical_across_writes(self, tmp_path):
        rng = np.random.default_rng(1)
        field = make_field(rng)
        p1, p2 = tmp_path / "a.flo", tmp_path / "b.flo"
        write_flo(field, p1)
        write_flo(field, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_1x1_file_is_20_bytes(self, tmp_path):
        field = FlowField(width=1, height=1,
                          flow=np.zeros((1, 1, 2), dtype=np.float32),
                          valid=np.ones((1, 1), dtype=bool))
        p = tmp_path / "one.flo"
        write_flo(field, p, sidecar=False)
        assert p.stat().st_size == 20

    def test_magic_bytes_are_pieh(self, tmp_path):
        field = FlowField.all_valid(np.zeros((1, 1, 2)))
        p = tmp_path / "m.flo"
        write_flo(field, p, sidecar=False)
        assert p.read_bytes()[:4] == bytes([0x50, 0x49, 0x45, 0x48])  # "PIEH"

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.flo"
        p.write_bytes(b"XXXX" + b"\x01\x00\x00\x00" * 2 + b"\x00" * 8)
        with pytest.raises(BadMagicError):
            read_flo(p)

    def test_truncation_by_one_byte_rejected(self, tmp_path):
        rng = np.random.default_rng(2)
        field = make_field(rng)
        p = tmp_path / "t.flo"
        write_flo(field, p, sidecar=False)
        data = p.read_bytes()
        p.write_bytes(data[:-1])
        with pytest.raises(TruncatedFileError):
            read_flo(p)

    def test_nonpositive_dimensions_rejected(self, tmp_path):
        import struct
        p = tmp_path / "z.flo"
        p.write_bytes(struct.pack("<fii", 202021.25, 0, 4))
        with pytest.raises(FileFormatError):
            read_flo(p)

    def test_missing_sidecar_means_all_valid(self, tmp_path):
        field = FlowField.all_valid(np.ones((2, 3, 2)))
        p = tmp_path / "nv.flo"
        write_flo(field, p, sidecar=False)
        assert not valid_sidecar_path(p).exists()
        assert read_flo(p).valid.all()


class TestImages:
    def test_header_and_payload_layout(self, tmp_path):
        p = tmp_path / "two.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + bytes(range(12)))
        img = read_image(p)
        assert img.shape == (2, 2, 3)
        np.testing.assert_allclose(img[0, 0], np.array([0, 1, 2]) / 255.0)

    def test_roundtrip_exact_for_8bit_values(self, tmp_path):
        rng = np.random.default_rng(3)
        img = (rng.integers(0, 256, size=(5, 4, 3)) / 255.0).astype(np.float32)
        p = tmp_path / "rt.ppm"
        write_image(img, p)
        np.testing.assert_array_equal(read_image(p), img.astype(np.float32))

    def test_gray_replicates_to_three_channels(self, tmp_path):
        p = tmp_path / "g.pgm"
        write_image(np.array([[0.0, 1.0]], dtype=np.float32), p)
        img = read_image(p)
        assert img.shape == (1, 2, 3)
        np.testing.assert_array_equal(img[..., 0], img[..., 1])

    def test_comments_in_header(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# a comment\n2 1\n255\n\x00\xff")
        img = read_image(p)
        np.testing.assert_allclose(img[0, :, 0], [0.0, 1.0])

    def test_rejections(self, tmp_path):
        bad = tmp_path / "bad"
        bad.write_bytes(b"P3\n1 1\n255\n0 0 0")
        with pytest.raises(BadMagicError):
            read_image(bad)
        short = tmp_path / "short.ppm"
        short.write_bytes(b"P6\n2 2\n255\n\x00\x01")
        with pytest.raises(TruncatedFileError):
            read_image(short)
        maxval = tmp_path / "m.ppm"
        maxval.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
        with pytest.raises(FileFormatError):
            read_image(maxval)


class TestCorrespondences:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("")
        assert read_correspondences(p).shape == (0, 5)

    def test_single_record(self, tmp_path):
        p = tmp_path / "one.txt"
        p.write_text("10 20 30 40 0.5\n")
        np.testing.assert_allclose(read_correspondences(p),
                                   [[10, 20, 30, 40, 0.5]])

    def test_roundtrip_six_significant_digits(self, tmp_path):
        rng = np.random.default_rng(4)
        recs = rng.uniform(0, 1000, size=(20, 5))
        p = tmp_path / "rt.txt"
        write_correspondences(recs, p)
        back = read_correspondences(p)
        np.testing.assert_allclose(back, recs, rtol=1e-5)

    def test_malformed_line_names_line_number(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("1 2 3 4\n")
        with pytest.raises(FileFormatError, match="line 1"):
            read_correspondences(p)

    def test_comments_skipped(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# header\n1 2 3 4 5\n")
        assert read_correspondences(p).shape == (1, 5)


class TestMetrics:
    def test_zero_on_identical(self):
        from corrmatch.metrics import aepe, pck
        f = FlowField.all_valid(np.random.default_rng(5).standard_normal((4, 4, 2)))
        assert aepe(f, f) == 0.0
        assert pck(f, f, 0.0) == 1.0

    def test_uniform_345(self):
        from corrmatch.metrics import aepe
        gt = FlowField.all_valid(np.zeros((3, 3, 2)))
        pred = FlowField.all_valid(np.tile([3.0, 4.0], (3, 3, 1)))
        assert aepe(pred, gt) == pytest.approx(5.0)

    def test_mean_over_jointly_valid(self):
        from corrmatch.metrics import aepe
        flow = np.zeros((1, 2, 2), dtype=np.float32)
        pred_f = flow.copy()
        pred_f[0, 1] = [6.0, 8.0]
        gt = FlowField(width=2, height=1, flow=flow, valid=np.array([[True, True]]))
        pred = FlowField(width=2, height=1, flow=pred_f, valid=np.array([[True, True]]))
        assert aepe(pred, gt) == pytest.approx(5.0)

    def test_pck_thresholds_inclusive(self):
        from corrmatch.metrics import pck
        errors = np.array([0.5, 2.0, 4.0, 6.0])
        flow = np.zeros((1, 4, 2), dtype=np.float32)
        pred_f = flow.copy()
        pred_f[0, :, 0] = errors
        gt = FlowField.all_valid(flow)
        pred = FlowField.all_valid(pred_f)
        assert pck(pred, gt, 3.0) == pytest.approx(0.50)
        assert pck(pred, gt, 5.0) == pytest.approx(0.75)
        assert pck(pred, gt, 0.5) == pytest.approx(0.25)

    def test_fl_conjunction_rule(self):
        from corrmatch.metrics import fl_ratio
        gt_f = np.zeros((1, 3, 2), dtype=np.float32)
        gt_f[0, :, 0] = 100.0                     # gt magnitude 100 everywhere
        pred_f = gt_f.copy()
        pred_f[0, 0, 1] = 4.0                     # epe 4: >3 but <5% of 100
        pred_f[0, 1, 1] = 6.0                     # epe 6: outlier
        gt = FlowField.all_valid(gt_f)
        pred = FlowField.all_valid(pred_f)
        assert fl_ratio(pred, gt) == pytest.approx(1 / 3)

    def test_fl_zero_when_epe_small(self):
        from corrmatch.metrics import fl_ratio
        gt = FlowField.all_valid(np.zeros((2, 2, 2)))
        pred_f = np.full((2, 2, 2), 2.0 / np.sqrt(2), dtype=np.float32)
        assert fl_ratio(FlowField.all_valid(pred_f), gt) == 0.0

    def test_errors(self):
        from corrmatch.metrics import EmptyValidSetError, MetricError, aepe
        a = FlowField.all_valid(np.zeros((2, 2, 2)))
        b = FlowField.all_valid(np.zeros((2, 3, 2)))
        with pytest.raises(MetricError):
            aepe(a, b)
        nv = FlowField(width=2, height=2, flow=np.zeros((2, 2, 2)),
                       valid=np.zeros((2, 2), dtype=bool))
        with pytest.raises(EmptyValidSetError):
            aepe(nv, nv)
