"""Image I/O, letterboxing, synthetic generation, document roundtrips."""

import numpy as np
import pytest

from ssmdet import data as D
from ssmdet.model import Detection


class TestPpm:
    def test_all_red_image(self, tmp_path):
        img = np.zeros((3, 2, 2), dtype=np.float32)
        img[0] = 1.0
        path = tmp_path / "red.ppm"
        D.save_ppm(img, path)
        back = D.load_ppm(path)
        assert np.array_equal(back[0], np.ones((2, 2)))
        assert np.array_equal(back[1], np.zeros((2, 2)))
        assert np.array_equal(back[2], np.zeros((2, 2)))

    def test_roundtrip_on_grid_values(self, tmp_path):
        rng = np.random.default_rng(0)
        img = (rng.integers(0, 256, (3, 5, 7)) / 255.0).astype(np.float32)
        path = tmp_path / "grid.ppm"
        D.save_ppm(img, path)
        assert np.allclose(D.load_ppm(path), img, atol=1e-7)

    def test_header_has_p6_magic(self, tmp_path):
        path = tmp_path / "hdr.ppm"
        D.save_ppm(np.zeros((3, 4, 6), dtype=np.float32), path)
        assert path.read_bytes().startswith(b"P6\n6 4\n255\n")

    def test_malformed_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 12)
        with pytest.raises(ValueError, match="magic"):
            D.load_ppm(path)

    def test_truncated_pixels_rejected(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
        with pytest.raises(ValueError, match="truncated"):
            D.load_ppm(path)


class TestLetterbox:
    def test_square_is_pure_resize(self):
        img = np.random.default_rng(1).random((3, 32, 32)).astype(np.float32)
        out, scale, (ox, oy) = D.letterbox(img, 64)
        assert out.shape == (3, 64, 64)
        assert scale == 2.0 and ox == 0 and oy == 0
        assert np.array_equal(out[:, ::2, ::2], img)

    def test_wide_image_pads_vertically(self):
        img = np.zeros((3, 50, 100), dtype=np.float32)
        out, scale, (ox, oy) = D.letterbox(img, 64)
        assert scale == 0.64
        nh = round(50 * scale)
        assert ox == 0
        assert abs(oy - (64 - nh) // 2) <= 1
        top_pad, bottom_pad = oy, 64 - nh - oy
        assert abs(top_pad - bottom_pad) <= 1

    def test_box_roundtrip_within_a_pixel(self):
        img = np.zeros((3, 30, 70), dtype=np.float32)
        _, scale, offsets = D.letterbox(img, 96)
        box = (4.0, 6.0, 50.0, 25.0)
        mapped = D.letterbox_box(box, scale, offsets)
        back = D.unletterbox_box(mapped, scale, offsets)
        assert max(abs(a - b) for a, b in zip(box, back)) <= 1.0


class TestSynthetic:
    def test_same_seed_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        D.gen_synthetic(4, 64, 3, seed=5, out_dir=a)
        D.gen_synthetic(4, 64, 3, seed=5, out_dir=b)
        for rel in ["annotations.txt"] + [f"images/img_{i:05d}.ppm" for i in range(4)]:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_different_seed_differs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        D.gen_synthetic(2, 64, 3, seed=1, out_dir=a)
        D.gen_synthetic(2, 64, 3, seed=2, out_dir=b)
        assert (a / "images/img_00000.ppm").read_bytes() != (b / "images/img_00000.ppm").read_bytes()

    def test_boxes_inside_bounds(self, tmp_path):
        annotated = D.gen_synthetic(12, 96, 3, seed=9, out_dir=tmp_path / "d")
        assert annotated
        for ann in annotated:
            assert 1 <= len(ann.boxes) <= 5
            for cls, (x1, y1, x2, y2) in ann.boxes:
                assert 0 <= cls < 3
                assert 0.0 <= x1 < x2 <= 96.0
                assert 0.0 <= y1 < y2 <= 96.0

    def test_class_histogram_roughly_uniform(self, tmp_path):
        annotated = D.gen_synthetic(80, 64, 3, seed=3, out_dir=tmp_path / "d")
        counts = np.zeros(3)
        for ann in annotated:
            for cls, _ in ann.boxes:
                counts[cls] += 1
        total = counts.sum()
        assert total >= 200
        expected = total / 3.0
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 13.8  # p=0.001 cutoff at 2 dof

    def test_too_many_classes_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            D.gen_synthetic(1, 64, 9, seed=0, out_dir=tmp_path / "d")


class TestDocuments:
    def test_annotation_roundtrip(self, tmp_path):
        annotated = D.gen_synthetic(3, 64, 3, seed=4, out_dir=tmp_path / "d")
        loaded = D.load_annotations(tmp_path / "d" / "annotations.txt")
        assert loaded == annotated

    def test_dataset_arrays_align_with_annotations(self, tmp_path):
        D.gen_synthetic(3, 64, 3, seed=4, out_dir=tmp_path / "d")
        arrays = D.load_dataset_arrays(tmp_path / "d")
        assert len(arrays) == 3
        for img, boxes in arrays:
            assert img.shape == (3, 64, 64)
            assert boxes

    def test_detections_roundtrip(self, tmp_path):
        per_image = {
            "images/img_00000.ppm": [Detection((1.0, 2.0, 3.5, 4.25), 0.75, 2)],
            "images/img_00001.ppm": [],
        }
        path = tmp_path / "dets.txt"
        D.save_detections(per_image, path)
        assert path.read_text().startswith("version 1")
        back = D.load_detections(path)
        assert back == per_image

    def test_wrong_version_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("version 2\ncount 0\n")
        with pytest.raises(ValueError):
            D.load_annotations(path)
