import re

import numpy as np
import pytest

from invexplain.datasets import read_csv
from invexplain.reports import emit_csv, emit_pgm, emit_svg_bars, emit_svg_scatter, quantize, read_kv, read_pgm, write_kv


def test_quantize_half_rounds_up():
    assert quantize(np.full((2, 2), 0.5)).tolist() == [[128, 128], [128, 128]]
    assert quantize([-1.0, 0.0, 1.0, 2.0]).tolist() == [0, 0, 255, 255]


def test_pgm_layout(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    emit_pgm(img, tmp_path / "a.pgm")
    blob = (tmp_path / "a.pgm").read_bytes()
    assert blob.startswith(b"P5\n4 3\n255\n") and len(blob) == len(b"P5\n4 3\n255\n") + 12
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), quantize(img))


def test_pgm_rejects_rgb(tmp_path):
    with pytest.raises(ValueError):
        emit_pgm(np.zeros((3, 4, 4)), tmp_path / "x.pgm")


def test_svg_counts(tmp_path):
    pts = np.random.default_rng(0).normal(size=(7, 2))
    emit_svg_scatter([(pts[:3], "red"), (pts[3:], "blue")], pts[:4], tmp_path / "s.svg")
    text = (tmp_path / "s.svg").read_text()
    assert text.count("<circle") == 7 and text.count("<polyline") == 1
    assert 'viewBox="0 0 400 400"' in text


def test_svg_empty_polyline(tmp_path):
    emit_svg_scatter([(np.zeros((2, 2)), "red")], np.zeros((0, 2)), tmp_path / "s.svg")
    text = (tmp_path / "s.svg").read_text()
    assert "<polyline" not in text and text.count("<circle") == 2


def test_svg_coordinates_inside_viewbox(tmp_path):
    pts = np.array([[-3.0, 10.0], [4.0, -2.0], [0.0, 0.0]])
    emit_svg_scatter([(pts, "red")], pts, tmp_path / "s.svg")
    nums = [float(v) for v in re.findall(r'c[xy]="([-0-9.]+)"', (tmp_path / "s.svg").read_text())]
    assert min(nums) >= 0 and max(nums) <= 400


def test_bars(tmp_path):
    emit_svg_bars([0.5, 0.25, 0.25], tmp_path / "b.svg")
    assert (tmp_path / "b.svg").read_text().count('fill="#1f77b4"') == 3


def test_csv_round_trip_through_dataset_reader(tmp_path):
    rows = [[0.5, -0.25, 0], [0.125, 3.0, 1], [-1.0, 0.0625, 1]]
    emit_csv(rows, tmp_path / "r.csv", header=["x0", "x1", "label"])
    back = read_csv(tmp_path / "r.csv", class_count=2, dtype=np.float64)
    np.testing.assert_array_equal(back.features, np.array(rows)[:, :2])
    assert back.labels.tolist() == [0, 1, 1]


def test_csv_needs_header(tmp_path):
    with pytest.raises(ValueError):
        emit_csv([[1, 2]], tmp_path / "r.csv")


def test_kv_round_trip(tmp_path):
    write_kv([("a", 1), ("b", 0.1), ("c", "x=y")], tmp_path / "k.txt")
    assert read_kv(tmp_path / "k.txt") == {"a": "1", "b": "0.1", "c": "x=y"}


def test_unwritable(tmp_path):
    with pytest.raises(OSError):
        emit_pgm(np.zeros((2, 2)), tmp_path / "missing" / "x.pgm")
