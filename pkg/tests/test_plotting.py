import numpy as np
import pytest

from bridgenmt import plotting

BUCKETS = {"<10": {"bleu": 0.31, "count": 12}, "10-20": {"bleu": 0.24, "count": 30},
           ">=20": {"bleu": 0.0, "count": 0}}
TABLE = {"N": {"N": 80.0, "V": 15.0, "EOS": 5.0}, "V": {"V": 70.0, "N": 30.0}}


def render(kind, path):
    if kind == "length":
        return plotting.length_bleu_figure(BUCKETS, path)
    if kind == "confusion":
        return plotting.confusion_figure(TABLE, path)
    if kind == "attention":
        m = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
        return plotting.attention_figure(m, path, ["a", "b", "</s>"], ["x", "y"])
    return plotting.metric_bar_figure({"baseline": 31.5, "direct": 45.0}, path, "eos-rate (%)")


@pytest.mark.parametrize("kind", ["length", "confusion", "attention", "bar"])
def test_figures_render_and_are_byte_reproducible(tmp_path, kind):
    a = render(kind, tmp_path / "sub" / "a.png")
    b = render(kind, tmp_path / "b.png")
    data = a.read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    assert len(data) > 1000
    assert data == b.read_bytes()


@pytest.mark.parametrize("suffix", ["svg", "pdf"])
def test_vector_output_is_byte_reproducible(tmp_path, suffix):
    a = plotting.metric_bar_figure({"a": 1.0}, tmp_path / f"a.{suffix}", "x")
    b = plotting.metric_bar_figure({"a": 1.0}, tmp_path / f"b.{suffix}", "x")
    assert a.read_bytes()[:5] in (b"<?xml", b"%PDF-")
    assert a.read_bytes() == b.read_bytes()


def test_empty_confusion_table_still_renders(tmp_path):
    assert plotting.confusion_figure({}, tmp_path / "e.png").stat().st_size > 0
