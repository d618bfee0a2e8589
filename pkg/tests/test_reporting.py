"""CSV/PGM writers and the thread-capped parallel map."""

import numpy as np
import pytest

from fbdet.reporting import csv_text, format_value, write_csv, write_pgm
from fbdet.runtime import parallel_map, thread_count


class TestCsv:
    def test_float_formatting_round_trips(self):
        value = 0.1 + 0.2
        assert float(format_value(value)) == value

    def test_text_layout(self):
        text = csv_text(("a", "b"), [(1, 2.5), (3, 4.0)])
        assert text == "a,b\n1,2.5\n3,4.0\n"

    def test_write_with_footer(self, tmp_path):
        path = tmp_path / "r.csv"
        write_csv(path, ("x",), [(1,)], footer="# note")
        assert path.read_text() == "x\n1\n# note\n"

    def test_deterministic_bytes(self, tmp_path):
        rows = [(i, float(i) * 0.3333333333333333) for i in range(50)]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_csv(a, ("i", "v"), rows)
        write_csv(b, ("i", "v"), rows)
        assert a.read_bytes() == b.read_bytes()


class TestPgm:
    def test_header_and_payload(self, tmp_path):
        img = np.arange(6, dtype=np.uint8).reshape(2, 3)
        path = tmp_path / "img.pgm"
        write_pgm(path, img)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n3 2\n255\n")
        assert raw[len(b"P5\n3 2\n255\n") :] == img.tobytes()

    def test_rejects_wrong_dtype(self, tmp_path):
        with pytest.raises(ValueError, match="uint8"):
            write_pgm(tmp_path / "x.pgm", np.zeros((2, 2)))


class TestParallelMap:
    def test_preserves_order(self):
        items = list(range(100))
        assert parallel_map(lambda v: v * v, items) == [v * v for v in items]

    def test_empty(self):
        assert parallel_map(lambda v: v, []) == []

    def test_thread_count_env(self, monkeypatch):
        monkeypatch.setenv("IFF_THREADS", "3")
        assert thread_count() == 3
        monkeypatch.setenv("IFF_THREADS", "0")
        assert thread_count() == 1
        monkeypatch.setenv("IFF_THREADS", "junk")
        with pytest.raises(ValueError, match="IFF_THREADS"):
            thread_count()

    def test_single_thread_path(self, monkeypatch):
        monkeypatch.setenv("IFF_THREADS", "1")
        assert parallel_map(lambda v: v + 1, [1, 2, 3]) == [2, 3, 4]
