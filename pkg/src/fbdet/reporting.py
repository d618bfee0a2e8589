"""Deterministic CSV and PGM writers for reports and figure data.

Floats are formatted with repr (shortest round-trip form) so identical runs
produce byte-identical files.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


def format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], footer: str = "") -> None:
    text = csv_text(header, rows)
    if footer:
        text += footer if footer.endswith("\n") else footer + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM (P5)."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2D uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
