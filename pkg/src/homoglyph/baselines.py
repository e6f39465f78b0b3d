"""String-matching baselines: plain and visually weighted edit distance."""

from __future__ import annotations

from typing import Iterable, Literal, Sequence

import numpy as np

from .corpus import PairExample, levenshtein
from .render import GlyphAtlas, default_atlas

Scorer = Literal["edit", "visual", "model"]


class UnrenderableCodepoint(ValueError):
    pass


class UnknownCharacter(KeyError):
    pass


def glyph_jaccard(a: np.ndarray, b: np.ndarray) -> float:
    """Pixel-overlap Jaccard of two glyph bitmaps aligned at left edge and baseline."""
    w = max(a.shape[1], b.shape[1])
    pa = np.zeros((a.shape[0], w), dtype=bool)
    pb = np.zeros((b.shape[0], w), dtype=bool)
    pa[:, : a.shape[1]] = a
    pb[:, : b.shape[1]] = b
    union = np.count_nonzero(pa | pb)
    if union == 0:
        return 1.0  # two blank glyphs look the same
    return np.count_nonzero(pa & pb) / union


class CharSimilarityTable:
    """Symmetric glyph similarity in [0, 1] for a fixed set of characters."""

    def __init__(self, chars: Sequence[str], matrix: np.ndarray):
        self.chars = list(chars)
        self.index = {c: i for i, c in enumerate(self.chars)}
        self.matrix = matrix

    def __contains__(self, ch: str) -> bool:
        return ch in self.index

    def similarity(self, a: str, b: str) -> float:
        try:
            return float(self.matrix[self.index[a], self.index[b]])
        except KeyError as e:
            raise UnknownCharacter(e.args[0]) from None

    def to_tsv(self) -> str:
        lines = ["a\tb\tsimilarity"]
        n = len(self.chars)
        for i in range(n):
            for j in range(i, n):
                lines.append(f"{self.chars[i]}\t{self.chars[j]}\t{self.matrix[i, j]:.6f}")
        return "\n".join(lines) + "\n"


def build_similarity_table(atlas: GlyphAtlas | None, codepoints: Iterable[str | int]) -> CharSimilarityTable:
    atlas = atlas or default_atlas()
    chars = []
    for c in codepoints:
        ch = chr(c) if isinstance(c, int) else c
        if ch not in chars:
            chars.append(ch)
    for ch in chars:
        if not atlas.supports(ch):
            raise UnrenderableCodepoint(f"U+{ord(ch):04X} is not in {atlas.font_id}")
    bitmaps = [atlas.glyph(ch).bitmap for ch in chars]
    n = len(chars)
    m = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = glyph_jaccard(bitmaps[i], bitmaps[j])
    return CharSimilarityTable(chars, m)


def table_for_pairs(pairs: Iterable[PairExample], atlas: GlyphAtlas | None = None) -> CharSimilarityTable:
    chars = sorted({c for p in pairs for c in p.s1 + p.s2})
    return build_similarity_table(atlas, chars)


def visual_edit_distance(a: str, b: str, table: CharSimilarityTable) -> float:
    """Levenshtein recurrence with substitution cost 1 - similarity(a_i, b_j)."""
    for ch in a + b:
        if ch not in table:
            raise UnknownCharacter(ch)
    ia = [table.index[c] for c in a]
    ib = [table.index[c] for c in b]
    sim = table.matrix
    prev = [float(j) for j in range(len(b) + 1)]
    for i, ca in enumerate(ia, 1):
        cur = [float(i)] + [0.0] * len(b)
        row = sim[ca]
        for j, cb in enumerate(ib, 1):
            cur[j] = min(prev[j - 1] + (1.0 - row[cb]), prev[j] + 1.0, cur[j - 1] + 1.0)
        prev = cur
    return prev[-1]


def score_pairs(
    pairs: Sequence[PairExample],
    scorer: Scorer,
    *,
    table: CharSimilarityTable | None = None,
    weights=None,
    atlas: GlyphAtlas | None = None,
) -> list[tuple[float, int]]:
    """(score, label) per pair, in input order; lower scores look more like spoofs."""
    if scorer == "edit":
        scores = [float(levenshtein(p.s1, p.s2)) for p in pairs]
    elif scorer == "visual":
        table = table or table_for_pairs(pairs, atlas)
        scores = [visual_edit_distance(p.s1, p.s2, table) for p in pairs]
    elif scorer == "model":
        if weights is None:
            raise ValueError("model scorer needs trained weights")
        from .net import embed

        f1 = embed(weights, [p.s1 for p in pairs], atlas)
        f2 = embed(weights, [p.s2 for p in pairs], atlas)
        scores = np.sqrt(np.sum((f1 - f2) ** 2, axis=1)).tolist()
    else:
        raise ValueError(f"unknown scorer {scorer!r}")
    return [(s, p.label) for s, p in zip(scores, pairs)]
