"""Rasterize name strings into fixed-size binary images.

Each string is drawn glyph by glyph from a per-codepoint cache of
binarized bitmaps, so a given (string, atlas) pair always produces the same
bits regardless of the caller or thread.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from fontTools.ttLib import TTFont
from PIL import Image, ImageDraw, ImageFont

IMAGE_HEIGHT = 12
IMAGE_WIDTH = 150
MAX_GLYPHS = 25
LEFT_MARGIN = 1
# font pixel size and baseline row chosen so ascenders and descenders fit in 12 rows
FONT_PX = 9
BASELINE_ROW = 9
INK_THRESHOLD = 128

DEFAULT_FONT = "DejaVuSans.ttf"
DEFAULT_FONT_SHA256 = "690243adfefe0ce154b547db6205794bd30ac4277275179517a90994f4980648"


class RenderError(ValueError):
    pass


class EmptyString(RenderError):
    pass


class StringTooLong(RenderError):
    pass


class FontChecksumMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class Glyph:
    bitmap: np.ndarray  # (IMAGE_HEIGHT, w) uint8, read-only
    advance: float


@dataclass(frozen=True)
class RenderedImage:
    pixels: np.ndarray  # (IMAGE_HEIGHT, IMAGE_WIDTH) uint8 in {0, 1}
    text: str
    advance: int
    missing: tuple[str, ...] = ()

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def has_fallback(self) -> bool:
        return bool(self.missing)

    def to_pbm(self) -> str:
        """Plain-text PBM (P1). PBM uses 1 for black, so ink is written as 0."""
        rows = [" ".join("0" if v else "1" for v in row) for row in self.pixels]
        return f"P1\n# {self.text}\n{self.width} {self.height}\n" + "\n".join(rows) + "\n"


def default_font_path() -> Path:
    return Path(str(resources.files("homoglyph") / "data" / DEFAULT_FONT))


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fallback_bitmap() -> np.ndarray:
    # hollow box, the usual "tofu" glyph
    box = np.zeros((IMAGE_HEIGHT, 6), dtype=np.uint8)
    top, bottom = BASELINE_ROW - 7, BASELINE_ROW - 1
    box[top, 1:5] = 1
    box[bottom, 1:5] = 1
    box[top : bottom + 1, 1] = 1
    box[top : bottom + 1, 4] = 1
    box.setflags(write=False)
    return box


class GlyphAtlas:
    """Cache of binarized glyph bitmaps for one font face at 12 px height.

    The atlas is logically immutable: the lazily filled cache only ever maps a
    codepoint to the one bitmap that codepoint renders to.
    """

    def __init__(self, font_path: str | Path | None = None, verify: bool = True):
        path = Path(font_path) if font_path is not None else default_font_path()
        self.font_path = path
        self.font_sha256 = file_sha256(path)
        if verify and font_path is None and self.font_sha256 != DEFAULT_FONT_SHA256:
            raise FontChecksumMismatch(f"bundled font {path} has checksum {self.font_sha256}")
        self.font_id = f"{path.name}:{self.font_sha256[:16]}"
        self.glyph_px_height = IMAGE_HEIGHT
        self._font = ImageFont.truetype(str(path), FONT_PX)
        self._cmap = frozenset(TTFont(str(path), lazy=True).getBestCmap())
        self.fallback_glyph = Glyph(_fallback_bitmap(), 6.0)
        self._cache: dict[int, Glyph] = {}
        self._lock = threading.Lock()

    def supports(self, ch: str) -> bool:
        return ord(ch) in self._cmap

    def glyph(self, ch: str) -> Glyph:
        cp = ord(ch)
        g = self._cache.get(cp)
        if g is not None:
            return g
        with self._lock:
            g = self._cache.get(cp)
            if g is None:
                g = self._rasterize(ch) if cp in self._cmap else self.fallback_glyph
                self._cache[cp] = g
        return g

    def _rasterize(self, ch: str) -> Glyph:
        advance = float(self._font.getlength(ch))
        canvas_w = int(np.ceil(advance)) + 2 * FONT_PX
        img = Image.new("L", (canvas_w, IMAGE_HEIGHT), 0)
        ImageDraw.Draw(img).text((0, BASELINE_ROW), ch, font=self._font, fill=255, anchor="ls")
        bits = (np.asarray(img) >= INK_THRESHOLD).astype(np.uint8)
        cols = np.flatnonzero(bits.any(axis=0))
        # ink left of the origin is clipped by the canvas, which keeps appends monotone
        width = max(int(np.ceil(advance)), int(cols[-1]) + 1 if cols.size else 0, 1)
        bitmap = np.ascontiguousarray(bits[:, :width])
        bitmap.setflags(write=False)
        return Glyph(bitmap, advance)

    def text_advance(self, s: str) -> int:
        """Pen position (pixels) after laying out ``s`` from the left margin."""
        pen = float(LEFT_MARGIN)
        for ch in s:
            pen += self.glyph(ch).advance
        return int(round(pen))


_default_atlas: GlyphAtlas | None = None


def default_atlas() -> GlyphAtlas:
    global _default_atlas
    if _default_atlas is None:
        _default_atlas = GlyphAtlas()
    return _default_atlas


def render_string(s: str, atlas: GlyphAtlas | None = None) -> RenderedImage:
    """Render ``s`` as white-on-black 150x12 binary pixels.

    Raises EmptyString for empty input and StringTooLong when the laid-out
    advance would run past the right edge. Codepoints the font lacks are
    drawn with the fallback box and listed in ``missing``.
    """
    atlas = atlas or default_atlas()
    s = s.rstrip()
    if not s:
        raise EmptyString("cannot render an empty string")
    if len(s) > MAX_GLYPHS:
        raise StringTooLong(f"{len(s)} glyphs exceeds the {MAX_GLYPHS}-glyph limit: {s!r}")
    advance = atlas.text_advance(s)
    if advance > IMAGE_WIDTH:
        raise StringTooLong(f"rendered advance {advance} px exceeds {IMAGE_WIDTH} px: {s!r}")
    pixels = np.zeros((IMAGE_HEIGHT, IMAGE_WIDTH), dtype=np.uint8)
    missing = []
    pen = float(LEFT_MARGIN)
    for ch in s:
        if not atlas.supports(ch):
            missing.append(ch)
        g = atlas.glyph(ch)
        x = int(round(pen))
        w = min(g.bitmap.shape[1], IMAGE_WIDTH - x)
        pixels[:, x : x + w] |= g.bitmap[:, :w]
        pen += g.advance
    return RenderedImage(pixels, s, advance, tuple(missing))


def fits(s: str, atlas: GlyphAtlas | None = None) -> bool:
    try:
        render_string(s, atlas)
    except RenderError:
        return False
    return True


def truncate_to_fit(s: str, atlas: GlyphAtlas | None = None) -> str:
    """Longest prefix of ``s`` (at most 25 glyphs) that renders within the frame."""
    atlas = atlas or default_atlas()
    s = s.rstrip()[:MAX_GLYPHS]
    while s and not fits(s, atlas):
        s = s[:-1].rstrip()
    return s


def render_batch(strings, atlas: GlyphAtlas | None = None) -> np.ndarray:
    """Stack renders of ``strings`` into an (N, 12, 150) float64 array."""
    atlas = atlas or default_atlas()
    out = np.zeros((len(strings), IMAGE_HEIGHT, IMAGE_WIDTH), dtype=np.float64)
    for i, s in enumerate(strings):
        out[i] = render_string(s, atlas).pixels
    return out
