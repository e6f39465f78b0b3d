import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homoglyph import render
from homoglyph.render import (
    IMAGE_HEIGHT,
    IMAGE_WIDTH,
    EmptyString,
    FontChecksumMismatch,
    GlyphAtlas,
    StringTooLong,
    default_atlas,
    render_batch,
    render_string,
    truncate_to_fit,
)

# printable ASCII plus a few confusable lookalikes the bundled face covers
ALPHABET = st.sampled_from(list("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-") + list("łоеаіԁɡсοеЅ"))
NAMES = st.text(ALPHABET, min_size=1, max_size=15)


def test_frame_size():
    img = render_string("a")
    assert img.pixels.shape == (12, 150)
    assert (img.width, img.height) == (150, 12)


def test_binary_pixels_and_black_background():
    img = render_string("svchost.exe")
    assert set(np.unique(img.pixels)) <= {0, 1}
    assert img.pixels.sum() > 0
    # everything right of the laid-out text stays background
    assert not img.pixels[:, img.advance + 1 :].any()


@settings(max_examples=1000, deadline=None)
@given(NAMES)
def test_render_is_pure(s):
    s = s.strip() or "x"
    a = render_string(s)
    b = render_string(s, GlyphAtlas())
    assert np.array_equal(a.pixels, b.pixels)


@settings(max_examples=300, deadline=None)
@given(NAMES, ALPHABET)
def test_appending_keeps_earlier_ink(s, ch):
    s = s.strip() or "x"
    if not render.fits(s + ch):
        return
    before = render_string(s)
    after = render_string(s + ch)
    left = before.advance
    assert np.array_equal(before.pixels[:, :left], after.pixels[:, :left])


def test_l_and_l_stroke_differ_slightly():
    a = render_string("l").pixels
    b = render_string("ł").pixels
    diff = int(np.count_nonzero(a != b))
    assert 1 <= diff <= 12
    # regression baseline measured on the pinned face
    assert diff == 1


def test_rn_closer_to_m_than_to_unrelated_letters():
    def hamming(a, b):
        return int(np.count_nonzero(render_string(a).pixels != render_string(b).pixels))

    assert hamming("rn", "m") < hamming("rn", "xx")


def test_case_is_not_folded():
    assert not np.array_equal(render_string("Svchost").pixels, render_string("svchost").pixels)


def test_empty_string_rejected():
    with pytest.raises(EmptyString):
        render_string("")
    with pytest.raises(EmptyString):
        render_string("   ")


def test_trailing_whitespace_stripped():
    assert np.array_equal(render_string("abc  ").pixels, render_string("abc").pixels)


def test_too_many_glyphs():
    with pytest.raises(StringTooLong):
        render_string("i" * 26)
    render_string("i" * 25)


def test_too_wide():
    with pytest.raises(StringTooLong):
        render_string("W" * 20)


def test_truncate_to_fit():
    t = truncate_to_fit("W" * 20)
    assert t and "W" * 20 != t
    render_string(t)
    assert not render.fits(t + "W")
    assert truncate_to_fit("short.exe") == "short.exe"


def test_unsupported_codepoint_uses_fallback():
    atlas = default_atlas()
    ch = "\u4e2d"  # CJK, absent from the bundled face
    assert not atlas.supports(ch)
    img = render_string("a" + ch)
    assert img.has_fallback and img.missing == (ch,)
    assert img.pixels.sum() > render_string("a").pixels.sum()


def test_glyph_cache_heights_and_identity():
    atlas = GlyphAtlas()
    for ch in "aMł0.":
        g = atlas.glyph(ch)
        assert g.bitmap.shape[0] == atlas.glyph_px_height == IMAGE_HEIGHT
        assert atlas.glyph(ch) is g
    assert atlas.fallback_glyph.bitmap.shape[0] == IMAGE_HEIGHT


def test_concurrent_renders_agree():
    atlas = GlyphAtlas()
    words = [f"name{i}.exe" for i in range(40)]
    expect = [render_string(s).pixels for s in words]
    got = [None] * len(words)

    def work(k):
        got[k] = render_string(words[k], atlas).pixels

    threads = [threading.Thread(target=work, args=(k,)) for k in range(len(words))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(a, b) for a, b in zip(expect, got))


def test_pbm_dump():
    img = render_string("ab")
    text = img.to_pbm().splitlines()
    assert text[0] == "P1"
    assert text[2] == f"{IMAGE_WIDTH} {IMAGE_HEIGHT}"
    rows = [r.split() for r in text[3:]]
    assert len(rows) == IMAGE_HEIGHT and all(len(r) == IMAGE_WIDTH for r in rows)
    assert int(rows[0][0]) == 1  # background written as white in PBM terms


def test_render_batch():
    x = render_batch(["a", "bb"])
    assert x.shape == (2, 12, 150) and x.dtype == np.float64


def test_font_checksum_pinned(monkeypatch):
    assert render.file_sha256(render.default_font_path()) == render.DEFAULT_FONT_SHA256
    monkeypatch.setattr(render, "DEFAULT_FONT_SHA256", "0" * 64)
    with pytest.raises(FontChecksumMismatch):
        GlyphAtlas()


def test_font_override(tmp_path):
    copy = tmp_path / "face.ttf"
    copy.write_bytes(render.default_font_path().read_bytes())
    atlas = GlyphAtlas(copy)
    assert np.array_equal(render_string("abc", atlas).pixels, render_string("abc").pixels)
