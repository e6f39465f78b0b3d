"""Pair datasets of benign and spoofed names.

Benign pairs (label 1) are distinct real names, optionally restricted to a
small edit distance so that edit distance alone cannot separate them from
spoofs. Spoof pairs (label 0) substitute lookalike graphemes from a
confusable table into a real name.
"""

from __future__ import annotations

import hashlib
import random
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numba
import numpy as np

from .render import GlyphAtlas, default_atlas, fits

Mode = Literal["process", "domain"]
PROCESS_MAX_DISTANCE = 3
MIN_STEM = 4


class InsufficientNames(ValueError):
    pass


class NoSubstitutionPossible(ValueError):
    pass


@dataclass(frozen=True)
class PairExample:
    s1: str
    s2: str
    label: int  # 0 = spoof / similar, 1 = benign / dissimilar

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.s1 == self.s2:
            raise ValueError(f"pair strings must differ: {self.s1!r}")


@dataclass
class DatasetSplit:
    train: list[PairExample]
    validation: list[PairExample]
    test: list[PairExample]
    seed: int
    anchors: dict[str, list[str]] = field(default_factory=dict)

    def parts(self) -> dict[str, list[PairExample]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


# --- edit distance ----------------------------------------------------------


def _codes(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-32-le"), dtype=np.int32)


@numba.njit(cache=True)
def _lev(a, b, cap):
    """Unit-cost Levenshtein distance; returns ``cap + 1`` once it must exceed ``cap``."""
    n, m = a.shape[0], b.shape[0]
    if n < m:
        a, b = b, a
        n, m = m, n
    if n - m > cap:
        return cap + 1
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=prev.dtype)
    for i in range(1, n + 1):
        cur[0] = i
        row_min = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            ins = cur[j - 1] + 1
            dele = prev[j] + 1
            v = sub if sub < ins else ins
            v = v if v < dele else dele
            cur[j] = v
            if v < row_min:
                row_min = v
        if row_min > cap:
            return cap + 1
        prev, cur = cur, prev
    return prev[m]


def levenshtein(a: str, b: str) -> int:
    """Insert/delete/substitute distance over Unicode scalar values."""
    return int(_lev(_codes(a), _codes(b), max(len(a), len(b))))


@numba.njit(cache=True)
def _pairs_within(flat, offsets, lo, hi):
    n = offsets.shape[0] - 1
    out_i = []
    out_j = []
    for i in range(n):
        a = flat[offsets[i] : offsets[i + 1]]
        for j in range(i + 1, n):
            b = flat[offsets[j] : offsets[j + 1]]
            if abs(a.shape[0] - b.shape[0]) > hi:
                continue
            d = _lev(a, b, hi)
            if lo <= d <= hi:
                out_i.append(i)
                out_j.append(j)
    return out_i, out_j


@numba.njit(cache=True)
def _nearest(flat, offsets):
    """Per string: distance to its nearest other string and that string's length."""
    n = offsets.shape[0] - 1
    best = np.empty(n, dtype=np.int64)
    other_len = np.empty(n, dtype=np.int64)
    for i in range(n):
        a = flat[offsets[i] : offsets[i + 1]]
        bd = 1 << 30
        bl = 0
        for j in range(n):
            if j == i:
                continue
            b = flat[offsets[j] : offsets[j + 1]]
            if abs(a.shape[0] - b.shape[0]) > bd:
                continue
            d = _lev(a, b, bd)
            if d < bd or (d == bd and b.shape[0] > bl):
                bd = d
                bl = b.shape[0]
        best[i] = bd
        other_len[i] = bl
    return best, other_len


def _pack(names: Sequence[str]):
    codes = [_codes(s) for s in names]
    offsets = np.zeros(len(codes) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([c.size for c in codes])
    flat = np.concatenate(codes) if codes else np.zeros(0, dtype=np.int32)
    return flat, offsets


def nearest_neighbor_distances(names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Levenshtein distance from each name to its nearest other name, and the
    length of the longer string in that pair."""
    flat, offsets = _pack(names)
    d, other = _nearest(flat, offsets)
    lengths = np.diff(offsets)
    return d, np.maximum(lengths, other)


# --- confusables ------------------------------------------------------------


class ConfusableTable:
    """Lookalike substitutions keyed by a 1-2 character source sequence."""

    def __init__(self, entries: Iterable[tuple[str, str]]):
        table: dict[str, list[str]] = defaultdict(list)
        for src, rep in entries:
            if not src or not rep or len(src) > 2 or len(rep) > 2:
                raise ValueError(f"bad confusable entry {src!r} -> {rep!r}")
            if src == rep:
                raise ValueError(f"confusable maps {src!r} to itself")
            if rep not in table[src]:
                table[src].append(rep)
        self.entries = dict(table)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ConfusableTable":
        text = Path(path).read_text(encoding="utf-8") if path else _data_text("confusables.tsv")
        rows = []
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            src, rep = line.split("\t")[:2]
            rows.append((src, rep))
        return cls(rows)

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def pairs(self):
        for src, reps in self.entries.items():
            for rep in reps:
                yield src, rep

    def matches(self, name: str) -> list[tuple[int, str]]:
        """(position, source) for every table source occurring in ``name``."""
        out = []
        for i in range(len(name)):
            for k in (1, 2):
                src = name[i : i + k]
                if len(src) == k and src in self.entries:
                    out.append((i, src))
        return out

    def unicode_singles(self, ch: str) -> list[str]:
        return [r for r in self.entries.get(ch, ()) if len(r) == 1 and ord(r) > 127]

    def checksum(self) -> str:
        body = "\n".join(f"{s}\t{r}" for s, r in self.pairs())
        return hashlib.sha256(body.encode("utf-8")).hexdigest()


def _data_text(name: str) -> str:
    return (resources.files("homoglyph") / "data" / name).read_text(encoding="utf-8")


def load_names(path: str | Path | None = None, kind: Mode = "process") -> list[str]:
    """Read a newline-delimited UTF-8 name list (the shipped list when ``path`` is None)."""
    text = Path(path).read_text(encoding="utf-8") if path else _data_text(f"{kind}_names.txt")
    return [line.strip() for line in text.splitlines() if line.strip()]


# --- spoofs -----------------------------------------------------------------


def generate_spoof(
    name: str,
    table: ConfusableTable,
    rng: random.Random,
    max_edits: int = 2,
    atlas: GlyphAtlas | None = None,
    attempts: int = 20,
) -> str:
    """Apply 1..max_edits non-overlapping lookalike substitutions to ``name``."""
    if max_edits < 1:
        raise ValueError("max_edits must be >= 1")
    matches = table.matches(name)
    if not matches:
        raise NoSubstitutionPossible(f"no confusable occurs in {name!r}")
    atlas = atlas or default_atlas()
    for _ in range(attempts):
        k = rng.randint(1, max_edits)
        order = matches[:]
        rng.shuffle(order)
        taken: list[tuple[int, str]] = []
        used: set[int] = set()
        for pos, src in order:
            span = set(range(pos, pos + len(src)))
            if span & used:
                continue
            taken.append((pos, src))
            used |= span
            if len(taken) == k:
                break
        out = name
        for pos, src in sorted(taken, reverse=True):
            rep = rng.choice(table.entries[src])
            out = out[:pos] + rep + out[pos + len(src) :]
        if out != name and fits(out, atlas):
            return out
    raise NoSubstitutionPossible(f"could not build a renderable spoof of {name!r}")


# --- benign pairs -----------------------------------------------------------


def mine_benign_pairs(
    names: Sequence[str],
    max_distance: int | None = PROCESS_MAX_DISTANCE,
    count: int | None = None,
    rng: random.Random | None = None,
) -> list[PairExample]:
    """Benign (label 1) pairs of distinct names.

    With ``max_distance`` set, returns every unordered pair whose edit distance
    is between 1 and ``max_distance``, ordered by index pair. With ``None``,
    samples ``count`` random distinct pairs.
    """
    names = list(names)
    if max_distance is not None:
        flat, offsets = _pack(names)
        ii, jj = _pairs_within(flat, offsets, 1, max_distance)
        return [PairExample(names[i], names[j], 1) for i, j in zip(ii, jj)]
    if count is None:
        raise ValueError("count is required when max_distance is None")
    rng = rng or random.Random(0)
    n = len(names)
    if n < 2:
        return []
    count = min(count, n * (n - 1) // 2)
    seen: set[tuple[int, int]] = set()
    out = []
    while len(out) < count:
        i, j = rng.sample(range(n), 2)
        key = (min(i, j), max(i, j))
        if key in seen or names[i] == names[j]:
            continue
        seen.add(key)
        out.append(PairExample(names[i], names[j], 1))
    return out


# --- dataset ----------------------------------------------------------------


# Upper bound on substitutions per spoof. Process spoofs stay light so plain edit
# distance cannot separate them from benign neighbours; domain spoofs may rewrite
# most lookalike positions (k is still drawn uniformly from 1..bound).
PROCESS_SPOOF_EDITS = 3
DOMAIN_SPOOF_EDITS = 20


@dataclass
class DatasetConfig:
    n_benign: int = 10_000
    n_spoof: int = 10_000
    seed: int = 1234
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    max_edits: int | None = None  # None picks the per-mode default
    unicode_fraction: float = 0.25

    def edits_for(self, mode: Mode) -> int:
        if self.max_edits is not None:
            return self.max_edits
        return PROCESS_SPOOF_EDITS if mode == "process" else DOMAIN_SPOOF_EDITS


def name_stem(name: str) -> str:
    return name.rsplit(".", 1)[0] if "." in name else name


def prepare_names(names: Iterable[str], mode: Mode, atlas: GlyphAtlas | None = None) -> list[str]:
    """Deduplicate, drop unrenderable names and, for processes, short stems."""
    atlas = atlas or default_atlas()
    out = []
    seen = set()
    for s in names:
        s = s.strip()
        if not s or s in seen:
            continue
        seen.add(s)
        if mode == "process" and len(name_stem(s)) < MIN_STEM:
            continue
        if fits(s, atlas) and not any(not atlas.supports(c) for c in s):
            out.append(s)
    return out


def _relabel(pair_strings: Sequence[str], table: ConfusableTable, rng: random.Random, atlas):
    """Swap one ASCII letter for a non-ASCII lookalike everywhere in every string.

    A consistent one-to-one character swap leaves the edit distance between
    the strings unchanged. Returns None when no common letter can be swapped.
    """
    common = set(pair_strings[0]).intersection(*pair_strings[1:])
    cands = sorted(c for c in common if table.unicode_singles(c))
    rng.shuffle(cands)
    for c in cands:
        reps = [r for r in table.unicode_singles(c) if all(r not in s for s in pair_strings)]
        if not reps:
            continue
        r = rng.choice(reps)
        out = [s.replace(c, r) for s in pair_strings]
        if all(fits(s, atlas) for s in out):
            return out
    return None


def _closest_subset(sizes: list[int], target: int) -> list[int]:
    """Indices of a subset of ``sizes`` whose sum is as close to ``target`` as possible.

    0/1 knapsack reachability; ``first[s]`` is the item that first reached sum
    ``s``, which is enough to walk a solution back. Earlier items win ties.
    """
    total = sum(sizes)
    first = np.full(total + 1, -1, dtype=np.int64)
    first[0] = len(sizes)  # sentinel: the empty subset
    for i, sz in enumerate(sizes):
        if sz == 0:
            continue
        fresh = np.flatnonzero((first[: total + 1 - sz] != -1) & (first[sz:] == -1))
        first[fresh + sz] = i
    reach = np.flatnonzero(first != -1)
    best = int(reach[np.argmin(np.abs(reach - target) * 2 + (reach > target))])
    out = []
    while best:
        i = int(first[best])
        out.append(i)
        best -= sizes[i]
    return sorted(out)


def _assign_groups(groups: dict[str, list[PairExample]], order: list[str], ratios, seed) -> DatasetSplit:
    """Pack whole anchor groups into train/validation/test.

    Test and then validation take the subsets of groups (in ``order``
    preference) whose pair counts come closest to their ratio targets; train
    gets the rest.
    """
    total = sum(len(v) for v in groups.values())
    targets = {"validation": round(total * ratios[1]), "test": round(total * ratios[2])}
    left = list(order)
    owner: dict[str, list[str]] = {}
    for name in ("test", "validation"):
        pick = _closest_subset([len(groups[a]) for a in left], targets[name])
        chosen = set(pick)
        owner[name] = [left[i] for i in pick]
        left = [a for i, a in enumerate(left) if i not in chosen]
    owner["train"] = left

    def flat(anchors):
        return [p for a in anchors for p in groups[a]]

    return DatasetSplit(flat(owner["train"]), flat(owner["validation"]), flat(owner["test"]), seed, owner)


def build_dataset(
    names: Sequence[str],
    mode: Mode = "process",
    cfg: DatasetConfig | None = None,
    table: ConfusableTable | None = None,
    atlas: GlyphAtlas | None = None,
) -> DatasetSplit:
    """Benign + spoof pairs, shuffled and split so no anchor name spans two splits.

    Every pair has an anchor: the original name a spoof was built from, or the
    first name of a benign pair. Pairs sharing an anchor always land in the
    same split.
    """
    cfg = cfg or DatasetConfig()
    table = table or ConfusableTable.load()
    atlas = atlas or default_atlas()
    rng = random.Random(cfg.seed)
    pool = sorted(prepare_names(names, mode, atlas))
    if len(pool) < 2:
        raise InsufficientNames(f"need at least two usable names, have {len(pool)}")

    if mode == "process":
        benign = mine_benign_pairs(pool, PROCESS_MAX_DISTANCE)
        if len(benign) > cfg.n_benign:
            benign = rng.sample(benign, cfg.n_benign)
    else:
        benign = mine_benign_pairs(pool, None, cfg.n_benign, rng)

    # (anchor, pair) records; anchors are pre-relabel original names
    records: list[tuple[str, PairExample]] = []
    n_uni = int(np.ceil(cfg.unicode_fraction * len(benign)))
    rng.shuffle(benign)
    converted = 0
    for p in benign:
        s1, s2 = p.s1, p.s2
        if converted < n_uni:
            swapped = _relabel([s1, s2], table, rng, atlas)
            if swapped is not None:
                s1, s2 = swapped
                converted += 1
        records.append((p.s1, PairExample(s1, s2, 1)))

    spoofable = [s for s in pool if table.matches(s)]
    if not spoofable:
        raise InsufficientNames("no name admits a confusable substitution")
    seen = {(p.s1, p.s2) for _, p in records}
    edits = cfg.edits_for(mode)
    spoofs = 0
    tries = 0
    bases = []
    while spoofs < cfg.n_spoof and tries < 20 * cfg.n_spoof:
        if not bases:
            bases = spoofable[:]
            rng.shuffle(bases)
        base = bases.pop()
        tries += 1
        src = base
        if rng.random() < cfg.unicode_fraction:
            swapped = _relabel([base], table, rng, atlas)
            src = swapped[0] if swapped else base
        try:
            fake = generate_spoof(src, table, rng, edits, atlas)
        except NoSubstitutionPossible:
            continue
        if (src, fake) in seen:
            continue
        seen.add((src, fake))
        records.append((base, PairExample(src, fake, 0)))
        spoofs += 1

    labels = {p.label for _, p in records}
    if labels != {0, 1}:
        raise InsufficientNames(f"dataset would lack label(s) {sorted({0, 1} - labels)}")

    rng.shuffle(records)
    groups: dict[str, list[PairExample]] = defaultdict(list)
    for anchor, p in records:
        groups[anchor].append(p)
    order = sorted(groups)
    rng.shuffle(order)
    split = _assign_groups(groups, order, cfg.ratios, cfg.seed)
    for part_name, part in split.parts().items():
        if {p.label for p in part} != {0, 1}:
            raise InsufficientNames(f"{part_name} split lacks one label; supply more names")
    return split


# --- files ------------------------------------------------------------------


def write_pairs(pairs: Iterable[PairExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in pairs:
            f.write(f"{p.s1}\t{p.s2}\t{p.label}\n")


def read_pairs(path: str | Path) -> list[PairExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected s1<TAB>s2<TAB>label")
            out.append(PairExample(parts[0], parts[1], int(parts[2])))
    return out


# --- synthetic name lists ---------------------------------------------------

_PROC_TOKENS = (
    "svc host win sys net log srv mgr agent update setup install helper tray sync "
    "boot task run ctl cfg disk user auth sec shell core data file print audio video "
    "play media web mail chat cloud drive backup scan guard defend health monitor "
    "report crash dump event notify search index cache store power batt wifi blue "
    "tooth usb dev driver kernel loader launch start stop hub link proxy vpn dns dhcp "
    "time clock font theme lock logon explore browse edge chrome fire fox office word "
    "excel note pad calc paint snip game steam xbox spool conhost dwm lsa smss csrss "
    "wmi perf stat diag trace debug remote desk term cmd power shell java node python "
    "ruby perl adobe acro reader flash zip rar pack ext tools util api lib ui app"
).split()
_PROC_SUFFIX = ("32", "64", "2", "3", "w", "x", "ex", "_x64", "_x86", "svc", "srv", "ui", "cli")


def _variant(base: str, rng: random.Random) -> str:
    style = rng.random()
    if style < 0.45:
        return base + rng.choice(_PROC_SUFFIX)
    if style < 0.75:
        return f"{base}-{rng.randint(1, 9)}.{rng.randint(0, 9)}"
    return f"{base}_v{rng.randint(1, 12)}"


def _process_names(n: int, rng: random.Random) -> list[str]:
    """Families of versioned/suffixed variants around a token-built stem."""
    names: set[str] = set()
    while len(names) < n:
        base = "".join(rng.choice(_PROC_TOKENS) for _ in range(rng.choice((1, 2, 2, 3))))
        if not MIN_STEM <= len(base) <= 12:
            continue
        family = {base}
        size = min(1 + int(rng.expovariate(1 / 14)), 40)
        while len(family) < size:
            family.add(_variant(base, rng))
        upper = rng.random() < 0.08
        ext = ".exe" if rng.random() < 0.7 else ".dll"
        for stem in sorted(family):
            other = ".dll" if ext == ".exe" else ".exe"
            name = stem + (other if rng.random() < 0.15 else ext)
            name = name.upper() if upper else name
            if len(names) < n and fits(name):
                names.add(name)
    return sorted(names)


_WORDS = (
    "shop news mail bank pay cloud tech data smart home best top my get go best city "
    "travel food health life style game play music video photo book store market trade "
    "money fast easy global net web app dev code soft line link hub zone spot point "
    "star sun moon sky blue green red gold silver black white apple orange pear lemon "
    "tiger lion bear wolf fox eagle hawk river lake ocean sea island mountain forest "
    "garden house auto car bike ride fly air jet ship port trip tour hotel room bed "
    "chef cook bake pizza coffee tea wine beer fresh pure true real bright clear open "
    "free plus max pro prime one first next new now daily weekly times post press "
    "media studio design art craft print pixel vision view look see watch face friend "
    "social chat talk call ring signal wave radio tv film movie cinema show stage event "
    "ticket sport ball goal team club fit gym yoga run walk school learn study class "
    "tutor wiki info guide map search find quick rapid swift secure safe trust guard "
    "shield lock key cash coin crypto card loan credit fund invest capital wealth "
    "insure legal law doc med care clinic pharma pet dog cat baby kids toy gift party"
).split()
_TLDS = (".com",) * 8 + (".net", ".org", ".io", ".co", ".de", ".ru", ".uk", ".fr", ".info", ".biz", ".us", ".jp")


def _domain_names(n: int, rng: random.Random) -> list[str]:
    names: set[str] = set()
    while len(names) < n:
        k = rng.choice((1, 2, 2, 2, 3))
        parts = [rng.choice(_WORDS) for _ in range(k)]
        sep = "-" if rng.random() < 0.1 else ""
        label = sep.join(parts)
        if rng.random() < 0.1:
            label += str(rng.randint(1, 99))
        name = label + rng.choice(_TLDS)
        if 6 <= len(name) <= 24 and fits(name):
            names.add(name)
    return sorted(names)


def synthesize_names(kind: Mode, n: int = 2000, seed: int = 7) -> list[str]:
    """Deterministic synthetic process-file or domain names (ASCII only)."""
    rng = random.Random(seed)
    return _process_names(n, rng) if kind == "process" else _domain_names(n, rng)
