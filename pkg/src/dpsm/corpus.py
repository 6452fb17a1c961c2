"""POI database / click log / judged file IO, corpus statistics and a seeded
synthetic corpus that stands in for production click logs."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .textrep import has_pinyin, tokenize_letters

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PoiRecord:
    poi_id: str
    name: str
    address: str
    popularity: float


@dataclass(frozen=True)
class ClickRecord:
    query: str
    poi_id: str


@dataclass
class JudgedQuery:
    query: str
    candidates: list  # [(poi_id, grade)]


def _read_lines(path):
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _fields(line, lineno, path, n, what):
    parts = line.rstrip("\r").split("\t")
    if len(parts) != n:
        raise DataError(f"{path}:{lineno}: expected {n} tab-separated fields ({what}), got {len(parts)}")
    return parts


def load_poi_db(path) -> list[PoiRecord]:
    """Parse ``poi_id\\tname\\taddress\\tpopularity`` lines."""
    lines = _read_lines(path)
    if not lines:
        log.warning("%s: empty POI database", path)
    seen = {}
    out = []
    for lineno, line in enumerate(lines, 1):
        pid, name, address, pop = _fields(line, lineno, path, 4, "poi_id, name, address, popularity")
        if not pid:
            raise DataError(f"{path}:{lineno}: empty poi_id")
        if not name:
            raise DataError(f"{path}:{lineno}: empty name for {pid!r}")
        try:
            popularity = float(pop)
        except ValueError:
            raise DataError(f"{path}:{lineno}: popularity {pop!r} is not a number") from None
        if not math.isfinite(popularity) or popularity < 0:
            raise DataError(f"{path}:{lineno}: popularity must be a finite non-negative number")
        if pid in seen:
            raise DataError(f"{path}:{lineno}: duplicate poi_id {pid!r} (first on line {seen[pid]})")
        seen[pid] = lineno
        out.append(PoiRecord(pid, name, address, popularity))
    return out


def write_poi_db(path, pois) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pois:
            fh.write(f"{p.poi_id}\t{p.name}\t{p.address}\t{p.popularity:.4f}\n")


def load_clicks(path, poi_db=None) -> list[ClickRecord]:
    known = None if poi_db is None else {p.poi_id for p in poi_db}
    out = []
    for lineno, line in enumerate(_read_lines(path), 1):
        query, pid = _fields(line, lineno, path, 2, "query, poi_id")
        if known is not None and pid not in known:
            raise DataError(f"{path}:{lineno}: unknown poi_id {pid!r}")
        out.append(ClickRecord(query, pid))
    return out


def write_clicks(path, clicks) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in clicks:
            fh.write(f"{c.query}\t{c.poi_id}\n")


def load_judged(path) -> list[JudgedQuery]:
    """Parse ``query\\tpoi_id\\tgrade`` lines; consecutive lines with the same
    query form one judged query."""
    out = []
    for lineno, line in enumerate(_read_lines(path), 1):
        query, pid, grade = _fields(line, lineno, path, 3, "query, poi_id, grade")
        try:
            g = int(grade)
        except ValueError:
            raise DataError(f"{path}:{lineno}: grade {grade!r} is not an integer") from None
        if g < 0:
            raise DataError(f"{path}:{lineno}: negative grade {g}")
        if out and out[-1].query == query:
            out[-1].candidates.append((pid, g))
        else:
            out.append(JudgedQuery(query, [(pid, g)]))
    return out


def write_judged(path, judged) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for jq in judged:
            for pid, g in jq.candidates:
                fh.write(f"{jq.query}\t{pid}\t{g}\n")


def load_query_kinds(path) -> dict:
    out = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        query, kind = _fields(line, lineno, path, 2, "query, kind")
        out[query] = kind
    return out


@dataclass(frozen=True)
class CorpusStats:
    query_length: float
    name_length: float
    address_length: float
    pinyin_fraction: float
    n_queries: int
    n_pois: int

    def as_dict(self):
        return dict(self.__dict__)


def _mean_len(texts):
    return sum(len(tokenize_letters(t)) for t in texts) / len(texts) if texts else 0.0


def compute_stats(queries, poi_db) -> CorpusStats:
    """Mean letter-token lengths and share of queries carrying Pinyin letters."""
    queries = list(queries)
    pinyin = sum(1 for q in queries if has_pinyin(q)) / len(queries) if queries else 0.0
    return CorpusStats(_mean_len(queries), _mean_len([p.name for p in poi_db]),
                       _mean_len([p.address for p in poi_db]), pinyin, len(queries), len(poi_db))


# -- synthetic corpus ---------------------------------------------------------

QUERY_KINDS = ("full", "prefix", "pinyin", "address", "typo")
DEFAULT_MIX = {"full": 0.40, "prefix": 0.25, "pinyin": 0.15, "address": 0.15, "typo": 0.05}

_INITIALS = ["b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x",
             "zh", "ch", "sh", "r", "z", "c", "s", "y", "w"]
_FINALS = ["a", "o", "e", "i", "u", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong"]

# fixed character pools: name words and address words draw from disjoint blocks
_NAME_CHARS = [chr(0x5409 + 3 * i) for i in range(160)]
_ADDR_CHARS = [chr(0x6C34 + 3 * i) for i in range(120)]
_SYLLABLES = [i + f for f in _FINALS for i in _INITIALS]
LATIN = {ch: _SYLLABLES[i] for i, ch in enumerate(_NAME_CHARS + _ADDR_CHARS)}

_DISTRICT_SUFFIX = "区"
_STREET_SUFFIXES = ("路", "街", "大道")
_NUMBER_SUFFIX = "号"


@dataclass
class NoiseConfig:
    mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    candidates_per_query: int = 10
    judged_fraction: float = 0.1
    source_exponent: float = 0.5  # clicked POI ~ popularity**source_exponent
    zipf_s: float = 1.1

    def validate(self):
        if set(self.mix) - set(QUERY_KINDS):
            raise ConfigError(f"unknown query kinds {sorted(set(self.mix) - set(QUERY_KINDS))}")
        if any(v < 0 for v in self.mix.values()) or abs(sum(self.mix.values()) - 1) > 1e-9:
            raise ConfigError("query kind proportions must be non-negative and sum to 1")
        if self.candidates_per_query < 1 or not 0 <= self.judged_fraction <= 1:
            raise ConfigError("invalid candidate count or judged fraction")


@dataclass
class SyntheticCorpus:
    pois: list
    clicks: list
    judged: list
    click_kinds: list
    judged_kinds: dict

    FILES = ("pois.tsv", "clicks.tsv", "judged.tsv", "query_kinds.tsv")

    def write(self, outdir) -> list:
        os.makedirs(outdir, exist_ok=True)
        paths = [os.path.join(outdir, f) for f in self.FILES]
        write_poi_db(paths[0], self.pois)
        write_clicks(paths[1], self.clicks)
        write_judged(paths[2], self.judged)
        with open(paths[3], "w", encoding="utf-8", newline="\n") as fh:
            for jq in self.judged:
                fh.write(f"{jq.query}\t{self.judged_kinds[jq.query]}\n")
        return paths


def _make_words(rng, chars, count, lengths, weights):
    words, seen = [], set()
    while len(words) < count:
        n = int(rng.choice(lengths, p=weights))
        w = "".join(chars[i] for i in rng.integers(0, len(chars), n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def gen_synthetic(seed: int, n_pois: int, n_queries: int, noise: NoiseConfig | None = None) -> SyntheticCorpus:
    """Seeded POI database, click log and held-out judged queries.

    Names join 2-4 words of a 500-word lexicon (the last word from a small
    head of category-like words); addresses are district + street + number
    from a separate 300-word lexicon.  Queries are drawn from a source POI as
    full names, name prefixes, latinised name prefixes, address substrings or
    one-character typos.
    """
    noise = noise or NoiseConfig()
    noise.validate()
    if n_pois < 10:
        raise ConfigError("n_pois must be >= 10")
    if n_queries < 0:
        raise ConfigError("n_queries must be >= 0")
    rng = np.random.default_rng(seed)

    name_lex = _make_words(rng, _NAME_CHARS, 500, [2, 3], [0.7, 0.3])
    addr_lex = _make_words(rng, _ADDR_CHARS, 300, [2, 3], [0.8, 0.2])
    heads, bodies = name_lex[:40], name_lex[40:]
    districts = [w + _DISTRICT_SUFFIX for w in addr_lex[:20]]
    streets = [w + _STREET_SUFFIXES[i % 3] for i, w in enumerate(addr_lex[20:])]

    ranks = rng.permutation(n_pois) + 1
    popularity = 1000.0 / ranks.astype(float) ** noise.zipf_s
    pois, name_words, street_of = [], [], []
    seen_names = set()
    for i in range(n_pois):
        while True:
            k = int(rng.integers(2, 5))
            ws = [bodies[j] for j in rng.integers(0, len(bodies), k - 1)] + [heads[int(rng.integers(0, len(heads)))]]
            name = " ".join(ws)
            if name not in seen_names:
                break
        seen_names.add(name)
        d = districts[int(rng.integers(0, len(districts)))]
        s = int(rng.integers(0, len(streets)))
        number = f"{int(rng.integers(1, 300))}{_NUMBER_SUFFIX}"
        pois.append(PoiRecord(f"p{i:06d}", name, f"{d} {streets[s]} {number}", round(float(popularity[i]), 4)))
        name_words.append(set(ws))
        street_of.append(s)

    by_word, by_street = {}, {}
    for i, ws in enumerate(name_words):
        for w in ws:
            by_word.setdefault(w, []).append(i)
        by_street.setdefault(street_of[i], []).append(i)

    src_p = np.array([p.popularity for p in pois]) ** noise.source_exponent
    src_cdf = np.cumsum(src_p / src_p.sum())
    kinds = list(noise.mix)
    kind_cdf = np.cumsum([noise.mix[k] for k in kinds])

    def make_query(i, kind):
        """Query text plus the source name words it spells out in full."""
        p = pois[i]
        words = p.name.split(" ")
        letters = tokenize_letters(p.name)
        ends = np.cumsum([len(tokenize_letters(w)) for w in words])

        def within(n):  # words wholly inside the first n letters
            return {w for w, e in zip(words, ends) if e <= n}

        if kind == "full":
            return "".join(letters), set(words)
        if kind == "prefix":
            n = int(rng.integers(2, len(letters)))
            return "".join(letters[:n]), within(n)
        if kind == "pinyin":
            k = int(rng.integers(2, min(4, len(letters)) + 1))
            keep = int(rng.random() < 0.5)  # mixed Hanzi + latin input
            syl = [LATIN[c] for c in letters[keep:k]]
            if rng.random() < 0.3:
                syl[-1] = syl[-1][0]  # unfinished last syllable
                k -= 1
            return "".join(letters[:keep]) + "".join(syl), within(k)
        if kind == "address":
            district, street, number = p.address.split(" ")
            if rng.random() < 0.7:
                return street + number, set()
            return district + street, set()
        if kind == "typo":
            pos = int(rng.integers(0, len(letters)))
            repl = letters[pos]
            while repl == letters[pos]:
                repl = _NAME_CHARS[int(rng.integers(0, len(_NAME_CHARS)))]
            hit = int(np.searchsorted(ends, pos, side="right"))
            return "".join(letters[:pos] + [repl] + letters[pos + 1:]), set(words) - {words[hit]}
        raise ConfigError(f"unknown query kind {kind!r}")

    def draw():
        i = min(int(np.searchsorted(src_cdf, rng.random(), side="right")), n_pois - 1)
        kind = kinds[min(int(np.searchsorted(kind_cdf, rng.random(), side="right")), len(kinds) - 1)]
        return (i, kind, *make_query(i, kind))

    clicks, click_kinds = [], []
    for _ in range(n_queries):
        i, kind, q, _ = draw()
        clicks.append(ClickRecord(q, pois[i].poi_id))
        click_kinds.append(kind)

    # Grade 1 needs a shared name word that the query itself spells out;
    # sharing an unseen word gives the query no evidence of relevance.
    n_judged = int(round(n_queries * noise.judged_fraction))
    judged, judged_kinds = [], {}
    attempts = 0
    while len(judged) < n_judged and attempts < 20 * n_judged + 100:
        attempts += 1
        i, kind, q, shown = draw()
        if q in judged_kinds or not tokenize_letters(q):
            continue
        cand = {i}
        related = sorted({j for w in sorted(shown) for j in by_word[w] if j != i})
        for j in rng.permutation(related)[:3]:
            cand.add(int(j))
        same_street = [j for j in by_street[street_of[i]] if j != i]
        for j in rng.permutation(same_street)[:2]:
            cand.add(int(j))
        while len(cand) < min(noise.candidates_per_query, n_pois):
            cand.add(int(rng.integers(0, n_pois)))
        rows = []
        for j in sorted(cand):
            grade = 2 if j == i else (1 if name_words[j] & shown else 0)
            rows.append((pois[j].poi_id, grade))
        judged.append(JudgedQuery(q, rows))
        judged_kinds[q] = kind
    return SyntheticCorpus(pois, clicks, judged, click_kinds, judged_kinds)
