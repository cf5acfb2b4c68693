"""Interaction logs, behavior lists, query-item sets and the leave-one-out split."""

from __future__ import annotations

import bisect
import csv
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataFormatError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class RecInteraction:
    user: int
    item: int
    time: int
    clicked: bool


@dataclass(frozen=True)
class SearchInteraction:
    query: int
    user: int
    item: int
    time: int
    clicked: bool


@dataclass(frozen=True)
class Vocabulary:
    n_users: int
    n_items: int
    n_queries: int
    user_field_cards: tuple[int, ...] = ()
    # first item field is the category
    item_field_cards: tuple[int, ...] = (1,)

    @property
    def n_categories(self) -> int:
        return self.item_field_cards[0]

    def check_rec(self, r: RecInteraction):
        if not (0 <= r.user < self.n_users and 0 <= r.item < self.n_items):
            raise VocabularyError(f"record {r} references an id outside the vocabulary")

    def check_search(self, r: SearchInteraction):
        if not (0 <= r.query < self.n_queries):
            raise VocabularyError(f"record {r} references query outside the vocabulary")
        self.check_rec(RecInteraction(r.user, r.item, r.time, r.clicked))


REC_HEADER = ("user_id", "item_id", "timestamp", "click")
SEARCH_HEADER = ("query_id", "user_id", "item_id", "timestamp", "click")


def _parse_int(value: str, lineno: int, column: str, path) -> int:
    try:
        out = int(value)
    except ValueError:
        raise DataFormatError(f"{path}:{lineno}: {column} is not an integer: {value!r}") from None
    if out < 0:
        raise DataFormatError(f"{path}:{lineno}: {column} must be non-negative, got {out}")
    return out


def load_interactions(path, domain: str, vocab: Vocabulary | None = None) -> list:
    """Parse ``rec_log.tsv`` or ``search_log.tsv`` into interaction records.

    Raises :class:`DataFormatError` naming the offending line, and
    :class:`VocabularyError` when ``vocab`` is given and an id is out of range.
    """
    if domain not in ("rec", "search"):
        raise ValueError(f"domain must be 'rec' or 'search', got {domain!r}")
    header = REC_HEADER if domain == "rec" else SEARCH_HEADER
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                if tuple(c.strip() for c in row) != header:
                    raise DataFormatError(f"{path}:1: expected header {'/'.join(header)}")
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = [_parse_int(v.strip(), lineno, c, path) for v, c in zip(row, header)]
            if vals[-1] not in (0, 1):
                raise DataFormatError(f"{path}:{lineno}: click must be 0 or 1")
            if domain == "rec":
                rec = RecInteraction(vals[0], vals[1], vals[2], bool(vals[3]))
                if vocab is not None:
                    vocab.check_rec(rec)
            else:
                rec = SearchInteraction(vals[0], vals[1], vals[2], vals[3], bool(vals[4]))
                if vocab is not None:
                    vocab.check_search(rec)
            records.append(rec)
    return records


def load_features(path, id_column: str) -> dict[int, tuple[int, ...]]:
    """Read a feature table keyed by its first column."""
    out: dict[int, tuple[int, ...]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or header[0].strip() != id_column:
            raise DataFormatError(f"{path}:1: first column must be {id_column}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = [_parse_int(v.strip(), lineno, c, path) for v, c in zip(row, header)]
            if vals[0] in out:
                raise DataFormatError(f"{path}:{lineno}: duplicate id {vals[0]}")
            out[vals[0]] = tuple(vals[1:])
    return out


def write_interactions(path, records: Iterable, domain: str) -> None:
    header = REC_HEADER if domain == "rec" else SEARCH_HEADER
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(header) + "\n")
        for r in records:
            if domain == "rec":
                row = (r.user, r.item, r.time, int(r.clicked))
            else:
                row = (r.query, r.user, r.item, r.time, int(r.clicked))
            fh.write("\t".join(map(str, row)) + "\n")


def write_features(path, table: np.ndarray, id_column: str, columns: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join([id_column, *columns]) + "\n")
        for idx, row in enumerate(np.asarray(table)):
            fh.write("\t".join(map(str, [idx, *map(int, row)])) + "\n")


# ---------------------------------------------------------------------------
# splitting


def _by_user(records: Sequence) -> dict[int, list[tuple[int, object]]]:
    grouped: dict[int, list[tuple[int, object]]] = defaultdict(list)
    for seq, r in enumerate(records):
        grouped[r.user].append((seq, r))
    for rows in grouped.values():
        # stable: timestamp ties keep input order
        rows.sort(key=lambda pair: (pair[1].time, pair[0]))
    return grouped


def leave_one_out_split(records: Sequence[RecInteraction]):
    """Per user: last action to test, second-last to validation, the rest to train.

    Users with fewer than three actions go to train only.  Each output list
    keeps the input order of its records.
    """
    role: dict[int, str] = {}
    for rows in _by_user(records).values():
        if len(rows) < 3:
            continue
        role[rows[-1][0]] = "test"
        role[rows[-2][0]] = "val"
    train, val, test = [], [], []
    for seq, r in enumerate(records):
        {"test": test, "val": val}.get(role.get(seq), train).append(r)
    return train, val, test


# ---------------------------------------------------------------------------
# behavior lists


@dataclass(frozen=True)
class Context:
    """Behavior features of one (user, t) anchor."""

    items: tuple[int, ...]
    queries: tuple[int, ...]
    future_pos: tuple[int, ...]
    future_neg: tuple[int, ...]

    @property
    def last_query(self) -> int | None:
        return self.queries[-1] if self.queries else None


@dataclass
class _UserLog:
    keys: list = field(default_factory=list)  # (time, seq)
    items: list = field(default_factory=list)
    clicks: list = field(default_factory=list)


class BehaviorIndex:
    """Chronological per-user lists, queried by anchor.

    ``history`` is searched for the clicked-item list b and, together with
    ``search``, the query list q; both keep the ``l_max`` most recent
    entries with time strictly before the anchor.  The future lists r+/r-
    come from ``future`` (defaults to ``history``): the next ``window``
    records after the anchor.
    """

    def __init__(
        self,
        history: Sequence[RecInteraction],
        search: Sequence[SearchInteraction],
        l_max: int = 50,
        window: int = 10,
        future: Sequence[RecInteraction] | None = None,
    ):
        if l_max < 0 or window < 0:
            raise ValueError("l_max and window must be non-negative")
        self.l_max = l_max
        self.window = window
        self._seq = {id(r): i for i, r in enumerate(history)}
        self._hist = self._index(history)
        self._future = self._hist if future is None else self._index(future, self._seq)
        self._search: dict[int, tuple[list[int], list[int]]] = {}
        events = sorted(
            {(s.user, s.time, s.query, idx) for idx, s in enumerate(_first_of_event(search))},
            key=lambda e: (e[0], e[1], e[3]),
        )
        for user, time, query, _ in events:
            times, queries = self._search.setdefault(user, ([], []))
            times.append(time)
            queries.append(query)

    @staticmethod
    def _index(records, seq_of=None) -> dict[int, _UserLog]:
        logs: dict[int, _UserLog] = {}
        for seq, r in enumerate(records):
            if seq_of is not None:
                seq = seq_of.get(id(r), seq)
            log = logs.setdefault(r.user, _UserLog())
            log.keys.append((r.time, seq))
            log.items.append(r.item)
            log.clicks.append(bool(r.clicked))
        for log in logs.values():
            order = sorted(range(len(log.keys)), key=log.keys.__getitem__)
            log.keys = [log.keys[i] for i in order]
            log.items = [log.items[i] for i in order]
            log.clicks = [log.clicks[i] for i in order]
        return logs

    def context(self, user: int, time: int, record: RecInteraction | None = None) -> Context:
        """Lists for ``user`` at ``time``.

        When ``record`` is given (a record of the history log) the future
        window starts right after it; otherwise at the first record with
        timestamp >= ``time``.
        """
        items: tuple[int, ...] = ()
        log = self._hist.get(user)
        if log is not None:
            end = bisect.bisect_left(log.keys, (time, -1))
            clicked = [it for it, c in zip(log.items[:end], log.clicks[:end]) if c]
            items = tuple(clicked[-self.l_max :]) if self.l_max else ()
        queries: tuple[int, ...] = ()
        if user in self._search:
            times, qs = self._search[user]
            end = bisect.bisect_left(times, time)
            queries = tuple(qs[max(0, end - self.l_max) : end]) if self.l_max else ()
        pos: tuple[int, ...] = ()
        neg: tuple[int, ...] = ()
        flog = self._future.get(user)
        if flog is not None and self.window:
            if record is not None:
                key = (time, self._seq.get(id(record), -1))
                start = bisect.bisect_right(flog.keys, key)
            else:
                start = bisect.bisect_left(flog.keys, (time, -1))
            stop = start + self.window
            win = list(zip(flog.items[start:stop], flog.clicks[start:stop]))
            pos = tuple(i for i, c in win if c)
            neg = tuple(i for i, c in win if not c)
        return Context(items, queries, pos, neg)


def _first_of_event(search: Sequence[SearchInteraction]) -> list[SearchInteraction]:
    """One representative record per search event (user, time, query)."""
    seen = set()
    out = []
    for s in search:
        key = (s.user, s.time, s.query)
        if key not in seen:
            seen.add(key)
            out.append(s)
    return out


def build_behavior_index(rec, search, l_max: int = 50, window: int = 10, future=None) -> BehaviorIndex:
    return BehaviorIndex(rec, search, l_max=l_max, window=window, future=future)


# ---------------------------------------------------------------------------
# query-item sets


@dataclass
class QueryItemSets:
    positives: dict[int, frozenset[int]]
    negatives: dict[int, frozenset[int]]
    enhanced: dict[int, frozenset[int]] = field(default_factory=dict)

    def positives_for(self, query: int, enhanced: bool = True) -> frozenset[int]:
        if enhanced and query in self.enhanced:
            return self.enhanced[query]
        return self.positives.get(query, frozenset())

    @property
    def queries(self) -> list[int]:
        return sorted(set(self.positives) | set(self.negatives))

    def with_enhanced(self, enhanced: dict[int, frozenset[int]]) -> "QueryItemSets":
        return QueryItemSets(self.positives, self.negatives, dict(enhanced))


def build_query_item_sets(search: Iterable[SearchInteraction]) -> QueryItemSets:
    """I_q^+ holds items clicked at least once under q; I_q^- exposed-only items."""
    clicked: dict[int, set[int]] = defaultdict(set)
    exposed: dict[int, set[int]] = defaultdict(set)
    for s in search:
        (clicked if s.clicked else exposed)[s.query].add(s.item)
    queries = set(clicked) | set(exposed)
    positives = {q: frozenset(clicked.get(q, ())) for q in queries}
    negatives = {q: frozenset(exposed.get(q, set()) - clicked.get(q, set())) for q in queries}
    return QueryItemSets(positives, negatives)


# ---------------------------------------------------------------------------
# bundle


@dataclass
class DatasetBundle:
    vocab: Vocabulary
    user_features: np.ndarray  # (n_users, F_u) int
    item_features: np.ndarray  # (n_items, F_i) int, column 0 = category
    rec: list[RecInteraction]
    search: list[SearchInteraction]
    train: list[RecInteraction]
    val: list[RecInteraction]
    test: list[RecInteraction]
    behavior: BehaviorIndex
    query_items: QueryItemSets
    ground_truth: dict[int, frozenset[int]] | None = None

    @property
    def item_category(self) -> np.ndarray:
        return self.item_features[:, 0]

    def split(self, name: str) -> list[RecInteraction]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None


def assemble_bundle(
    rec: list[RecInteraction],
    search: list[SearchInteraction],
    user_features: np.ndarray,
    item_features: np.ndarray,
    n_queries: int | None = None,
    l_max: int = 50,
    window: int = 10,
    ground_truth=None,
) -> DatasetBundle:
    """Split the rec log and build every derived index.

    Histories (b, q) read the whole log; the future windows used for
    next-item prediction read the training split only, so validation and
    test labels never leak into training.
    """
    user_features = np.asarray(user_features, dtype=np.int64).reshape(len(user_features), -1)
    item_features = np.asarray(item_features, dtype=np.int64)
    if item_features.ndim != 2 or item_features.shape[1] < 1:
        raise DataFormatError("item features need at least the category column")
    if n_queries is None:
        n_queries = 1 + max((s.query for s in search), default=-1)
    vocab = Vocabulary(
        n_users=len(user_features),
        n_items=len(item_features),
        n_queries=n_queries,
        user_field_cards=tuple(int(c) + 1 for c in user_features.max(axis=0)) if user_features.size else (),
        item_field_cards=tuple(int(c) + 1 for c in item_features.max(axis=0)),
    )
    for r in rec:
        vocab.check_rec(r)
    for s in search:
        vocab.check_search(s)
    train, val, test = leave_one_out_split(rec)
    behavior = BehaviorIndex(rec, search, l_max=l_max, window=window, future=train)
    return DatasetBundle(
        vocab=vocab,
        user_features=user_features,
        item_features=item_features,
        rec=list(rec),
        search=list(search),
        train=train,
        val=val,
        test=test,
        behavior=behavior,
        query_items=build_query_item_sets(search),
        ground_truth=ground_truth,
    )


def _table(features: dict[int, tuple[int, ...]], n: int, what: str) -> np.ndarray:
    missing = [i for i in range(n) if i not in features]
    if missing or set(features) - set(range(n)):
        raise VocabularyError(f"{what} ids must be exactly 0..{n - 1}")
    width = len(features[0]) if n else 0
    return np.array([features[i] for i in range(n)], dtype=np.int64).reshape(n, width)


def load_bundle(directory, l_max: int = 50, window: int = 10) -> DatasetBundle:
    """Load the four TSV files of a dataset directory."""
    directory = Path(directory)
    users = load_features(directory / "user_features.tsv", "user_id")
    items = load_features(directory / "item_features.tsv", "item_id")
    user_table = _table(users, len(users), "user")
    item_table = _table(items, len(items), "item")
    rec = load_interactions(directory / "rec_log.tsv", "rec")
    search = load_interactions(directory / "search_log.tsv", "search")
    truth = None
    truth_path = directory / "query_clusters.tsv"
    if truth_path.exists():
        truth = defaultdict(set)
        with open(truth_path, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                q, i = line.split("\t")
                truth[int(q)].add(int(i))
        truth = {q: frozenset(v) for q, v in truth.items()}
    n_queries = None
    meta = directory / "vocab.tsv"
    if meta.exists():
        with open(meta, encoding="utf-8") as fh:
            for line in fh:
                key, _, value = line.strip().partition("\t")
                if key == "n_queries":
                    n_queries = int(value)
    return assemble_bundle(rec, search, user_table, item_table, n_queries, l_max, window, truth)


def save_bundle(bundle: DatasetBundle, directory) -> None:
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    write_interactions(directory / "rec_log.tsv", bundle.rec, "rec")
    write_interactions(directory / "search_log.tsv", bundle.search, "search")
    write_features(
        directory / "user_features.tsv",
        bundle.user_features,
        "user_id",
        [f"field_{k + 1}" for k in range(bundle.user_features.shape[1])],
    )
    write_features(
        directory / "item_features.tsv",
        bundle.item_features,
        "item_id",
        ["category"] + [f"field_{k}" for k in range(1, bundle.item_features.shape[1])],
    )
    with open(directory / "vocab.tsv", "w", encoding="utf-8") as fh:
        fh.write(f"n_queries\t{bundle.vocab.n_queries}\n")
    if bundle.ground_truth is not None:
        with open(directory / "query_clusters.tsv", "w", encoding="utf-8") as fh:
            fh.write("query_id\titem_id\n")
            for q in sorted(bundle.ground_truth):
                for i in sorted(bundle.ground_truth[q]):
                    fh.write(f"{q}\t{i}\n")
