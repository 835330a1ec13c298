"""Rating ingestion, dense re-indexing, and train/validation/test splits.

The model only ever looks at consumed (nonzero) cells, so a :class:`Dataset`
stores nothing but the nonzero entries, sorted by user then item, together
with the maps between external ids and dense indices.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
from scipy import sparse


class ParseError(ValueError):
    """Malformed input line."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class EmptyDatasetError(ValueError):
    """No nonzero entries left to build a dataset from."""


@dataclass(frozen=True)
class IngestReport:
    lines: int = 0
    kept: int = 0
    dropped_zero: int = 0
    skipped: int = 0  # blank and comment lines

    def to_dict(self) -> dict:
        return {
            "lines": self.lines,
            "kept": self.kept,
            "dropped_zero": self.dropped_zero,
            "skipped": self.skipped,
        }


@dataclass(frozen=True)
class RawRatings:
    records: list[tuple[str, str, int]]
    report: IngestReport = field(default_factory=IngestReport)

    def __len__(self) -> int:
        return len(self.records)


def _parse_value(text: str, lineno: int, source: str | None) -> int:
    text = text.strip()
    try:
        value = int(text)
    except ValueError:
        raise ParseError(f"value {text!r} is not an integer", lineno, source) from None
    if value < 0:
        raise ParseError(f"negative value {value}", lineno, source)
    return value


def parse_ratings(
    stream: IO[bytes] | IO[str] | bytes | str,
    format: str = "tsv",
    source: str | None = None,
) -> RawRatings:
    """Parse ``user<sep>item[<sep>value]`` lines into raw rating records.

    Lines starting with ``#`` and blank lines are skipped. A missing value
    defaults to 1 and zero-valued records are dropped (and counted in the
    report).

    Parameters
    ----------
    stream : binary/text file object, bytes or str
        UTF-8 encoded input.
    format : {"tsv", "csv"}
    source : str, optional
        Name used in error messages, usually the file path.
    """
    if format not in ("tsv", "csv"):
        raise ValueError(f"unknown format {format!r}; expected 'tsv' or 'csv'")
    if isinstance(stream, bytes):
        text: IO[str] = io.StringIO(stream.decode("utf-8"))
    elif isinstance(stream, str):
        text = io.StringIO(stream)
    elif isinstance(stream, io.TextIOBase):
        text = stream
    else:
        text = io.TextIOWrapper(stream, encoding="utf-8", newline="")

    delimiter = "\t" if format == "tsv" else ","
    records: list[tuple[str, str, int]] = []
    lines = dropped = skipped = 0
    for lineno, line in enumerate(text, start=1):
        lines += 1
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            skipped += 1
            continue
        if format == "csv":
            fields = next(csv.reader([line]))
        else:
            fields = line.rstrip("\r\n").split(delimiter)
        if len(fields) < 2 or len(fields) > 3:
            raise ParseError(f"expected 2 or 3 fields, got {len(fields)}", lineno, source)
        user, item = fields[0].strip(), fields[1].strip()
        if not user or not item:
            raise ParseError("empty user or item id", lineno, source)
        value = _parse_value(fields[2], lineno, source) if len(fields) == 3 else 1
        if value == 0:
            dropped += 1
            continue
        records.append((user, item, value))

    report = IngestReport(lines=lines, kept=len(records), dropped_zero=dropped, skipped=skipped)
    return RawRatings(records, report)


@dataclass(frozen=True)
class Triplets:
    """A flat list of ``(u, i, y)`` entries held in three parallel arrays."""

    users: np.ndarray
    items: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        for name in ("users", "items", "values"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.users) == len(self.items) == len(self.values)):
            raise ValueError("users, items and values must have equal length")

    @classmethod
    def from_list(cls, entries: Iterable[tuple[int, int, int]]) -> "Triplets":
        arr = np.asarray(list(entries), dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self) -> Iterator[tuple[int, int, int]]:
        return zip(self.users.tolist(), self.items.tolist(), self.values.tolist())

    def to_list(self) -> list[tuple[int, int, int]]:
        return list(self)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Deduplicated sparse user-item count matrix.

    Entries are sorted by ``(user, item)``. ``user_ids[u]`` is the external id
    of dense user ``u`` (likewise for items).
    """

    n_users: int
    n_items: int
    entries: Triplets
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    def __post_init__(self):
        e = self.entries
        if len(self.user_ids) != self.n_users or len(self.item_ids) != self.n_items:
            raise ValueError("id maps do not match matrix dimensions")
        if len(e):
            if e.users.min() < 0 or e.users.max() >= self.n_users:
                raise ValueError("user index out of range")
            if e.items.min() < 0 or e.items.max() >= self.n_items:
                raise ValueError("item index out of range")
            if e.values.min() < 1:
                raise ValueError("dataset entries must be positive")
            key = e.users * self.n_items + e.items
            if np.any(np.diff(key) <= 0):
                order = np.argsort(key, kind="stable")
                key = key[order]
                if np.any(np.diff(key) == 0):
                    raise ValueError("duplicate (user, item) entries")
                object.__setattr__(
                    self, "entries", Triplets(e.users[order], e.items[order], e.values[order])
                )

    @classmethod
    def from_arrays(
        cls,
        n_users: int,
        n_items: int,
        users,
        items,
        values,
        user_ids: Sequence[str] | None = None,
        item_ids: Sequence[str] | None = None,
    ) -> "Dataset":
        if user_ids is None:
            user_ids = [str(u) for u in range(n_users)]
        if item_ids is None:
            item_ids = [str(i) for i in range(n_items)]
        return cls(n_users, n_items, Triplets(users, items, values), tuple(user_ids), tuple(item_ids))

    @property
    def nnz(self) -> int:
        return len(self.entries)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_users, self.n_items

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {uid: u for u, uid in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {iid: i for i, iid in enumerate(self.item_ids)}

    @cached_property
    def by_user(self) -> sparse.csr_matrix:
        """CSR matrix; row ``u`` holds the user's ``(item, y)`` pairs."""
        e = self.entries
        return sparse.csr_matrix(
            (e.values, (e.users, e.items)), shape=self.shape, dtype=np.int64
        )

    @cached_property
    def by_item(self) -> sparse.csr_matrix:
        """CSR matrix of the transpose; row ``i`` holds ``(user, y)`` pairs."""
        e = self.entries
        return sparse.csr_matrix(
            (e.values, (e.items, e.users)), shape=(self.n_items, self.n_users), dtype=np.int64
        )

    def user_items(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        m = self.by_user
        sl = slice(m.indptr[u], m.indptr[u + 1])
        return m.indices[sl], m.data[sl]

    def item_users(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        m = self.by_item
        sl = slice(m.indptr[i], m.indptr[i + 1])
        return m.indices[sl], m.data[sl]

    def user_activity(self) -> np.ndarray:
        """Number of distinct items each user consumed."""
        return np.bincount(self.entries.users, minlength=self.n_users)

    def item_popularity(self) -> np.ndarray:
        return np.bincount(self.entries.items, minlength=self.n_items)

    def with_entries(self, entries: Triplets) -> "Dataset":
        """Same index space, different entries."""
        return Dataset(self.n_users, self.n_items, entries, self.user_ids, self.item_ids)


def build_dataset(raw: RawRatings, binarize: int | None = None) -> Dataset:
    """Sum duplicate records, optionally threshold, and assign dense ids.

    With ``binarize=t``, entries whose summed value is at least ``t`` become
    1 and the rest are dropped. Dense ids follow first appearance among the
    surviving entries.
    """
    if len(raw) == 0:
        raise EmptyDatasetError("no nonzero ratings in input")
    totals: dict[tuple[str, str], int] = {}
    for user, item, value in raw.records:
        key = (user, item)
        totals[key] = totals.get(key, 0) + value

    if binarize is not None:
        if binarize < 1:
            raise ValueError("binarize threshold must be >= 1")
        totals = {k: 1 for k, v in totals.items() if v >= binarize}
    if not totals:
        raise EmptyDatasetError("no entries left after thresholding")

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    n = len(totals)
    users = np.empty(n, dtype=np.int64)
    items = np.empty(n, dtype=np.int64)
    values = np.empty(n, dtype=np.int64)
    for j, ((user, item), value) in enumerate(totals.items()):
        users[j] = user_index.setdefault(user, len(user_index))
        items[j] = item_index.setdefault(item, len(item_index))
        values[j] = value
    return Dataset.from_arrays(
        len(user_index), len(item_index), users, items, values, list(user_index), list(item_index)
    )


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    validation: Triplets
    test: Triplets
    seed: int


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split(
    ds: Dataset, test_frac: float = 0.20, valid_frac: float = 0.01, seed: int = 0
) -> SplitDataset:
    """Randomly partition the nonzero entries into train/validation/test.

    ``test_frac`` is a fraction of all entries; ``valid_frac`` is a fraction
    of what remains after the test set is removed. Held-out users and items
    keep their dense indices, so their training rows may be empty.
    """
    if not (0 <= test_frac < 1 and 0 <= valid_frac < 1 and test_frac + valid_frac < 1):
        raise ValueError(
            f"invalid split fractions test_frac={test_frac}, valid_frac={valid_frac}"
        )
    n = ds.nnz
    n_test = _round_half_up(test_frac * n)
    n_valid = _round_half_up(valid_frac * (n - n_test))
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    valid_idx = np.sort(perm[n_test : n_test + n_valid])
    train_idx = np.sort(perm[n_test + n_valid :])

    e = ds.entries

    def take(idx: np.ndarray) -> Triplets:
        return Triplets(e.users[idx], e.items[idx], e.values[idx])

    return SplitDataset(ds.with_entries(take(train_idx)), take(valid_idx), take(test_idx), seed)


# -- persistence ------------------------------------------------------------


def _check_id(value: str) -> str:
    if any(ch in value for ch in "\t\r\n"):
        raise ValueError(f"external id {value!r} contains a tab or newline")
    return value


def write_triplets(path: str | os.PathLike, entries: Triplets) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for u, i, y in entries:
            f.write(f"{u}\t{i}\t{y}\n")


def read_triplets(path: str | os.PathLike) -> Triplets:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 3:
                raise ParseError("expected 3 fields", lineno, str(path))
            try:
                rows.append(tuple(int(x) for x in fields))
            except ValueError:
                raise ParseError("non-integer field", lineno, str(path)) from None
    return Triplets.from_list(rows)


def _write_ids(path, ids: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for idx, ext in enumerate(ids):
            f.write(f"{idx}\t{_check_id(ext)}\n")


def _read_ids(path) -> list[str]:
    ids = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            idx, _, ext = line.rstrip("\n").partition("\t")
            if int(idx) != len(ids):
                raise ParseError(f"expected index {len(ids)}, got {idx}", lineno, str(path))
            ids.append(ext)
    return ids


def save_dataset(ds: Dataset, directory: str | os.PathLike, meta: dict | None = None) -> None:
    """Write ``entries.tsv``, ``users.tsv``, ``items.tsv`` and ``meta.json``."""
    os.makedirs(directory, exist_ok=True)
    write_triplets(os.path.join(directory, "entries.tsv"), ds.entries)
    _write_ids(os.path.join(directory, "users.tsv"), ds.user_ids)
    _write_ids(os.path.join(directory, "items.tsv"), ds.item_ids)
    info = {"n_users": ds.n_users, "n_items": ds.n_items, "nnz": ds.nnz}
    info.update(meta or {})
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(directory: str | os.PathLike) -> Dataset:
    with open(os.path.join(directory, "meta.json"), encoding="utf-8") as f:
        meta = json.load(f)
    entries = read_triplets(os.path.join(directory, "entries.tsv"))
    user_ids = _read_ids(os.path.join(directory, "users.tsv"))
    item_ids = _read_ids(os.path.join(directory, "items.tsv"))
    if len(user_ids) != meta["n_users"] or len(item_ids) != meta["n_items"]:
        raise ParseError(f"id maps disagree with meta.json in {directory}")
    return Dataset(meta["n_users"], meta["n_items"], entries, tuple(user_ids), tuple(item_ids))
