"""Hierarchical behavior-summary reports: schema, parsing, validation, cross-references.

A report is a fixed set of 13 named categories, each holding an ordered list
of text entries (duplicates allowed). The read/write/delete file and registry
categories must be subsets of their parent category; renames of a name-like
token must stay consistent across every entry that mentions it, which is what
the cross-reference index tracks.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import EmptyClassError, ParseError, SchemaError, VocabError

CATEGORIES: tuple[str, ...] = (
    "files",
    "read_files",
    "write_files",
    "delete_files",
    "keys",
    "read_keys",
    "write_keys",
    "delete_keys",
    "executed_commands",
    "resolved_apis",
    "mutexes",
    "created_services",
    "started_services",
)

N_CATEGORIES = len(CATEGORIES)


class Category(IntEnum):
    """The 13 report categories with stable integer codes 0-12."""

    FILES = 0
    READ_FILES = 1
    WRITE_FILES = 2
    DELETE_FILES = 3
    KEYS = 4
    READ_KEYS = 5
    WRITE_KEYS = 6
    DELETE_KEYS = 7
    EXECUTED_COMMANDS = 8
    RESOLVED_APIS = 9
    MUTEXES = 10
    CREATED_SERVICES = 11
    STARTED_SERVICES = 12

    @property
    def key(self) -> str:
        return CATEGORIES[self.value]

    @classmethod
    def from_key(cls, key: str) -> "Category":
        return cls(CATEGORIES.index(key))


# subcategory -> parent that must contain every one of its entries
PARENT: dict[str, str] = {
    "read_files": "files",
    "write_files": "files",
    "delete_files": "files",
    "read_keys": "keys",
    "write_keys": "keys",
    "delete_keys": "keys",
}

FILE_CATEGORIES = ("files", "read_files", "write_files", "delete_files")
KEY_CATEGORIES = ("keys", "read_keys", "write_keys", "delete_keys")

_SEPARATORS = re.compile(r"[\\/\s]+")


def entry_token(entry: str) -> str | None:
    """Name-like token of an entry: its final path component.

    Splits on backslash, slash and whitespace; returns None when the entry
    consists of separators only.
    """
    pieces = [p for p in _SEPARATORS.split(entry) if p]
    return pieces[-1] if pieces else None


def entry_components(entry: str) -> list[str]:
    """All non-empty path components of an entry."""
    return [p for p in _SEPARATORS.split(entry) if p]


@dataclass
class Report:
    """One behavior summary: 13 ordered entry lists plus identity metadata.

    Reports are treated as immutable values after construction; mutation goes
    through the transform engine, which returns fresh instances.
    """

    categories: dict[str, list[str]]
    label: str | None = None
    sample_id: str = ""
    repairs: list[str] = field(default_factory=list, compare=False)

    @classmethod
    def empty(cls, label: str | None = None, sample_id: str = "") -> "Report":
        return cls({c: [] for c in CATEGORIES}, label=label, sample_id=sample_id)

    def entries(self, category: str | Category) -> list[str]:
        key = category.key if isinstance(category, Category) else category
        return self.categories[key]

    def n_entries(self) -> int:
        return sum(len(v) for v in self.categories.values())

    def copy(self) -> "Report":
        return Report(
            {c: list(v) for c, v in self.categories.items()},
            label=self.label,
            sample_id=self.sample_id,
            repairs=list(self.repairs),
        )

    def locations(self) -> list[tuple[str, int]]:
        """All (category, index) entry locations in canonical order."""
        return [(c, i) for c in CATEGORIES for i in range(len(self.categories[c]))]


@dataclass(frozen=True)
class Violation:
    """One broken report invariant, naming the rule and where it fired."""

    rule: str
    category: str | None = None
    index: int | None = None


def parse_report(text: str | bytes, *, sample_id: str = "", label: str | None = None) -> Report:
    """Parse a JSON document into a Report, materializing all 13 categories.

    Accepts either a bare summary object (category name -> entry list) or the
    dataset wrapper ``{"sample_id": ..., "label": ..., "summary": {...}}``.
    Missing categories become empty lists. Entries present in a read/write/
    delete subcategory but absent from the parent are inserted into the parent
    and a repair note is recorded.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("top-level JSON value must be an object")

    summary = doc
    if isinstance(doc.get("summary"), dict):
        summary = doc["summary"]
        sample_id = doc.get("sample_id", sample_id) or sample_id
        if doc.get("label") is not None:
            label = doc["label"]

    categories: dict[str, list[str]] = {}
    for cat in CATEGORIES:
        raw = summary.get(cat, [])
        if not isinstance(raw, list):
            raise SchemaError(cat, -1, "category value must be a list")
        entries = []
        for i, item in enumerate(raw):
            if not isinstance(item, str):
                raise SchemaError(cat, i, f"entry must be a string, got {type(item).__name__}")
            if not item:
                raise SchemaError(cat, i, "entry must be non-empty")
            entries.append(item)
        categories[cat] = entries

    repairs: list[str] = []
    for sub, parent in PARENT.items():
        present = set(categories[parent])
        for entry in categories[sub]:
            if entry not in present:
                categories[parent].append(entry)
                present.add(entry)
                repairs.append(f"inserted {entry!r} into {parent} (required by {sub})")

    return Report(categories, label=label, sample_id=sample_id, repairs=repairs)


def serialize_report(r: Report) -> str:
    """Serialize a Report to its one-line JSON dataset form.

    Inverse of parse_report: entry order is preserved and category keys are
    emitted in their canonical order, so serializing twice is byte-identical.
    """
    doc = {
        "sample_id": r.sample_id,
        "label": r.label,
        "summary": {c: r.categories[c] for c in CATEGORIES},
    }
    return json.dumps(doc, ensure_ascii=False, separators=(",", ":"))


def validate_report(r: Report) -> list[Violation]:
    """Check every structural invariant; empty result means the report is valid."""
    violations: list[Violation] = []
    for cat in CATEGORIES:
        if cat not in r.categories:
            violations.append(Violation("missing_category", cat))
    for cat in r.categories:
        if cat not in CATEGORIES:
            violations.append(Violation("unknown_category", cat))
    for cat in CATEGORIES:
        entries = r.categories.get(cat)
        if entries is None:
            continue
        if not isinstance(entries, list):
            violations.append(Violation("not_a_list", cat))
            continue
        for i, entry in enumerate(entries):
            if not isinstance(entry, str):
                violations.append(Violation("non_string_entry", cat, i))
            elif not entry:
                violations.append(Violation("empty_entry", cat, i))
    for sub, parent in PARENT.items():
        sub_entries = r.categories.get(sub)
        parent_entries = r.categories.get(parent)
        if not isinstance(sub_entries, list) or not isinstance(parent_entries, list):
            continue
        present = {e for e in parent_entries if isinstance(e, str)}
        for i, entry in enumerate(sub_entries):
            if isinstance(entry, str) and entry not in present:
                violations.append(Violation("superset", sub, i))
    return violations


# token -> set of (category, entry index, (start, end)) occurrences
XRefIndex = dict[str, set[tuple[str, int, tuple[int, int]]]]


def build_xref_index(r: Report) -> XRefIndex:
    """Index every occurrence of every entry's name token across the report.

    For each entry both the full entry string and its final path component
    are indexed; an occurrence is any (possibly overlapping) substring match
    in any entry of any category, executed commands included.
    """
    tokens: set[str] = set()
    for entries in r.categories.values():
        for entry in entries:
            tokens.add(entry)
            token = entry_token(entry)
            if token is not None:
                tokens.add(token)

    index: XRefIndex = {}
    for token in tokens:
        locations = find_token_locations(r, token)
        if locations:
            index[token] = locations
    return index


def find_token_locations(r: Report, token: str) -> set[tuple[str, int, tuple[int, int]]]:
    """All substring occurrences of one token across the report."""
    locations: set[tuple[str, int, tuple[int, int]]] = set()
    width = len(token)
    for cat in CATEGORIES:
        for i, entry in enumerate(r.categories[cat]):
            start = entry.find(token)
            while start != -1:
                locations.add((cat, i, (start, start + width)))
                start = entry.find(token, start + 1)
    return locations


class ClassVocabulary:
    """Per-class frequency tables of whole entries and of path components.

    Sampling is proportional to the observed frequency; cumulative tables are
    cached lazily per category.
    """

    def __init__(self, label: str):
        self.label = label
        self.entry_freq: dict[str, Counter] = {c: Counter() for c in CATEGORIES}
        self.token_freq: dict[str, Counter] = {c: Counter() for c in CATEGORIES}
        self._entry_tables: dict[str, tuple[list[str], np.ndarray]] = {}
        self._token_tables: dict[str, tuple[list[str], np.ndarray]] = {}

    def add_report(self, r: Report) -> None:
        for cat in CATEGORIES:
            entries = r.categories[cat]
            if not entries:
                continue
            self.entry_freq[cat].update(entries)
            for entry in entries:
                self.token_freq[cat].update(entry_components(entry))
        self._entry_tables.clear()
        self._token_tables.clear()

    def _table(self, freq: Counter, cache: dict, cat: str) -> tuple[list[str], np.ndarray]:
        if cat not in cache:
            items = list(freq.keys())
            weights = np.array([freq[k] for k in items], dtype=np.float64)
            cache[cat] = (items, np.cumsum(weights))
        return cache[cat]

    def sample_entry(self, category: str, rng: np.random.Generator) -> str:
        items, cum = self._table(self.entry_freq[category], self._entry_tables, category)
        if not items:
            raise VocabError(f"class {self.label!r} has no {category} entries")
        return items[int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))]

    def sample_token(self, category: str, rng: np.random.Generator) -> str:
        items, cum = self._table(self.token_freq[category], self._token_tables, category)
        if not items:
            raise VocabError(f"class {self.label!r} has no {category} tokens")
        return items[int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))]


def extract_vocabulary(corpus: list[Report], label: str) -> ClassVocabulary:
    """Build the frequency vocabulary of one class from a corpus."""
    vocab = ClassVocabulary(label)
    found = False
    for r in corpus:
        if r.label == label:
            vocab.add_report(r)
            found = True
    if not found:
        raise EmptyClassError(f"no reports labeled {label!r} in corpus of {len(corpus)}")
    return vocab
