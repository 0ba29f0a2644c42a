"""Feasible report transformations: add or rename entries, never remove.

An action is a (what, where, how) triple; renames propagate to every other
entry that mentions the renamed token, so file references inside commands and
parent/subcategory copies stay consistent. Resolved APIs only ever grow.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BudgetExhausted, VocabError
from .reports import (
    CATEGORIES,
    FILE_CATEGORIES,
    KEY_CATEGORIES,
    PARENT,
    ClassVocabulary,
    Report,
    entry_token,
)


class ActionType(IntEnum):
    ADD = 0
    EDIT = 1
    XEDIT = 2


class PayloadMode(IntEnum):
    RANDOM_STRING = 0
    ENGLISH_VOCAB = 1
    TARGET_VOCAB = 2
    RANDOM_CHOICE = 3


N_WHAT = len(ActionType)
N_WHERE = len(CATEGORIES)
N_HOW = len(PayloadMode)

_ALPHANUM = string.ascii_letters + string.digits
_HIVES = (
    "HKEY_LOCAL_MACHINE",
    "HKEY_CURRENT_USER",
    "HKEY_CLASSES_ROOT",
    "HKEY_USERS",
    "HKEY_CURRENT_CONFIG",
)
_RESYNTH_TRIES = 8


@dataclass(frozen=True)
class Action:
    """One transformation: what to do, where to do it, how to build the payload."""

    what: ActionType
    where: int  # category code 0-12
    how: PayloadMode

    @classmethod
    def from_indices(cls, what: int, where: int, how: int) -> "Action":
        return cls(ActionType(what), int(where), PayloadMode(how))


@dataclass
class TransformContext:
    """Per-episode mutable state backing a sequence of actions.

    Owns the RNG, the sequential-edit cursors, the remaining perturbation
    budget and the (optional) importance ranking consumed by XEdit.
    """

    english_vocab: Sequence[str]
    target_vocab: ClassVocabulary | None = None
    rng_seed: int = 0
    edit_cursor: dict[str, int] = field(default_factory=dict)
    explainer_ranking: list[tuple[str, int, float]] | None = None
    budget_remaining: int = 1000
    cost_mode: str = "action"  # "action" | "touched"
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.rng_seed)


@dataclass
class TransformOutcome:
    """Result of one applied action; report is a fresh instance when feasible."""

    report: Report
    cost: int
    feasible: bool
    touched: list[tuple[str, int]]


def feasible_mask(r: Report) -> np.ndarray:
    """Boolean (what=3, where=13, how=4) tensor of allowed actions.

    Add is always allowed. Edit/XEdit need an existing entry and are never
    allowed on resolved_apis, whose entries cannot be renamed or removed.
    """
    mask = np.zeros((N_WHAT, N_WHERE, N_HOW), dtype=bool)
    mask[ActionType.ADD, :, :] = True
    for code, cat in enumerate(CATEGORIES):
        if cat != "resolved_apis" and r.categories[cat]:
            mask[ActionType.EDIT, code, :] = True
            mask[ActionType.XEDIT, code, :] = True
    return mask


@lru_cache(maxsize=4)
def _read_word_file(path: str | None) -> tuple[str, ...]:
    if path is None:
        text = resources.files("repharden.data").joinpath("english_words.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return tuple(w.strip() for w in text.splitlines() if w.strip())


def load_english_vocab(path: str | None = None) -> tuple[str, ...]:
    """Load the bundled (or overridden) one-word-per-line vocabulary."""
    words = _read_word_file(path)
    if not words:
        raise VocabError(f"empty word list: {path!r}")
    return words


def _random_string(rng: np.random.Generator) -> str:
    length = int(rng.integers(4, 17))
    return "".join(_ALPHANUM[i] for i in rng.integers(0, len(_ALPHANUM), size=length))


def _segment(how: PayloadMode, where: str, ctx: TransformContext) -> str:
    """One payload token in the given mode; RandomChoice picks a mode per call."""
    if how == PayloadMode.RANDOM_CHOICE:
        how = PayloadMode(int(ctx.rng.integers(0, 3)))
    if how == PayloadMode.RANDOM_STRING:
        return _random_string(ctx.rng)
    if how == PayloadMode.ENGLISH_VOCAB:
        return ctx.english_vocab[int(ctx.rng.integers(0, len(ctx.english_vocab)))]
    if ctx.target_vocab is None:
        raise VocabError("target-vocab payload requested without a target vocabulary")
    return ctx.target_vocab.sample_token(where, ctx.rng)


def synthesize_payload(how: PayloadMode, where: str, ctx: TransformContext) -> str:
    """Build one new entry for a category.

    TargetVocab draws a whole category-matched entry with probability
    proportional to its frequency in the target class. The other modes build
    path-shaped payloads for file/key categories (drive + directories +
    filename, hive + subkeys) and a single token elsewhere.
    """
    if how == PayloadMode.TARGET_VOCAB:
        if ctx.target_vocab is None:
            raise VocabError("target-vocab payload requested without a target vocabulary")
        return ctx.target_vocab.sample_entry(where, ctx.rng)
    if where in FILE_CATEGORIES:
        n_dirs = int(ctx.rng.integers(1, 4))
        parts = [_segment(how, where, ctx) for _ in range(n_dirs + 1)]
        return "C:\\" + "\\".join(parts)
    if where in KEY_CATEGORIES:
        hive = _HIVES[int(ctx.rng.integers(0, len(_HIVES)))]
        n_subkeys = int(ctx.rng.integers(1, 5))
        parts = [_segment(how, where, ctx) for _ in range(n_subkeys)]
        return hive + "\\" + "\\".join(parts)
    return _segment(how, where, ctx)


def _fallback_payload(forbidden: str) -> str:
    # deterministic last resort: any non-separator char absent from the old token
    for i in range(33, 0x3000):
        c = chr(i)
        if c not in forbidden and not c.isspace() and c not in "\\/":
            return c * 8
    raise VocabError("could not synthesize a payload distinct from the old token")


def _synthesize_replacement(how: PayloadMode, where: str, ctx: TransformContext, forbidden: str | None) -> str:
    """Payload for a rename; must not contain the token being replaced."""
    for _ in range(_RESYNTH_TRIES):
        payload = synthesize_payload(how, where, ctx)
        if forbidden is None or forbidden not in payload:
            return payload
    return _fallback_payload(forbidden)


def _replace_token(entry: str, t_old: str, repl: str) -> str:
    """Remove every occurrence of t_old from entry, substituting repl.

    A single str.replace pass can leave (or re-form) an occurrence when t_old
    overlaps itself, e.g. replacing "aa" inside "aaa". Loop a few passes; if
    the token still survives, redo the rename with a payload sharing no
    characters with t_old, which a single pass provably clears.
    """
    out = entry.replace(t_old, repl)
    for _ in range(_RESYNTH_TRIES):
        if t_old not in out:
            return out
        out = out.replace(t_old, repl)
    return entry.replace(t_old, _fallback_payload(t_old))


def apply_action(r: Report, a: Action, ctx: TransformContext) -> TransformOutcome:
    """Apply one action, returning a fresh report and charging the budget.

    Infeasible actions return a feasible=False outcome with the input report
    untouched and nothing charged. Renames rewrite every entry that equals the
    old entry (whole-entry replacement, keeping parent/subcategory copies in
    lockstep) and every entry containing the old entry's name token (in-place
    token substitution, keeping command references consistent).
    """
    if ctx.budget_remaining <= 0:
        raise BudgetExhausted("perturbation budget exhausted")
    if not feasible_mask(r)[a.what, a.where, a.how]:
        return TransformOutcome(r, 0, False, [])

    where = CATEGORIES[a.where]
    if a.what == ActionType.ADD:
        payload = synthesize_payload(a.how, where, ctx)
        cats = dict(r.categories)
        touched = []
        cats[where] = cats[where] + [payload]
        touched.append((where, len(cats[where]) - 1))
        parent = PARENT.get(where)
        if parent is not None and payload not in cats[parent]:
            cats[parent] = cats[parent] + [payload]
            touched.append((parent, len(cats[parent]) - 1))
    else:
        entries = r.categories[where]
        idx = None
        if a.what == ActionType.XEDIT and ctx.explainer_ranking:
            idx = next(
                (i for cat, i, _ in ctx.explainer_ranking if cat == where and i < len(entries)),
                None,
            )
        if idx is None:  # sequential cursor; XEdit falls back here without a ranking
            idx = ctx.edit_cursor.get(where, 0) % len(entries)
            ctx.edit_cursor[where] = (idx + 1) % len(entries)
        old = entries[idx]
        t_old = entry_token(old)
        payload = _synthesize_replacement(a.how, where, ctx, t_old)
        t_new = entry_token(payload)
        repl = t_new if t_new is not None else payload
        cats = {}
        touched = []
        for cat in CATEGORIES:
            lst = r.categories[cat]
            if cat == "resolved_apis":  # add-only: renames never reach into API names
                cats[cat] = lst
                continue
            out = None
            for i, e in enumerate(lst):
                ne = e
                if e == old:
                    ne = payload
                elif t_old is not None and t_old in e:
                    ne = _replace_token(e, t_old, repl)
                if ne != e:
                    if out is None:
                        out = list(lst)
                    out[i] = ne
                    touched.append((cat, i))
            cats[cat] = out if out is not None else lst

    cost = 1 if ctx.cost_mode == "action" else len(touched)
    ctx.budget_remaining = max(0, ctx.budget_remaining - cost)
    report = Report(cats, label=r.label, sample_id=r.sample_id, repairs=list(r.repairs))
    return TransformOutcome(report, cost, True, touched)


def count_cost(outcome: TransformOutcome) -> int:
    """Perturbation units charged for one outcome: 1 per applied action."""
    return 1 if outcome.feasible else 0
