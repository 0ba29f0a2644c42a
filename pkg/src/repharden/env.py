"""Episodic evasion environment over a frozen classifier.

State is the classifier's 32-dim embedding of the current report. Actions are
the feasible transformations; disallowed picks never go through — they cost a
penalty and a horizon step but leave the report and budget untouched. An
episode ends on evasion (argmax leaves the source class), on an exhausted
perturbation budget, or at the step horizon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .encoding import pool_category
from .errors import CandidateRejected, EpisodeFinished, VocabError
from .explain import rank_entries
from .model import Classifier
from .reports import CATEGORIES, ClassVocabulary, Report
from .transforms import Action, ActionType, TransformContext, apply_action, feasible_mask


class Terminal(str, Enum):
    EVADED = "Evaded"
    BUDGET_EXHAUSTED = "BudgetExhausted"
    HORIZON_REACHED = "HorizonReached"


@dataclass
class RewardConfig:
    """Shaped-reward weights; certification mode collapses to terminal 0/1."""

    w_source: float = 1.0
    w_target: float = 1.0
    step_penalty: float = 0.001
    disallowed_penalty: float = 0.01
    terminal_bonus: float = 1.0
    certification: bool = False

    def __post_init__(self):
        if self.certification:
            self.w_source = 0.0
            self.w_target = 0.0
            self.step_penalty = 0.0
            self.disallowed_penalty = 0.0
            self.terminal_bonus = 1.0

    @classmethod
    def for_certification(cls) -> "RewardConfig":
        return cls(certification=True)


@dataclass
class EnvState:
    embedding: np.ndarray  # (32,)
    source_score: float
    target_score: float
    budget_remaining: int
    step_index: int


@dataclass
class TrajectoryStep:
    state: EnvState
    action: Action
    reward: float
    feasible: bool
    aux: object = None  # whatever the policy's act() returned alongside the action


@dataclass
class Trajectory:
    """One finished episode, replayable from the stored final report."""

    sample_id: str
    source: str
    target: str
    steps: list[TrajectoryStep] = field(default_factory=list)
    terminal: Terminal | None = None
    final_report: Report | None = None
    final_source_score: float = 0.0

    @property
    def evaded(self) -> bool:
        return self.terminal == Terminal.EVADED

    @property
    def terminal_reward(self) -> float:
        return self.steps[-1].reward if self.steps else 0.0

    @property
    def n_feasible(self) -> int:
        return sum(1 for s in self.steps if s.feasible)

    def total_return(self) -> float:
        return sum(s.reward for s in self.steps)

    def dump_line(self) -> str:
        doc = {
            "sample_id": self.sample_id,
            "actions": [[int(s.action.what), int(s.action.where), int(s.action.how)] for s in self.steps],
            "terminal": self.terminal.value if self.terminal else None,
            "steps": len(self.steps),
            "final_source_score": self.final_source_score,
        }
        return json.dumps(doc, separators=(",", ":"))


class AttackEnv:
    """Single-owner environment bound to a frozen classifier."""

    def __init__(
        self,
        classifier: Classifier,
        reward_cfg: RewardConfig,
        english_vocab,
        class_vocabs: dict[str, ClassVocabulary],
        horizon: int = 1000,
        budget: int = 1000,
        cost_mode: str = "action",
    ):
        self.classifier = classifier
        self.reward_cfg = reward_cfg
        self.english_vocab = english_vocab
        self.class_vocabs = class_vocabs
        self.horizon = horizon
        self.default_budget = budget
        self.cost_mode = cost_mode
        self.done = True
        self.terminal: Terminal | None = None

    # ---- episode lifecycle ---------------------------------------------

    def reset(
        self,
        report: Report,
        source: str,
        target: str,
        budget: int | None = None,
        seed: int | np.random.Generator = 0,
    ) -> EnvState:
        budget = self.default_budget if budget is None else budget
        pools = self.classifier.pool(report)
        pred = self.classifier.predict_pools(pools)
        self.source_idx = self.classifier.class_index(source)
        self.target_idx = self.classifier.class_index(target)
        if pred.argmax != self.source_idx:
            raise CandidateRejected(
                f"sample {report.sample_id!r} classified {self.classifier.classes[pred.argmax]!r}, not {source!r}"
            )
        self.source = source
        self.target = target
        self.report = report.copy()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.ctx = TransformContext(
            english_vocab=self.english_vocab,
            target_vocab=self.class_vocabs.get(target),
            budget_remaining=budget,
            cost_mode=self.cost_mode,
            rng=rng,
        )
        self._pools = pools
        self._pred = pred
        self._ranked = False
        self.step_index = 0
        self.done = budget <= 0
        self.terminal = Terminal.BUDGET_EXHAUSTED if self.done else None
        return self._state()

    def _state(self) -> EnvState:
        probs = self._pred.probs
        return EnvState(
            embedding=self._pred.embedding.copy(),
            source_score=float(probs[self.source_idx]),
            target_score=float(probs[self.target_idx]),
            budget_remaining=self.ctx.budget_remaining,
            step_index=self.step_index,
        )

    def feasible_actions(self) -> np.ndarray:
        return feasible_mask(self.report)

    def step(self, action: Action) -> tuple[EnvState, float, bool, dict]:
        if self.done:
            raise EpisodeFinished("episode is over; call reset")
        cfg = self.reward_cfg
        if action.what == ActionType.XEDIT and not self._ranked:
            # one importance ranking per episode, computed on first use
            self.ctx.explainer_ranking = rank_entries(self.report, self.classifier)
            self._ranked = True
        try:
            out = apply_action(self.report, action, self.ctx)
        except VocabError:
            # unsatisfiable payload request behaves like a disallowed pick
            out = None
        self.step_index += 1

        if out is None or not out.feasible:
            reward = -cfg.disallowed_penalty
            if self.step_index >= self.horizon:
                self.done = True
                self.terminal = Terminal.HORIZON_REACHED
            return self._state(), reward, self.done, {"feasible": False, "terminal": self.terminal}

        prev = self._pred.probs
        self.report = out.report
        touched_cats = {cat for cat, _ in out.touched}
        for cat in touched_cats:
            code = CATEGORIES.index(cat)
            self._pools[code] = pool_category(self.report.categories[cat], self.classifier.encoder)
        self._pred = self.classifier.predict_pools(self._pools)
        probs = self._pred.probs

        reward = (
            cfg.w_source * (float(prev[self.source_idx]) - float(probs[self.source_idx]))
            + cfg.w_target * (float(probs[self.target_idx]) - float(prev[self.target_idx]))
            - cfg.step_penalty
        )
        if self._pred.argmax != self.source_idx:
            self.done = True
            self.terminal = Terminal.EVADED
            if cfg.certification:
                reward += cfg.terminal_bonus
        elif self.ctx.budget_remaining <= 0:
            self.done = True
            self.terminal = Terminal.BUDGET_EXHAUSTED
        elif self.step_index >= self.horizon:
            self.done = True
            self.terminal = Terminal.HORIZON_REACHED
        return self._state(), reward, self.done, {"feasible": True, "terminal": self.terminal}


def rollout(
    env: AttackEnv,
    policy,
    reports: list[Report],
    episodes: int,
    seed: int | np.random.SeedSequence = 0,
    explore: bool = True,
    budget: int | None = None,
    max_reset_tries: int = 50,
) -> list[Trajectory]:
    """Run full episodes with reports sampled per episode; deterministic per seed.

    The policy must expose act(state, mask, rng, explore) -> (Action, aux).
    Misclassified candidates are skipped (they are not valid attack starts).
    """
    classes = env.classifier.classes
    trajectories = []
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(episodes)
    for child in children:
        rng = np.random.default_rng(child)
        traj = None
        for _ in range(max_reset_tries):
            r = reports[int(rng.integers(len(reports)))]
            source = r.label
            others = [c for c in classes if c != source]
            target = others[int(rng.integers(len(others)))]
            try:
                state = env.reset(r, source, target, budget=budget, seed=rng)
            except CandidateRejected:
                continue
            traj = Trajectory(sample_id=r.sample_id, source=source, target=target)
            break
        if traj is None:
            raise CandidateRejected(f"no correctly-classified candidate found in {max_reset_tries} draws")
        while not env.done:
            mask = env.feasible_actions()
            action, aux = policy.act(state.embedding, mask, rng, explore)
            next_state, reward, done, info = env.step(action)
            traj.steps.append(TrajectoryStep(state, action, reward, info["feasible"], aux))
            state = next_state
        traj.terminal = env.terminal
        traj.final_report = env.report
        traj.final_source_score = state.source_score
        trajectories.append(traj)
    return trajectories


def save_trajectories(trajectories: list[Trajectory], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            fh.write(t.dump_line() + "\n")


class RandomPolicy:
    """Uniform over the feasible mask; baseline attacker."""

    def act(self, state, mask: np.ndarray, rng: np.random.Generator, explore: bool = True):
        idx = np.argwhere(mask)
        what, where, how = idx[int(rng.integers(len(idx)))]
        return Action.from_indices(int(what), int(where), int(how)), None
