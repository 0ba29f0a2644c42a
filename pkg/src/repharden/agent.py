"""Multidiscrete policy-gradient attacker.

The policy conditions on the classifier's 32-dim embedding and factorizes the
action as three independent categorical heads (what / where / how), so the
joint log-probability is the sum of the head log-probabilities. Training is
advantage-weighted policy gradient with a learned value baseline and entropy
bonus; an optional clipped-ratio variant sits behind `ppo_clip`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .env import AttackEnv, RewardConfig, Trajectory, rollout
from .errors import ConfigError, PolicyNumericalError
from .model import Adam, Classifier
from .reports import Report, extract_vocabulary
from .transforms import Action, N_HOW, N_WHAT, N_WHERE, load_english_vocab

logger = logging.getLogger(__name__)

STATE_DIM = 32
HEAD_SIZES = (N_WHAT, N_WHERE, N_HOW)
_MASK_OFF = -1e30


@dataclass
class AgentConfig:
    """Attacker hyperparameters; defaults sit inside the documented ranges."""

    lr: float = 2e-3
    batch_size_rl: int = 32
    steps_per_episode: int = 1000  # horizon
    steps_per_iteration: int = 50_000
    gamma: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    hidden_dim: int = 64
    mask_heads: bool = False
    ppo_clip: float | None = None
    budget: int = 1000
    eval_episodes: int = 200
    source_classes: list[str] | None = None  # default: every class except "benign"
    english_vocab_path: str | None = None
    cost_mode: str = "action"

    def __post_init__(self):
        for name in ("lr", "batch_size_rl", "steps_per_episode", "steps_per_iteration", "gamma"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ConfigError("coefficients must be non-negative")


@dataclass
class ActInfo:
    logprob: float
    value: float
    head_masks: tuple[np.ndarray, np.ndarray, np.ndarray]


class Policy:
    """Torso + three categorical heads + value head over a flat param dict.

    Heads and the value output start at zero, so the initial policy is exactly
    uniform over each head and the initial baseline is zero.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0, hidden_dim: int = 64, mask_heads: bool = False):
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(STATE_DIM)
        self.hidden_dim = hidden_dim
        self.mask_heads = mask_heads
        self.params: dict[str, np.ndarray] = {
            "Wt": rng.uniform(-bound, bound, size=(STATE_DIM, hidden_dim)),
            "bt": rng.uniform(-bound, bound, size=(hidden_dim,)),
            "Ww": np.zeros((hidden_dim, N_WHAT)),
            "bw": np.zeros(N_WHAT),
            "Wc": np.zeros((hidden_dim, N_WHERE)),
            "bc": np.zeros(N_WHERE),
            "Wh": np.zeros((hidden_dim, N_HOW)),
            "bh": np.zeros(N_HOW),
            "Wv": np.zeros((hidden_dim,)),
            "bv": np.zeros(1),
        }

    # ---- forward ---------------------------------------------------------

    def _torso(self, S: np.ndarray) -> np.ndarray:
        return np.maximum(S @ self.params["Wt"] + self.params["bt"], 0.0)

    def _head_logits(self, h: np.ndarray) -> list[np.ndarray]:
        p = self.params
        return [h @ p["Ww"] + p["bw"], h @ p["Wc"] + p["bc"], h @ p["Wh"] + p["bh"]]

    def value(self, S: np.ndarray) -> np.ndarray:
        h = self._torso(S)
        return h @ self.params["Wv"] + self.params["bv"][0]

    @staticmethod
    def head_marginals(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-head feasibility: what and where from the mask, how unmasked."""
        return mask.any(axis=(1, 2)), mask.any(axis=(0, 2)), np.ones(N_HOW, dtype=bool)

    def act(
        self, state: np.ndarray, mask: np.ndarray, rng: np.random.Generator, explore: bool = True
    ) -> tuple[Action, ActInfo]:
        h = self._torso(state[None])[0]
        logits = self._head_logits(h[None])
        if self.mask_heads:
            head_masks = self.head_marginals(mask)
        else:
            head_masks = tuple(np.ones(n, dtype=bool) for n in HEAD_SIZES)
        picks = []
        logprob = 0.0
        for logit_row, hm in zip(logits, head_masks):
            row = logit_row[0].copy()
            if np.any(np.isnan(row)):
                raise PolicyNumericalError("NaN in policy logits")
            row[~hm] = _MASK_OFF
            row -= row.max()
            p = np.exp(row)
            p /= p.sum()
            if explore:
                pick = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
                pick = min(pick, len(p) - 1)
            else:
                pick = int(np.argmax(p))
            picks.append(pick)
            logprob += float(np.log(p[pick]))
        value = float(h @ self.params["Wv"] + self.params["bv"][0])
        return Action.from_indices(*picks), ActInfo(logprob, value, head_masks)

    # ---- loss / gradients --------------------------------------------------

    def loss_and_grads(
        self,
        S: np.ndarray,
        actions: np.ndarray,
        returns: np.ndarray,
        advantages: np.ndarray,
        head_masks: list[np.ndarray],
        entropy_coef: float,
        value_coef: float,
        old_logprobs: np.ndarray | None = None,
        ppo_clip: float | None = None,
    ):
        """Batch loss and analytic grads; advantages are fixed constants."""
        p = self.params
        B = S.shape[0]
        a_pre = S @ p["Wt"] + p["bt"]
        h = np.maximum(a_pre, 0.0)
        logits = self._head_logits(h)
        probs, logps, entropies, picked_lp = [], [], [], np.zeros(B)
        for k, (logit, hm) in enumerate(zip(logits, head_masks)):
            row = np.where(hm, logit, _MASK_OFF)
            row = row - row.max(axis=1, keepdims=True)
            e = np.exp(row)
            pk = e / e.sum(axis=1, keepdims=True)
            lp = np.log(np.maximum(pk, 1e-300))
            probs.append(pk)
            logps.append(lp)
            entropies.append(-np.sum(np.where(pk > 0, pk * lp, 0.0), axis=1))
            picked_lp += lp[np.arange(B), actions[:, k]]

        v = h @ p["Wv"] + p["bv"][0]
        entropy = np.sum(entropies, axis=0)

        if ppo_clip is not None and old_logprobs is not None:
            ratio = np.exp(picked_lp - old_logprobs)
            unclipped = ratio * advantages
            clipped = np.clip(ratio, 1.0 - ppo_clip, 1.0 + ppo_clip) * advantages
            policy_obj = np.minimum(unclipped, clipped)
            active = (unclipped <= clipped) | (np.abs(ratio - 1.0) < ppo_clip)
            coef = ratio * advantages * active
        else:
            policy_obj = picked_lp * advantages
            coef = advantages

        policy_loss = -float(np.mean(policy_obj))
        value_loss = value_coef * float(np.mean((v - returns) ** 2))
        entropy_term = -entropy_coef * float(np.mean(entropy))
        loss = policy_loss + value_loss + entropy_term

        dh = np.zeros_like(h)
        grads: dict[str, np.ndarray] = {}
        names = [("Ww", "bw"), ("Wc", "bc"), ("Wh", "bh")]
        for k, (pk, lp) in enumerate(zip(probs, logps)):
            onehot = np.zeros_like(pk)
            onehot[np.arange(B), actions[:, k]] = 1.0
            dlogits = (coef[:, None] * (pk - onehot)) / B
            ent_inner = np.where(pk > 0, lp, 0.0) + entropies[k][:, None]
            dlogits += entropy_coef * pk * ent_inner / B
            dlogits = np.where(head_masks[k], dlogits, 0.0)
            wname, bname = names[k]
            grads[wname] = h.T @ dlogits
            grads[bname] = dlogits.sum(axis=0)
            dh += dlogits @ p[wname].T
        dv = value_coef * 2.0 * (v - returns) / B
        grads["Wv"] = h.T @ dv
        grads["bv"] = np.array([dv.sum()])
        dh += np.outer(dv, p["Wv"])
        da = dh * (a_pre > 0)
        grads["Wt"] = S.T @ da
        grads["bt"] = da.sum(axis=0)
        stats = {
            "loss": loss,
            "policy_loss": policy_loss,
            "value_loss": value_loss,
            "entropy": float(np.mean(entropy)),
        }
        return loss, grads, stats


def sample_action(
    policy: Policy, state: np.ndarray, mask: np.ndarray, rng: np.random.Generator, explore: bool = True
) -> tuple[Action, float]:
    action, info = policy.act(state, mask, rng, explore)
    return action, info.logprob


def discounted_returns(rewards: list[float], gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def _flatten(trajectories: list[Trajectory], gamma: float):
    S, acts, G, old_lp = [], [], [], []
    masks: list[list[np.ndarray]] = [[], [], []]
    for traj in trajectories:
        if not traj.steps:
            continue
        returns = discounted_returns([s.reward for s in traj.steps], gamma)
        for step, g in zip(traj.steps, returns):
            S.append(step.state.embedding)
            acts.append([int(step.action.what), int(step.action.where), int(step.action.how)])
            G.append(g)
            aux = step.aux
            old_lp.append(aux.logprob if isinstance(aux, ActInfo) else 0.0)
            for k, n in enumerate(HEAD_SIZES):
                masks[k].append(aux.head_masks[k] if isinstance(aux, ActInfo) else np.ones(n, dtype=bool))
    head_masks = [np.array(m) for m in masks]
    return np.array(S), np.array(acts, dtype=np.int64), np.array(G), np.array(old_lp), head_masks


def update(
    policy: Policy,
    trajectories: list[Trajectory],
    cfg: AgentConfig,
    opt: Adam,
    rng: np.random.Generator,
) -> dict:
    """One pass of minibatch policy-gradient updates over the trajectories."""
    if not trajectories:
        raise ConfigError("update needs at least one trajectory")
    S, acts, G, old_lp, head_masks = _flatten(trajectories, cfg.gamma)
    if S.size == 0:
        return {"updated": False, "mean_return": 0.0}
    values = policy.value(S)
    adv = G - values
    mean_return = float(np.mean([t.total_return() for t in trajectories]))
    if not np.any(adv):
        logger.debug("all advantages are zero; skipping update")
        return {"updated": False, "mean_return": mean_return}

    order = rng.permutation(len(S))
    stats = {}
    for start in range(0, len(S), cfg.batch_size_rl):
        idx = order[start : start + cfg.batch_size_rl]
        _, grads, stats = policy.loss_and_grads(
            S[idx],
            acts[idx],
            G[idx],
            adv[idx],
            [m[idx] for m in head_masks],
            cfg.entropy_coef,
            cfg.value_coef,
            old_logprobs=old_lp[idx] if cfg.ppo_clip is not None else None,
            ppo_clip=cfg.ppo_clip,
        )
        opt.step(policy.params, grads)
    stats["updated"] = True
    stats["mean_return"] = mean_return
    return stats


@dataclass
class AttackStats:
    """Outcome of one attack phase, measured on the trailing episode window."""

    asr: float
    mean_score: float
    mean_len: float
    episodes: int
    env_steps: int
    evaded: list[Report] = field(default_factory=list, repr=False)
    converged: bool = False


def default_source_classes(classes: list[str]) -> list[str]:
    others = [c for c in classes if c != "benign"]
    return others if others else list(classes)


def build_attack_env(
    classifier: Classifier,
    reports: list[Report],
    cfg: AgentConfig,
    reward_cfg: RewardConfig,
) -> tuple[AttackEnv, list[Report]]:
    """Env plus candidate pool for an attack phase.

    `reports` is the attacker's world: vocabularies come from all of it,
    candidates are the correctly-classified members of the source classes.
    """
    sources = cfg.source_classes or default_source_classes(classifier.classes)
    class_vocabs = {}
    for label in sorted({r.label for r in reports}):
        class_vocabs[label] = extract_vocabulary(reports, label)
    candidates = [
        r for r in reports if r.label in sources and classifier.predict(r).argmax == classifier.class_index(r.label)
    ]
    if not candidates:
        raise ConfigError("no correctly-classified candidate reports to attack")
    env = AttackEnv(
        classifier,
        reward_cfg,
        english_vocab=load_english_vocab(cfg.english_vocab_path),
        class_vocabs=class_vocabs,
        horizon=cfg.steps_per_episode,
        budget=cfg.budget,
        cost_mode=cfg.cost_mode,
    )
    return env, candidates


def train_attacker(
    classifier: Classifier,
    reports: list[Report],
    cfg: AgentConfig,
    seed: int | np.random.SeedSequence = 0,
    reward_cfg: RewardConfig | None = None,
    stat_window: int = 200,
    stop_delta: float | None = None,
    stop_window: int = 200,
) -> tuple[Policy, AttackStats]:
    """Alternate rollouts and updates for cfg.steps_per_iteration env steps.

    With stop_delta set, training ends early once the mean terminal reward of
    two consecutive stop_window-episode blocks changes by less than the delta.
    """
    reward_cfg = reward_cfg or RewardConfig()
    env, candidates = build_attack_env(classifier, reports, cfg, reward_cfg)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    pol_ss, roll_ss, upd_ss = ss.spawn(3)
    policy = Policy(seed=pol_ss, hidden_dim=cfg.hidden_dim, mask_heads=cfg.mask_heads)
    opt = Adam(policy.params, cfg.lr)
    upd_rng = np.random.default_rng(upd_ss)

    env_steps = 0
    window: list[Trajectory] = []
    evaded: list[Report] = []
    terminal_rewards: list[float] = []
    episodes = 0
    converged = False
    while env_steps < cfg.steps_per_iteration:
        trajs = rollout(env, policy, candidates, episodes=1, seed=roll_ss.spawn(1)[0], explore=True)
        traj = trajs[0]
        env_steps += len(traj.steps)
        episodes += 1
        if traj.evaded and traj.final_report is not None:
            evaded.append(traj.final_report)
        window.append(traj)
        if len(window) > stat_window:
            window.pop(0)
        update(policy, trajs, cfg, opt, upd_rng)
        if stop_delta is not None:
            terminal_rewards.append(traj.terminal_reward)
            n = len(terminal_rewards)
            if n >= 2 * stop_window and n % stop_window == 0:
                prev = np.mean(terminal_rewards[n - 2 * stop_window : n - stop_window])
                last = np.mean(terminal_rewards[n - stop_window :])
                if abs(last - prev) < stop_delta:
                    converged = True
                    break

    asr = float(np.mean([t.evaded for t in window])) if window else 0.0
    mean_score = float(np.mean([t.final_source_score for t in window])) if window else 0.0
    mean_len = float(np.mean([len(t.steps) for t in window])) if window else 0.0
    stats = AttackStats(
        asr=asr,
        mean_score=mean_score,
        mean_len=mean_len,
        episodes=episodes,
        env_steps=env_steps,
        evaded=evaded,
        converged=converged,
    )
    return policy, stats
