"""Outer min-max loop: attack, collect evasions, retrain, certify.

Each iteration cold-starts a fresh attacker against the current model, appends
every evaded final report (under its source label) to a cumulative adversarial
pool, and retrains for one epoch on clean data mixed with samples drawn from
that pool. Certification afterwards trains one more fresh attacker, in binary
terminal-reward mode, on a hold-out split neither the model nor any previous
agent has touched.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .agent import AgentConfig, build_attack_env, train_attacker
from .corpus import DatasetSplit
from .env import RandomPolicy, RewardConfig, rollout
from .errors import CollapseError, ConfigError, SplitError
from .model import Classifier, PgdConfig, run_epochs, save_checkpoint, train
from .reports import Report

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "score", "asr", "clean_acc", "robust_acc")


@dataclass
class HardenConfig:
    iterations: int = 15
    budget: int = 1000  # studied operating points are 1000 and 2000
    mix_ratio: float = 0.5
    retrain_epochs_per_iteration: int = 1
    retrain_lr: float = 1e-3
    retrain_batch_size: int = 128
    collapse_floor: float = 0.5
    agent: AgentConfig = field(default_factory=AgentConfig)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not 0.0 < self.mix_ratio < 1.0:
            raise ConfigError("mix_ratio must lie strictly between 0 and 1")
        if self.budget <= 0 or self.retrain_epochs_per_iteration < 1:
            raise ConfigError("budget and retrain epochs must be positive")
        if not 0.0 <= self.collapse_floor < 1.0:
            raise ConfigError("collapse_floor must lie in [0, 1)")


@dataclass
class IterationMetrics:
    iteration: int
    score: float  # mean source-class probability at episode end
    asr: float
    clean_acc: float
    robust_acc: float  # post-retrain accuracy on this iteration's evasions


@dataclass
class CertificationResult:
    p_hat: float
    asr: float
    ci_low: float
    ci_high: float
    episodes: int
    attacker_episodes: int
    attacker_steps: int
    converged: bool
    random_asr: float
    beat_random: bool


@dataclass
class RobustnessReport:
    iterations: list[IterationMetrics]
    holdout_asr: float
    p_robustness: float
    ci_low: float
    ci_high: float
    certification: CertificationResult
    config: dict


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray  # rows: true class, cols: predicted
    n: int


def evaluate(classifier: Classifier, reports: list[Report]) -> Evaluation:
    if not reports:
        raise ConfigError("evaluate needs a non-empty report set")
    probs = classifier.predict_batch_pools(classifier.pool_batch(reports))
    pred = np.argmax(probs, axis=1)
    true = classifier.labels_to_indices(reports)
    C = len(classifier.classes)
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    return Evaluation(accuracy=float(np.mean(pred == true)), confusion=confusion, n=len(reports))


def p_estimate(terminal_rewards) -> float:
    """Robustness point estimate from binary terminal rewards."""
    return 1.0 - float(np.mean(terminal_rewards))


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    phat = successes / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    margin = (z / denom) * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n))
    # the bound is exactly 0/1 at the degenerate counts; don't let rounding blur it
    lo = 0.0 if successes == 0 else max(0.0, center - margin)
    hi = 1.0 if successes == n else min(1.0, center + margin)
    return lo, hi


def check_split_hygiene(ds: DatasetSplit) -> None:
    a, b, c = set(ds.train), set(ds.val), set(ds.test)
    if a & b or a & c or b & c:
        raise SplitError("train/val/test share sample_ids")


def _mixed_retrain(
    classifier: Classifier,
    clean_pools: np.ndarray,
    clean_labels: np.ndarray,
    adv_pool: list[Report],
    cfg: HardenConfig,
    rng: np.random.Generator,
    seed: int,
) -> None:
    X, y = clean_pools, clean_labels
    if adv_pool:
        n_clean = len(clean_labels)
        n_adv = max(1, round(n_clean * cfg.mix_ratio / (1.0 - cfg.mix_ratio)))
        picks = rng.choice(len(adv_pool), size=n_adv, replace=True)
        adv = [adv_pool[i] for i in picks]
        X = np.concatenate([clean_pools, classifier.pool_batch(adv)])
        y = np.concatenate([clean_labels, classifier.labels_to_indices(adv)])
    run_epochs(
        classifier,
        X,
        y,
        epochs=cfg.retrain_epochs_per_iteration,
        lr=cfg.retrain_lr,
        batch_size=cfg.retrain_batch_size,
        seed=seed,
    )


def certify(
    classifier: Classifier,
    holdout: list[Report],
    agent_cfg: AgentConfig,
    budget: int | None = None,
    seed: int | np.random.SeedSequence = 0,
) -> CertificationResult:
    """Train a fresh attacker in 0/1 terminal-reward mode and estimate p.

    p_hat = 1 - mean terminal reward over a final evaluation round, with a
    Wilson 95% interval on the resist probability. If the trained attacker is
    no better than a random policy, p_hat only upper-bounds robustness under
    this attacker, and the result is flagged.
    """
    cfg = dataclasses.replace(agent_cfg, budget=budget if budget is not None else agent_cfg.budget)
    reward_cfg = RewardConfig.for_certification()
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    train_ss, eval_ss, rand_ss = ss.spawn(3)

    policy, stats = train_attacker(
        classifier, holdout, cfg, seed=train_ss, reward_cfg=reward_cfg, stop_delta=0.01, stop_window=200
    )
    env, candidates = build_attack_env(classifier, holdout, cfg, reward_cfg)
    final = rollout(env, policy, candidates, episodes=cfg.eval_episodes, seed=eval_ss, explore=True)
    rewards = [t.terminal_reward for t in final]
    p_hat = p_estimate(rewards)
    evasions = int(round(sum(rewards)))
    ci_low, ci_high = wilson_interval(len(final) - evasions, len(final))

    baseline = rollout(env, RandomPolicy(), candidates, episodes=cfg.eval_episodes, seed=rand_ss, explore=True)
    random_asr = float(np.mean([t.evaded for t in baseline]))
    asr = evasions / len(final)
    beat_random = asr > random_asr
    if not beat_random:
        logger.warning(
            "certification attacker (ASR %.3f) did not beat the random baseline (ASR %.3f); "
            "p_hat is an upper bound on robustness only under this attacker",
            asr,
            random_asr,
        )
    return CertificationResult(
        p_hat=p_hat,
        asr=asr,
        ci_low=ci_low,
        ci_high=ci_high,
        episodes=len(final),
        attacker_episodes=stats.episodes,
        attacker_steps=stats.env_steps,
        converged=stats.converged,
        random_asr=random_asr,
        beat_random=beat_random,
    )


def harden(
    classifier: Classifier,
    corpus: list[Report],
    ds: DatasetSplit,
    cfg: HardenConfig,
    out_dir: str | None = None,
) -> tuple[Classifier, RobustnessReport]:
    """Iterated adversarial retraining followed by hold-out certification."""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    check_split_hygiene(ds)
    train_reports = ds.select(corpus, "train")
    val_reports = ds.select(corpus, "val")
    test_reports = ds.select(corpus, "test")
    if not train_reports or not val_reports or not test_reports:
        raise SplitError("every split must be non-empty for hardening")

    agent_cfg = dataclasses.replace(cfg.agent, budget=cfg.budget)
    clean_pools = classifier.pool_batch(train_reports)
    clean_labels = classifier.labels_to_indices(train_reports)

    master = np.random.SeedSequence(cfg.seed)
    iter_seeds = master.spawn(cfg.iterations + 1)
    mix_rng = np.random.default_rng(master.spawn(1)[0])

    adv_pool: list[Report] = []
    history: list[IterationMetrics] = []
    for it in range(cfg.iterations):
        policy, stats = train_attacker(classifier, train_reports, agent_cfg, seed=iter_seeds[it])
        adv_pool.extend(stats.evaded)
        _mixed_retrain(classifier, clean_pools, clean_labels, adv_pool, cfg, mix_rng, seed=cfg.seed + it)

        clean_acc = evaluate(classifier, val_reports).accuracy
        if stats.evaded:
            robust_acc = evaluate(classifier, stats.evaded).accuracy
        else:
            robust_acc = 1.0
        m = IterationMetrics(
            iteration=it, score=stats.mean_score, asr=stats.asr, clean_acc=clean_acc, robust_acc=robust_acc
        )
        history.append(m)
        logger.info(
            "iteration %d: asr=%.3f score=%.3f clean_acc=%.3f robust_acc=%.3f adv_pool=%d",
            it, stats.asr, stats.mean_score, clean_acc, robust_acc, len(adv_pool),
        )
        if out_dir:
            save_checkpoint(classifier, os.path.join(out_dir, f"checkpoint_{it:02d}.npz"))
        if clean_acc < cfg.collapse_floor:
            raise CollapseError(
                f"clean accuracy {clean_acc:.3f} fell below the floor {cfg.collapse_floor}", history=history
            )

    cert = certify(classifier, test_reports, agent_cfg, budget=cfg.budget, seed=iter_seeds[cfg.iterations])
    report = RobustnessReport(
        iterations=history,
        holdout_asr=cert.asr,
        p_robustness=cert.p_hat,
        ci_low=cert.ci_low,
        ci_high=cert.ci_high,
        certification=cert,
        config=dataclasses.asdict(cfg),
    )
    if out_dir:
        write_metrics_csv(history, os.path.join(out_dir, "metrics.csv"))
        write_robustness_json(report, os.path.join(out_dir, "robustness.json"))
    return classifier, report


def gb_harden(
    classifier: Classifier,
    reports: list[Report],
    epsilon: float,
    steps: int = 5,
    iterations: int = 15,
    epochs_per_iteration: int = 1,
    lr: float = 1e-3,
    batch_size: int = 128,
    seed: int = 0,
) -> tuple[Classifier, list[dict]]:
    """Gradient-based baseline: PGD on pooled category vectors, matched to the
    same epoch budget as the RL hardening loop."""
    if epsilon < 0:
        raise ConfigError("epsilon must be non-negative")
    pgd = PgdConfig(epsilon=epsilon, steps=steps)
    metrics = train(
        classifier,
        reports,
        epochs=iterations * epochs_per_iteration,
        lr=lr,
        batch_size=batch_size,
        seed=seed,
        pgd=pgd,
    )
    return classifier, metrics


def write_metrics_csv(history: list[IterationMetrics], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for m in history:
            writer.writerow([m.iteration, repr(m.score), repr(m.asr), repr(m.clean_acc), repr(m.robust_acc)])


def write_robustness_json(report: RobustnessReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
