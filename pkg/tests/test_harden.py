import csv
import json
import math

import numpy as np
import pytest

from repharden.agent import AgentConfig
from repharden.corpus import DatasetSplit, binary_spec, generate_corpus, split
from repharden.errors import CollapseError, ConfigError, SplitError
from repharden.harden import (
    CertificationResult,
    HardenConfig,
    certify,
    check_split_hygiene,
    evaluate,
    gb_harden,
    harden,
    p_estimate,
    wilson_interval,
)
from repharden.model import Classifier, train
from repharden.reports import Report

AGENT_KW = dict(
    steps_per_episode=25,
    steps_per_iteration=400,
    budget=25,
    batch_size_rl=16,
    eval_episodes=60,
)


@pytest.fixture(scope="module")
def world():
    spec = binary_spec(size=240, entry_scale=0.05, seed=5)
    corpus = generate_corpus(spec)
    ds = split(corpus, (0.6, 0.2, 0.2), seed=0)
    model = Classifier(["benign", "malware"], hash_dim=512, seed=1)
    train(model, ds.select(corpus, "train"), epochs=8, lr=3e-3, batch_size=16, seed=2)
    return corpus, ds, model


def fresh_model(world):
    corpus, ds, model = world
    clone = Classifier(model.classes, hash_dim=model.hash_dim, seed=99)
    clone.params = {k: v.copy() for k, v in model.params.items()}
    return clone


class TestHardenConfig:
    def test_zero_iterations_rejected(self):
        with pytest.raises(ConfigError):
            HardenConfig(iterations=0)

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.2, 1.3])
    def test_mix_ratio_bounds(self, ratio):
        with pytest.raises(ConfigError):
            HardenConfig(mix_ratio=ratio)

    def test_floor_bounds(self):
        with pytest.raises(ConfigError):
            HardenConfig(collapse_floor=1.0)


class TestEvaluate:
    def test_memorization(self, world):
        corpus, ds, model = world
        train_set = ds.select(corpus, "train")
        res = evaluate(model, train_set)
        assert res.accuracy >= 0.99
        assert res.confusion.sum() == res.n == len(train_set)
        assert np.trace(res.confusion) == round(res.accuracy * res.n)

    def test_chance_level_on_unlearnable_labels(self):
        rng = np.random.default_rng(0)
        reports = []
        for i in range(1000):  # features carry no label information
            r = Report.empty(label=("a" if i % 2 == 0 else "b"), sample_id=f"s{i}")
            r.categories["mutexes"] = ["m" + str(rng.integers(50))]
            r.categories["files"] = ["C:\\x\\" + str(rng.integers(50)) + ".dll"]
            reports.append(r)
        model = Classifier(["a", "b"], hash_dim=128, seed=3)
        res = evaluate(model, reports)
        assert abs(res.accuracy - 0.5) <= 0.05

    def test_confusion_rows_are_class_counts(self, world):
        corpus, ds, model = world
        val = ds.select(corpus, "val")
        res = evaluate(model, val)
        for c, label in enumerate(model.classes):
            assert res.confusion[c].sum() == sum(r.label == label for r in val)

    def test_empty_rejected(self, world):
        _, _, model = world
        with pytest.raises(ConfigError):
            evaluate(model, [])


class TestPEstimate:
    def test_spec_sequence(self):
        assert p_estimate([1.0, 0.0, 0.0, 1.0]) == 0.5

    def test_all_resist(self):
        assert p_estimate([0.0] * 7) == 1.0

    def test_exact_complement(self):
        rewards = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0]
        assert p_estimate(rewards) == 1.0 - float(np.mean(rewards))


class TestWilson:
    def test_endpoints_satisfy_defining_equation(self):
        z = 1.959963984540054
        for k, n in [(95, 100), (1, 30), (150, 200), (7, 13)]:
            lo, hi = wilson_interval(k, n)
            phat = k / n
            for p in (lo, hi):
                assert 0.0 < p < 1.0
                assert abs(abs(phat - p) - z * math.sqrt(p * (1 - p) / n)) < 1e-9

    def test_degenerate_counts(self):
        lo, hi = wilson_interval(60, 60)
        assert hi == 1.0 and lo > 0.9
        lo, hi = wilson_interval(0, 60)
        assert lo == 0.0 and hi < 0.1

    def test_contains_point_estimate(self):
        for k, n in [(3, 10), (50, 75), (20, 400)]:
            lo, hi = wilson_interval(k, n)
            assert lo <= k / n <= hi


class TestSplitHygiene:
    def test_clean_split_passes(self):
        ds = DatasetSplit(train=["a", "b"], val=["c"], test=["d"], ratios=(0.5, 0.25, 0.25))
        check_split_hygiene(ds)

    def test_overlap_rejected(self):
        ds = DatasetSplit(train=["a", "b"], val=["b"], test=["c"], ratios=(0.5, 0.25, 0.25))
        with pytest.raises(SplitError):
            check_split_hygiene(ds)


class TestCertify:
    def test_unevadable_model(self, world):
        corpus, ds, _ = world
        model = Classifier(["benign", "malware"], hash_dim=512, seed=0)
        model.params["W3"][:] = 0.0
        model.params["b3"][:] = 0.0
        model.params["b3"][model.class_index("malware")] = 5.0
        holdout = [r for r in ds.select(corpus, "test") if r.label == "malware"]
        cfg = AgentConfig(steps_per_episode=3, steps_per_iteration=2000, budget=3, eval_episodes=50)
        cert = certify(model, holdout, cfg, seed=0)
        assert cert.p_hat == 1.0
        assert cert.asr == 0.0
        assert cert.ci_high == 1.0
        assert cert.beat_random is False
        assert cert.converged is True  # constant reward stream trips the window rule

    def test_vanilla_model_identity_and_ranges(self, world):
        corpus, ds, model = world
        cert = certify(fresh_model(world), ds.select(corpus, "test"), AgentConfig(**AGENT_KW), seed=1)
        assert isinstance(cert, CertificationResult)
        assert cert.p_hat == 1.0 - cert.asr  # binary rewards make this exact
        assert 0.0 <= cert.ci_low <= cert.ci_high <= 1.0
        assert cert.ci_low <= cert.p_hat <= cert.ci_high
        assert cert.episodes == 60

    def test_deterministic(self, world):
        corpus, ds, _ = world
        holdout = ds.select(corpus, "test")

        def run():
            c = certify(fresh_model(world), holdout, AgentConfig(**AGENT_KW), seed=7)
            return (c.p_hat, c.asr, c.ci_low, c.ci_high, c.random_asr, c.attacker_steps)

        assert run() == run()


class TestHarden:
    def cfg(self, **kw):
        base = dict(
            iterations=2,
            budget=25,
            retrain_lr=1e-3,
            retrain_batch_size=32,
            agent=AgentConfig(**AGENT_KW),
            seed=3,
        )
        base.update(kw)
        return HardenConfig(**base)

    def test_loop_and_artifacts(self, world, tmp_path):
        corpus, ds, _ = world
        model = fresh_model(world)
        out = tmp_path / "run"
        out.mkdir()
        hardened, report = harden(model, corpus, ds, self.cfg(), out_dir=str(out))
        assert hardened is model
        assert len(report.iterations) == 2
        for m in report.iterations:
            for v in (m.score, m.asr, m.clean_acc, m.robust_acc):
                assert 0.0 <= v <= 1.0
        assert report.p_robustness == 1.0 - report.holdout_asr
        assert report.certification.asr == report.holdout_asr
        assert 0.0 <= report.certification.random_asr <= 1.0
        assert report.config["iterations"] == 2
        with open(out / "metrics.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "score", "asr", "clean_acc", "robust_acc"]
        assert len(rows) == 3
        doc = json.loads((out / "robustness.json").read_text())
        assert doc["p_robustness"] == report.p_robustness
        # the certification block records whether the estimate is trustworthy
        assert doc["certification"]["random_asr"] == report.certification.random_asr
        assert isinstance(doc["certification"]["beat_random"], bool)
        assert (out / "checkpoint_00.npz").exists() and (out / "checkpoint_01.npz").exists()

    def test_metrics_csv_bit_identical(self, world, tmp_path):
        corpus, ds, _ = world
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            out.mkdir()
            harden(fresh_model(world), corpus, ds, self.cfg(iterations=1), out_dir=str(out))
            blobs.append((out / "metrics.csv").read_bytes())
        assert blobs[0] == blobs[1]

    def test_overlapping_split_rejected(self, world):
        corpus, ds, _ = world
        bad = DatasetSplit(train=ds.train, val=ds.train[:5], test=ds.test, ratios=ds.ratios)
        with pytest.raises(SplitError):
            harden(fresh_model(world), corpus, bad, self.cfg())

    def test_collapse_aborts_with_history(self, world):
        corpus, ds, _ = world
        with pytest.raises(CollapseError) as exc:
            harden(fresh_model(world), corpus, ds, self.cfg(retrain_lr=0.5, collapse_floor=0.9))
        assert len(exc.value.history) >= 1


class TestGbHarden:
    def test_epsilon_zero_matches_plain_training(self, world):
        corpus, ds, _ = world
        train_set = ds.select(corpus, "train")
        m1 = Classifier(["benign", "malware"], hash_dim=256, seed=4)
        m2 = Classifier(["benign", "malware"], hash_dim=256, seed=4)
        _, gb_metrics = gb_harden(m1, train_set, epsilon=0.0, iterations=3, lr=2e-3, batch_size=16, seed=9)
        plain_metrics = train(m2, train_set, epochs=3, lr=2e-3, batch_size=16, seed=9)
        for a, b in zip(gb_metrics, plain_metrics):
            assert abs(a["loss"] - b["loss"]) < 1e-6

    def test_adversarial_training_keeps_clean_accuracy(self, world):
        corpus, ds, model = world
        vanilla_acc = evaluate(model, ds.select(corpus, "val")).accuracy
        m = Classifier(["benign", "malware"], hash_dim=512, seed=4)
        gb_harden(m, ds.select(corpus, "train"), epsilon=0.02, steps=3, iterations=8, lr=3e-3, batch_size=16, seed=9)
        gb_acc = evaluate(m, ds.select(corpus, "val")).accuracy
        assert gb_acc >= vanilla_acc - 0.01

    def test_negative_epsilon_rejected(self, world):
        corpus, ds, _ = world
        with pytest.raises(ConfigError):
            gb_harden(fresh_model(world), ds.select(corpus, "train"), epsilon=-0.1)
