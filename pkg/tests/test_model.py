import numpy as np
import pytest

from repharden.encoding import EntryEncoder, encode_entry, pool_category, pool_report
from repharden.errors import CheckpointError, ConfigError, NumericalError, TrainingDiverged
from repharden.model import (
    Adam,
    Classifier,
    PgdConfig,
    embed_batch_perturb,
    load_checkpoint,
    pgd_perturb_batch,
    run_epochs,
    save_checkpoint,
    train,
)
from repharden.reports import CATEGORIES, Report


def make_report(label="malware", **cats) -> Report:
    r = Report.empty(label=label, sample_id="m")
    for cat, entries in cats.items():
        r.categories[cat] = list(entries)
    return r


def toy_corpus(n_per_class=40, seed=0):
    """Linearly separable: class determined by a single mutex token."""
    rng = np.random.default_rng(seed)
    reports = []
    for label, token in [("benign", "tok_clean"), ("malware", "tok_dirty")]:
        for i in range(n_per_class):
            noise = [f"shared_{rng.integers(5)}" for _ in range(3)]
            reports.append(make_report(label=label, mutexes=[token] + noise, files=[f"C:\\x\\f{i % 7}.exe"]))
    return reports


class TestEncoding:
    def test_trigram_buckets(self):
        import zlib

        v = encode_entry("abc", hash_dim=64)
        expected_buckets = set()
        for tri in ("^ab", "abc", "bc$"):
            expected_buckets.add(zlib.crc32(tri.encode()) % 64)
        assert set(np.nonzero(v)[0]) == expected_buckets

    def test_unit_norm(self):
        for s in ["a", "evil.exe", "C:\\Windows\\System32\\svchost.exe", "日本語テキスト"]:
            assert np.linalg.norm(encode_entry(s)) == pytest.approx(1.0, abs=1e-12)

    def test_deterministic(self):
        assert np.array_equal(encode_entry("evil.exe"), encode_entry("evil.exe"))

    def test_pool_empty_is_zero(self):
        enc = EntryEncoder(128)
        assert not pool_category([], enc).any()

    def test_pool_permutation_bitwise(self):
        enc = EntryEncoder()
        entries = ["b.exe", "a.dll", "c.sys", "a.dll", "zz"]
        p1 = pool_category(entries, enc)
        p2 = pool_category(entries[::-1], enc)
        assert np.array_equal(p1, p2)

    def test_pool_duplicate_mean_identity(self):
        enc = EntryEncoder()
        single = pool_category(["evil.exe"], enc)
        double = pool_category(["evil.exe", "evil.exe"], enc)
        assert np.array_equal(single, double)

    def test_pool_report_shape(self):
        r = make_report(files=["C:\\a.exe"], mutexes=["m"])
        pools = pool_report(r, EntryEncoder(256))
        assert pools.shape == (13, 256)
        assert pools[CATEGORIES.index("files")].any()
        assert not pools[CATEGORIES.index("keys")].any()


class TestClassifier:
    def test_needs_two_classes(self):
        with pytest.raises(ConfigError):
            Classifier(["only"])

    def test_probs_sum_to_one(self):
        model = Classifier(["benign", "malware"], hash_dim=128, seed=1)
        for r in toy_corpus(3):
            pred = model.predict(r)
            assert pred.probs.sum() == pytest.approx(1.0, abs=1e-6)
            assert pred.embedding.shape == (32,)
            assert np.allclose(pred.probs, np.exp(pred.logits) / np.exp(pred.logits).sum())

    def test_zero_trunk_uniform(self):
        model = Classifier(["a", "b", "c"], hash_dim=64, seed=0)
        for k in ("W1", "b1", "W2", "b2", "W3", "b3"):
            model.params[k][:] = 0.0
        pred = model.predict(make_report(label="a", files=["C:\\z.exe"]))
        assert np.allclose(pred.probs, 1 / 3)

    def test_permutation_invariance_bitwise(self):
        model = Classifier(["benign", "malware"], hash_dim=256, seed=3)
        r1 = make_report(mutexes=["a", "b", "c"], files=["C:\\1", "C:\\2"])
        r2 = make_report(mutexes=["c", "a", "b"], files=["C:\\2", "C:\\1"])
        assert np.array_equal(model.predict(r1).probs, model.predict(r2).probs)

    def test_nan_weights_raise(self):
        model = Classifier(["benign", "malware"], hash_dim=64, seed=0)
        model.params["W3"][0, 0] = np.nan
        with pytest.raises(NumericalError):
            model.predict(make_report(files=["C:\\a"]))

    def test_batch_matches_single_argmax(self):
        model = Classifier(["benign", "malware"], hash_dim=128, seed=2)
        reports = toy_corpus(5)
        batch = model.predict_batch(reports)
        for row, r in zip(batch, reports):
            assert np.argmax(row) == model.predict(r).argmax


class TestTraining:
    def test_separable_toy_corpus(self):
        reports = toy_corpus(40)
        model = Classifier(["benign", "malware"], hash_dim=256, seed=0)
        metrics = train(model, reports, epochs=5, lr=3e-3, batch_size=8, seed=1)
        assert metrics[-1]["accuracy"] >= 0.99

    def test_lr_zero_is_noop(self):
        reports = toy_corpus(10)
        model = Classifier(["benign", "malware"], hash_dim=128, seed=5)
        before = {k: v.copy() for k, v in model.params.items()}
        metrics = train(model, reports, epochs=2, lr=0.0, batch_size=8, seed=0)
        for k in before:
            assert np.array_equal(model.params[k], before[k])
        assert metrics[0]["loss"] == pytest.approx(metrics[1]["loss"], abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            train(Classifier(["a", "b"], hash_dim=64), [make_report(label="a")], 1, 1e-3)

    def test_deterministic_given_seed(self):
        reports = toy_corpus(10)

        def fit():
            m = Classifier(["benign", "malware"], hash_dim=128, seed=7)
            train(m, reports, epochs=2, lr=1e-3, batch_size=8, seed=3)
            return m.params

        p1, p2 = fit(), fit()
        assert all(np.array_equal(p1[k], p2[k]) for k in p1)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self):
        reports = toy_corpus(10)
        model = Classifier(["benign", "malware"], hash_dim=64, seed=0)
        model.params["W3"][:] = np.inf
        with pytest.raises((TrainingDiverged, NumericalError)):
            train(model, reports, epochs=1, lr=1e-3, batch_size=8)


class TestGradients:
    def test_classifier_gradcheck(self):
        # analytic vs central finite differences on a 3-sample batch
        rng = np.random.default_rng(42)
        model = Classifier(["a", "b", "c"], hash_dim=32, d_cat=4, hidden_dim=8, seed=9)
        X = rng.normal(0.0, 0.3, size=(3, 13, 32))
        y = np.array([0, 2, 1])
        _, grads, _ = model.loss_and_grads(X, y)
        h = 1e-6
        worst = 0.0
        for name, tensor in model.params.items():
            flat = tensor.reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in rng.choice(flat.size, size=min(12, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                lp, _, _ = model.loss_and_grads(X, y, want_params=False)
                flat[i] = orig - h
                lm, _, _ = model.loss_and_grads(X, y, want_params=False)
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                denom = max(abs(fd), abs(gflat[i]), 1e-8)
                worst = max(worst, abs(fd - gflat[i]) / denom)
        assert worst < 1e-4

    def test_input_gradcheck(self):
        rng = np.random.default_rng(1)
        model = Classifier(["a", "b"], hash_dim=16, d_cat=4, hidden_dim=8, seed=2)
        X = rng.normal(0.0, 0.3, size=(2, 13, 16))
        y = np.array([0, 1])
        _, _, gx = model.loss_and_grads(X, y, want_params=False, want_x=True)
        h = 1e-6
        for _ in range(20):
            b, c, d = rng.integers(2), rng.integers(13), rng.integers(16)
            orig = X[b, c, d]
            X[b, c, d] = orig + h
            lp, _, _ = model.loss_and_grads(X, y, want_params=False)
            X[b, c, d] = orig - h
            lm, _, _ = model.loss_and_grads(X, y, want_params=False)
            X[b, c, d] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - gx[b, c, d]) / max(abs(fd), abs(gx[b, c, d]), 1e-8) < 1e-4


class TestPgd:
    def test_epsilon_zero_identity(self):
        model = Classifier(["benign", "malware"], hash_dim=64, seed=0)
        r = make_report(files=["C:\\a.exe"], mutexes=["m"])
        perturbed = embed_batch_perturb(r, model, epsilon=0.0, steps=5)
        assert np.array_equal(perturbed, model.pool(r))

    def test_linf_bound(self):
        rng = np.random.default_rng(0)
        model = Classifier(["a", "b"], hash_dim=32, seed=1)
        X = rng.normal(0, 0.3, size=(4, 13, 32))
        y = np.array([0, 1, 0, 1])
        delta = pgd_perturb_batch(model, X, y, epsilon=0.05, steps=7)
        assert np.max(np.abs(delta)) <= 0.05 + 1e-15

    def test_one_step_ascends(self):
        rng = np.random.default_rng(3)
        model = Classifier(["a", "b"], hash_dim=32, seed=4)
        failures = 0
        for i in range(100):
            X = rng.normal(0, 0.3, size=(1, 13, 32))
            y = np.array([i % 2])
            clean_loss, _, _ = model.loss_and_grads(X, y, want_params=False)
            delta = pgd_perturb_batch(model, X, y, epsilon=1e-4, steps=1)
            adv_loss, _, _ = model.loss_and_grads(X, y, delta=delta, want_params=False)
            if adv_loss < clean_loss:
                failures += 1
        assert failures == 0

    def test_pgd_epoch_with_eps_zero_matches_plain(self):
        reports = toy_corpus(10)
        m1 = Classifier(["benign", "malware"], hash_dim=128, seed=11)
        m2 = Classifier(["benign", "malware"], hash_dim=128, seed=11)
        t1 = train(m1, reports, epochs=2, lr=1e-3, batch_size=8, seed=5)
        t2 = train(m2, reports, epochs=2, lr=1e-3, batch_size=8, seed=5, pgd=PgdConfig(epsilon=0.0))
        assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)
        assert [m["loss"] for m in t1] == pytest.approx([m["loss"] for m in t2], abs=1e-6)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = Classifier(["benign", "malware"], hash_dim=128, seed=0)
        reports = toy_corpus(5)
        train(model, reports, epochs=1, lr=1e-3, batch_size=8)
        path = str(tmp_path / "model.npz")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.classes == model.classes
        assert loaded.hash_dim == model.hash_dim
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k])
        r = reports[0]
        assert np.array_equal(loaded.predict(r).probs, model.predict(r).probs)

    def test_class_count_mismatch(self, tmp_path):
        model = Classifier(["a", "b", "c"], hash_dim=64, seed=0)
        path = str(tmp_path / "m.npz")
        save_checkpoint(model, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expect_classes=["x", "y"])

    def test_unreadable(self, tmp_path):
        bad = tmp_path / "junk.npz"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(str(bad))


def test_adam_minimizes_quadratic():
    params = {"w": np.array([5.0, -3.0])}
    opt = Adam(params, lr=0.05)
    for _ in range(500):
        opt.step(params, {"w": 2 * params["w"]})
    assert np.abs(params["w"]).max() < 1e-2
