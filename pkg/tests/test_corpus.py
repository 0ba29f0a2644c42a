from collections import Counter

import numpy as np
import pytest

from repharden.corpus import (
    ClassProfile,
    CorpusSpec,
    DatasetSplit,
    binary_spec,
    generate_corpus,
    load_jsonl,
    multiclass_spec,
    save_jsonl,
    split,
)
from repharden.errors import IoError, ParseError, SpecError, SplitError
from repharden.explain import restrict_report
from repharden.model import Classifier, train
from repharden.reports import Report, serialize_report, validate_report


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(binary_spec(size=400, entry_scale=0.05, seed=7))


class TestSpecValidation:
    def test_presets_valid(self):
        binary_spec().validate()
        multiclass_spec().validate()

    def test_non_positive_weight(self):
        spec = binary_spec()
        spec.classes[0] = ("benign", 0.0)
        with pytest.raises(SpecError):
            spec.validate()

    def test_duplicate_class(self):
        spec = binary_spec()
        spec.classes = [("malware", 0.5), ("malware", 0.5)]
        with pytest.raises(SpecError):
            spec.validate()

    def test_missing_profile(self):
        spec = binary_spec()
        del spec.profiles["malware"]
        with pytest.raises(SpecError):
            spec.validate()

    def test_missing_category_range(self):
        spec = binary_spec()
        del spec.profiles["benign"].entry_ranges["mutexes"]
        with pytest.raises(SpecError):
            spec.validate()

    def test_overlapping_spurious_pools(self):
        spec = binary_spec()
        spec.profiles["benign"].spurious_mutexes = list(spec.profiles["malware"].spurious_mutexes)
        with pytest.raises(SpecError):
            spec.validate()

    def test_bad_scale_and_size(self):
        with pytest.raises(SpecError):
            generate_corpus(binary_spec(size=10, entry_scale=0.0))
        spec = binary_spec()
        spec.size = -1
        with pytest.raises(SpecError):
            spec.validate()


class TestGenerate:
    def test_size_zero(self):
        assert generate_corpus(binary_spec(size=0)) == []

    def test_class_proportions_default_spec(self):
        corpus = generate_corpus(binary_spec(size=2000))
        counts = Counter(r.label for r in corpus)
        n, p = 2000, 1 / 3
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(counts["benign"] - n * p) < 3 * sigma
        assert counts["benign"] + counts["malware"] == n

    def test_all_reports_valid(self, small_corpus):
        for r in small_corpus:
            assert validate_report(r) == []

    def test_unique_sample_ids(self, small_corpus):
        ids = [r.sample_id for r in small_corpus]
        assert len(set(ids)) == len(ids)

    def test_deterministic(self):
        spec = binary_spec(size=50, entry_scale=0.05, seed=123)
        a = [serialize_report(r) for r in generate_corpus(spec)]
        b = [serialize_report(r) for r in generate_corpus(binary_spec(size=50, entry_scale=0.05, seed=123))]
        assert a == b
        c = [serialize_report(r) for r in generate_corpus(binary_spec(size=50, entry_scale=0.05, seed=124))]
        assert a != c

    def test_spurious_markers_planted(self, small_corpus):
        spec = binary_spec()
        for r in small_corpus:
            prof = spec.profiles[r.label]
            assert any(m in prof.spurious_mutexes for m in r.categories["mutexes"])
            assert any(f in prof.spurious_files for f in r.categories["files"])

    def test_core_apis_planted(self, small_corpus):
        spec = binary_spec()
        for r in small_corpus:
            hits = set(r.categories["resolved_apis"]) & set(spec.profiles[r.label].core_apis)
            assert len(hits) >= 1

    def test_commands_echo_file_paths(self, small_corpus):
        for r in small_corpus:
            files = set(r.categories["files"])
            assert any(any(p in cmd for p in files) for cmd in r.categories["executed_commands"])

    def test_mean_entry_count_tracks_scale(self):
        corpus = generate_corpus(binary_spec(size=60, entry_scale=0.1, seed=1))
        mean = np.mean([sum(len(v) for v in r.categories.values()) for r in corpus])
        assert 70 <= mean <= 160  # ~10% of the ~1K full-scale target


def labeled_dummies(counts: dict[str, int]) -> list[Report]:
    out = []
    i = 0
    for label, n in counts.items():
        for _ in range(n):
            out.append(Report.empty(label=label, sample_id=f"s{i:05d}"))
            i += 1
    return out


class TestSplit:
    def test_sizes_on_2000(self):
        corpus = labeled_dummies({"benign": 660, "malware": 1340})
        ds = split(corpus, (0.7, 0.15, 0.15), seed=0)
        assert (len(ds.train), len(ds.val), len(ds.test)) == (1400, 300, 300)

    def test_partition(self):
        corpus = labeled_dummies({"a": 101, "b": 57})
        ds = split(corpus, (0.6, 0.2, 0.2), seed=1)
        parts = [set(ds.train), set(ds.val), set(ds.test)]
        assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])
        assert parts[0] | parts[1] | parts[2] == {r.sample_id for r in corpus}

    def test_stratification_within_2pct(self):
        corpus = labeled_dummies({"benign": 660, "malware": 1340})
        label_of = {r.sample_id: r.label for r in corpus}
        ds = split(corpus, (0.7, 0.15, 0.15), seed=2)
        overall = 660 / 2000
        for ids in (ds.train, ds.val, ds.test):
            frac = sum(label_of[s] == "benign" for s in ids) / len(ids)
            assert abs(frac - overall) <= 0.02

    def test_deterministic(self):
        corpus = labeled_dummies({"a": 40, "b": 60})
        d1 = split(corpus, seed=5)
        d2 = split(corpus, seed=5)
        assert (d1.train, d1.val, d1.test) == (d2.train, d2.val, d2.test)
        d3 = split(corpus, seed=6)
        assert d1.train != d3.train

    def test_empty_split_rejected(self):
        corpus = labeled_dummies({"a": 4})
        with pytest.raises(SplitError):
            split(corpus, (0.9, 0.05, 0.05), seed=0)

    def test_bad_ratios_rejected(self):
        corpus = labeled_dummies({"a": 10})
        with pytest.raises(SplitError):
            split(corpus, (0.5, 0.2, 0.2), seed=0)

    def test_select(self, small_corpus):
        ds = split(small_corpus, seed=0)
        train = ds.select(small_corpus, "train")
        assert len(train) == len(ds.train)
        assert all(r.sample_id in set(ds.train) for r in train)


class TestPersistence:
    def test_round_trip_identity(self, small_corpus, tmp_path):
        path = str(tmp_path / "corpus.jsonl")
        save_jsonl(small_corpus[:100], path)
        loaded = load_jsonl(path)
        assert [serialize_report(r) for r in loaded] == [serialize_report(r) for r in small_corpus[:100]]

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_jsonl(str(path)) == []

    def test_truncated_last_line(self, small_corpus, tmp_path):
        path = tmp_path / "bad.jsonl"
        lines = [serialize_report(r) for r in small_corpus[:100]]
        lines[-1] = lines[-1][: len(lines[-1]) // 2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as exc:
            load_jsonl(str(path))
        assert exc.value.line == 100

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_jsonl(str(tmp_path / "nope.jsonl"))

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(IoError):
            save_jsonl([], str(tmp_path / "no" / "dir" / "x.jsonl"))


@pytest.fixture(scope="module")
def trained():
    spec = binary_spec(size=400, entry_scale=0.05, seed=11)
    corpus = generate_corpus(spec)
    ds = split(corpus, (0.7, 0.15, 0.15), seed=0)
    model = Classifier(["benign", "malware"], hash_dim=1024, seed=1)
    train(model, ds.select(corpus, "train"), epochs=10, lr=3e-3, batch_size=16, seed=2)
    return spec, corpus, ds, model


class TestModelPremises:
    """The generator exists to make these two facts true."""

    def test_separable_within_10_epochs(self, trained):
        spec, corpus, ds, model = trained
        val = ds.select(corpus, "val")
        acc = np.mean([model.predict(r).argmax == model.class_index(r.label) for r in val])
        assert acc >= 0.95

    def test_spurious_tokens_carry_signal(self, trained):
        spec, corpus, ds, model = trained
        spurious = spec.spurious_entries()
        drops = []
        for r in ds.select(corpus, "test")[:40]:
            keep = {
                (cat, i)
                for cat, entries in r.categories.items()
                for i, e in enumerate(entries)
                if e not in spurious
            }
            masked = restrict_report(r, keep)
            src = model.class_index(r.label)
            drops.append(model.predict(r).probs[src] - model.predict(masked).probs[src])
        assert float(np.mean(drops)) > 0.1
