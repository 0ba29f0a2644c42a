"""Command-line drivers for the full experiment pipeline.

Workflow: `gen-corpus` materializes a dataset under --out, `train` fits the
vanilla model, and the remaining subcommands (attack / harden / certify /
gb-harden / eval / explain) read those artifacts from the same directory.
"""

from __future__ import annotations

import dataclasses
import json
import os

import click
import numpy as np

from . import config as cfgmod
from .agent import build_attack_env, train_attacker
from .corpus import DatasetSplit, generate_corpus, load_jsonl, save_jsonl, split
from .env import RewardConfig, rollout, save_trajectories
from .errors import RepHardenError
from .explain import explain as explain_report
from .harden import certify, evaluate, gb_harden, harden, write_metrics_csv
from .model import Classifier, load_checkpoint, save_checkpoint, train

CORPUS_FILE = "corpus.jsonl"
SPLIT_FILE = "split.json"
MODEL_FILE = "model.npz"
HARDENED_FILE = "model_hardened.npz"
GB_FILE = "model_gb.npz"


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="Flat YAML config file.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", type=click.Path(), default="out", show_default=True, help="Artifact directory.")
@click.pass_context
def main(ctx, config_path, seed, out):
    """Adversarial hardening workbench for sandbox-report classifiers."""
    try:
        cfg = cfgmod.load_config(config_path, overrides={"seed": seed})
    except RepHardenError as exc:
        raise click.ClickException(str(exc))
    os.makedirs(out, exist_ok=True)
    ctx.obj = {"cfg": cfg, "out": out}


def _path(ctx, name: str) -> str:
    return os.path.join(ctx.obj["out"], name)


def _write_json(ctx, name: str, payload) -> None:
    with open(_path(ctx, name), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_dataset(ctx) -> tuple[list, DatasetSplit]:
    corpus = load_jsonl(_path(ctx, CORPUS_FILE))
    with open(_path(ctx, SPLIT_FILE), encoding="utf-8") as fh:
        doc = json.load(fh)
    ds = DatasetSplit(train=doc["train"], val=doc["val"], test=doc["test"], ratios=tuple(doc["ratios"]))
    return corpus, ds


def _load_model(ctx, name: str) -> Classifier:
    path = _path(ctx, name)
    if not os.path.exists(path):
        raise click.ClickException(f"no model at {path}; run the training step first")
    return load_checkpoint(path)


def _wrap(fn):
    """Surface package errors as clean CLI failures."""

    def inner(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except RepHardenError as exc:
            raise click.ClickException(str(exc))

    inner.__name__ = fn.__name__
    inner.__doc__ = fn.__doc__
    return inner


@main.command("gen-corpus")
@click.pass_context
@_wrap
def gen_corpus(ctx):
    """Generate the synthetic corpus and a stratified train/val/test split."""
    cfg = ctx.obj["cfg"]
    corpus = generate_corpus(cfgmod.corpus_spec(cfg))
    ds = split(corpus, cfgmod.split_ratios(cfg), seed=cfg["seed"])
    save_jsonl(corpus, _path(ctx, CORPUS_FILE))
    _write_json(ctx, SPLIT_FILE, dataclasses.asdict(ds))
    click.echo(f"wrote {len(corpus)} reports to {_path(ctx, CORPUS_FILE)}")


@main.command("train")
@click.pass_context
@_wrap
def train_cmd(ctx):
    """Train the vanilla classifier on the train split."""
    cfg = ctx.obj["cfg"]
    params = cfgmod.classifier_params(cfg)
    corpus, ds = _load_dataset(ctx)
    classes = sorted({r.label for r in corpus})
    model = Classifier(classes, hash_dim=params.hash_dim, d_cat=params.d_cat,
                       hidden_dim=params.hidden_dim, seed=cfg["seed"])
    metrics = train(model, ds.select(corpus, "train"), epochs=params.epochs, lr=params.lr,
                    batch_size=params.batch_size, seed=cfg["seed"])
    val_acc = evaluate(model, ds.select(corpus, "val")).accuracy
    save_checkpoint(model, _path(ctx, MODEL_FILE))
    _write_json(ctx, "train_metrics.json", {"epochs": metrics, "val_accuracy": val_acc})
    click.echo(f"val accuracy {val_acc:.4f}; model saved to {_path(ctx, MODEL_FILE)}")


@main.command()
@click.option("--model-file", default=MODEL_FILE, show_default=True)
@click.pass_context
@_wrap
def attack(ctx, model_file):
    """Train an attacker against a fixed model and report its success rate."""
    cfg = ctx.obj["cfg"]
    corpus, ds = _load_dataset(ctx)
    model = _load_model(ctx, model_file)
    acfg = cfgmod.agent_config(cfg)
    train_reports = ds.select(corpus, "train")
    policy, stats = train_attacker(model, train_reports, acfg, seed=cfg["seed"])
    env, candidates = build_attack_env(model, train_reports, acfg, RewardConfig())
    trajs = rollout(env, policy, candidates, episodes=acfg.eval_episodes,
                    seed=np.random.SeedSequence(cfg["seed"] + 1), explore=True)
    save_trajectories(trajs, _path(ctx, "trajectories.jsonl"))
    save_jsonl(stats.evaded, _path(ctx, "evaded.jsonl"))
    _write_json(ctx, "attack.json", {
        "asr": stats.asr,
        "mean_score": stats.mean_score,
        "mean_episode_len": stats.mean_len,
        "episodes": stats.episodes,
        "env_steps": stats.env_steps,
        "eval_asr": float(np.mean([t.evaded for t in trajs])),
    })
    click.echo(f"attack ASR {stats.asr:.3f} over trailing window ({stats.episodes} episodes)")


@main.command("harden")
@click.pass_context
@_wrap
def harden_cmd(ctx):
    """Run the full adversarial-retraining loop and certify the result."""
    cfg = ctx.obj["cfg"]
    corpus, ds = _load_dataset(ctx)
    model = _load_model(ctx, MODEL_FILE)
    hcfg = cfgmod.harden_config(cfg)
    model, report = harden(model, corpus, ds, hcfg, out_dir=ctx.obj["out"])
    save_checkpoint(model, _path(ctx, HARDENED_FILE))
    click.echo(
        f"hardened model saved; holdout ASR {report.holdout_asr:.3f}, "
        f"p-robustness {report.p_robustness:.3f} "
        f"[{report.ci_low:.3f}, {report.ci_high:.3f}]"
    )


@main.command("certify")
@click.option("--model-file", default=HARDENED_FILE, show_default=True)
@click.pass_context
@_wrap
def certify_cmd(ctx, model_file):
    """Estimate p-robustness of a model on the hold-out test split."""
    cfg = ctx.obj["cfg"]
    corpus, ds = _load_dataset(ctx)
    model = _load_model(ctx, model_file)
    cert = certify(model, ds.select(corpus, "test"), cfgmod.agent_config(cfg),
                   budget=cfg["budget"], seed=cfg["seed"])
    _write_json(ctx, "certification.json", dataclasses.asdict(cert))
    click.echo(
        f"p-robustness {cert.p_hat:.3f} [{cert.ci_low:.3f}, {cert.ci_high:.3f}] "
        f"(ASR {cert.asr:.3f}, random baseline {cert.random_asr:.3f})"
    )


@main.command("gb-harden")
@click.pass_context
@_wrap
def gb_harden_cmd(ctx):
    """Gradient-based adversarial training baseline from the vanilla model."""
    cfg = ctx.obj["cfg"]
    corpus, ds = _load_dataset(ctx)
    model = _load_model(ctx, MODEL_FILE)
    model, metrics = gb_harden(
        model,
        ds.select(corpus, "train"),
        epsilon=cfg["epsilon"],
        steps=cfg["pgd_steps"],
        iterations=cfg["iterations"],
        epochs_per_iteration=cfg["retrain_epochs_per_iteration"],
        lr=cfg["retrain_lr"],
        batch_size=cfg["retrain_batch_size"],
        seed=cfg["seed"],
    )
    save_checkpoint(model, _path(ctx, GB_FILE))
    _write_json(ctx, "gb_metrics.json", {"epochs": metrics})
    click.echo(f"PGD-trained model saved to {_path(ctx, GB_FILE)}")


@main.command("eval")
@click.option("--model-file", default=MODEL_FILE, show_default=True)
@click.option("--split-name", default="val", type=click.Choice(["train", "val", "test"]), show_default=True)
@click.pass_context
@_wrap
def eval_cmd(ctx, model_file, split_name):
    """Clean accuracy and per-class confusion on one split."""
    corpus, ds = _load_dataset(ctx)
    model = _load_model(ctx, model_file)
    res = evaluate(model, ds.select(corpus, split_name))
    _write_json(ctx, "eval.json", {
        "split": split_name,
        "accuracy": res.accuracy,
        "classes": list(model.classes),
        "confusion": res.confusion.tolist(),
        "n": res.n,
    })
    click.echo(f"{split_name} accuracy {res.accuracy:.4f} over {res.n} reports")


@main.command("explain")
@click.option("--model-file", default=MODEL_FILE, show_default=True)
@click.option("--sample", default=None, help="sample_id to explain; defaults to the first test report")
@click.pass_context
@_wrap
def explain_cmd(ctx, model_file, sample):
    """Rank entries by importance and extract the minimal decisive subset."""
    corpus, ds = _load_dataset(ctx)
    model = _load_model(ctx, model_file)
    if sample is None:
        reports = ds.select(corpus, "test")
        if not reports:
            raise click.ClickException("test split is empty")
        report = reports[0]
    else:
        matches = [r for r in corpus if r.sample_id == sample]
        if not matches:
            raise click.ClickException(f"no report with sample_id {sample!r}")
        report = matches[0]
    result = explain_report(report, model)
    payload = {
        "sample_id": report.sample_id,
        "predicted_class": model.classes[result.predicted_class],
        "ranking": [
            {"category": cat, "index": idx, "entry": report.categories[cat][idx], "importance": imp}
            for cat, idx, imp in result.ranking
        ],
        "minimal_subset": sorted([cat, idx] for cat, idx in result.minimal_subset),
    }
    _write_json(ctx, "explanation.json", payload)
    top = payload["ranking"][0] if payload["ranking"] else None
    click.echo(f"predicted {payload['predicted_class']}; minimal subset size {len(payload['minimal_subset'])}")
    if top:
        click.echo(f"top entry: {top['category']}[{top['index']}] = {top['entry']!r} ({top['importance']:+.4f})")


if __name__ == "__main__":
    main()
