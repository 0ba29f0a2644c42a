"""Bag-of-entries report classifier with hand-rolled training.

Architecture: per-category mean-pooled hash features -> per-category linear
projection -> shared trunk (relu MLP) ending in a 32-dim embedding and class
logits. Gradients are computed analytically in numpy so they can be checked
against finite differences, and training is deterministic given a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoding import DEFAULT_HASH_DIM, EntryEncoder, pool_report
from .errors import CheckpointError, ConfigError, NumericalError, TrainingDiverged
from .reports import N_CATEGORIES, Report

CHECKPOINT_VERSION = 1
EMBED_DIM = 32


@dataclass
class Prediction:
    """Classifier output for one report."""

    probs: np.ndarray  # (C,)
    embedding: np.ndarray  # (32,)
    logits: np.ndarray  # (C,)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))


@dataclass
class PgdConfig:
    """Inner-maximization settings for gradient-based adversarial training."""

    epsilon: float
    steps: int = 5
    alpha: float | None = None  # defaults to 2.5·epsilon/steps

    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 2.5 * self.epsilon / max(self.steps, 1)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Classifier:
    """Trainable classifier over pooled category features.

    Parameters live in a flat name->array dict (float64) so the optimizer,
    checkpointing and finite-difference checks can iterate them uniformly.
    """

    def __init__(
        self,
        classes: list[str],
        hash_dim: int = DEFAULT_HASH_DIM,
        d_cat: int = 16,
        hidden_dim: int = 64,
        seed: int = 0,
    ):
        if len(classes) < 2:
            raise ConfigError("classifier needs at least 2 classes")
        if len(set(classes)) != len(classes):
            raise ConfigError("duplicate class labels")
        self.classes = list(classes)
        self.hash_dim = hash_dim
        self.d_cat = d_cat
        self.hidden_dim = hidden_dim
        self.embed_dim = EMBED_DIM
        self.encoder = EntryEncoder(hash_dim)
        c = len(classes)
        flat = N_CATEGORIES * d_cat
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {
            "proj": _uniform_init(rng, (N_CATEGORIES, hash_dim, d_cat), hash_dim),
            "W1": _uniform_init(rng, (flat, hidden_dim), flat),
            "b1": _uniform_init(rng, (hidden_dim,), flat),
            "W2": _uniform_init(rng, (hidden_dim, EMBED_DIM), hidden_dim),
            "b2": _uniform_init(rng, (EMBED_DIM,), hidden_dim),
            "W3": _uniform_init(rng, (EMBED_DIM, c), EMBED_DIM),
            "b3": _uniform_init(rng, (c,), EMBED_DIM),
        }

    # ---- class bookkeeping -------------------------------------------------

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise ConfigError(f"unknown class label {label!r}; classes = {self.classes}") from None

    def labels_to_indices(self, reports: list[Report]) -> np.ndarray:
        return np.array([self.class_index(r.label) for r in reports], dtype=np.int64)

    # ---- feature extraction ------------------------------------------------

    def pool(self, r: Report) -> np.ndarray:
        return pool_report(r, self.encoder)

    def pool_batch(self, reports: list[Report]) -> np.ndarray:
        return np.stack([pool_report(r, self.encoder) for r in reports])

    # ---- inference ---------------------------------------------------------

    def predict_pools(self, pools: np.ndarray) -> Prediction:
        """Forward one (13, hash_dim) pooled block; the path the env replays."""
        p = self.params
        z = np.einsum("cd,cde->ce", pools, p["proj"]).ravel()
        h1 = np.maximum(z @ p["W1"] + p["b1"], 0.0)
        emb = np.maximum(h1 @ p["W2"] + p["b2"], 0.0)
        logits = emb @ p["W3"] + p["b3"]
        if np.any(np.isnan(logits)):
            raise NumericalError("NaN in classifier forward pass")
        return Prediction(probs=softmax(logits), embedding=emb, logits=logits)

    def predict(self, r: Report) -> Prediction:
        return self.predict_pools(self.pool(r))

    def predict_batch_pools(self, X: np.ndarray) -> np.ndarray:
        """Probabilities (B, C) for a pooled batch (B, 13, hash_dim)."""
        cache = self._forward(X)
        if np.any(np.isnan(cache["logits"])):
            raise NumericalError("NaN in classifier forward pass")
        return cache["probs"]

    def predict_batch(self, reports: list[Report]) -> np.ndarray:
        return self.predict_batch_pools(self.pool_batch(reports))

    # ---- forward/backward --------------------------------------------------

    def _forward(self, X: np.ndarray) -> dict:
        p = self.params
        B = X.shape[0]
        z = np.einsum("bcd,cde->bce", X, p["proj"]).reshape(B, -1)
        a1 = z @ p["W1"] + p["b1"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ p["W2"] + p["b2"]
        emb = np.maximum(a2, 0.0)
        logits = emb @ p["W3"] + p["b3"]
        probs = softmax(logits)
        return {"x": X, "z": z, "a1": a1, "h1": h1, "a2": a2, "emb": emb, "logits": logits, "probs": probs}

    def loss_and_grads(
        self,
        X: np.ndarray,
        y: np.ndarray,
        delta: np.ndarray | None = None,
        want_params: bool = True,
        want_x: bool = False,
    ):
        """Mean cross-entropy and its analytic gradients.

        Returns (loss, param grads dict or None, input gradient or None).
        `delta` is an additive perturbation of the pooled input block.
        """
        p = self.params
        xp = X if delta is None else X + delta
        cache = self._forward(xp)
        B = X.shape[0]
        probs = cache["probs"]
        eps = 1e-12
        loss = float(-np.mean(np.log(probs[np.arange(B), y] + eps)))

        dlogits = probs.copy()
        dlogits[np.arange(B), y] -= 1.0
        dlogits /= B
        da2 = (dlogits @ p["W3"].T) * (cache["a2"] > 0)
        da1 = (da2 @ p["W2"].T) * (cache["a1"] > 0)
        dz = (da1 @ p["W1"].T).reshape(B, N_CATEGORIES, self.d_cat)

        grads = None
        if want_params:
            grads = {
                "W3": cache["emb"].T @ dlogits,
                "b3": dlogits.sum(axis=0),
                "W2": cache["h1"].T @ da2,
                "b2": da2.sum(axis=0),
                "W1": cache["z"].T @ da1,
                "b1": da1.sum(axis=0),
                "proj": np.einsum("bcd,bce->cde", xp, dz),
            }
        gx = np.einsum("bce,cde->bcd", dz, p["proj"]) if want_x else None
        return loss, grads, gx


class Adam:
    """Adam over a flat name->array parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


def pgd_perturb_batch(
    model: Classifier, X: np.ndarray, y: np.ndarray, epsilon: float, steps: int, alpha: float | None = None
) -> np.ndarray:
    """L-infinity ascent on the pooled inputs: returns the perturbation delta."""
    delta = np.zeros_like(X)
    if epsilon <= 0.0 or steps <= 0:
        return delta
    step = PgdConfig(epsilon, steps, alpha).step_size()
    for _ in range(steps):
        _, _, gx = model.loss_and_grads(X, y, delta=delta, want_params=False, want_x=True)
        delta += step * np.sign(gx)
        np.clip(delta, -epsilon, epsilon, out=delta)
    return delta


def embed_batch_perturb(r: Report, model: Classifier, epsilon: float, steps: int) -> np.ndarray:
    """Adversarially perturbed (13, hash_dim) pooled block for one report."""
    X = model.pool(r)[None]
    y = np.array([model.class_index(r.label)], dtype=np.int64)
    delta = pgd_perturb_batch(model, X, y, epsilon, steps)
    return (X + delta)[0]


def run_epochs(
    model: Classifier,
    X: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int = 0,
    pgd: PgdConfig | None = None,
) -> list[dict]:
    """Minibatch training shared by plain and adversarial retraining.

    With pgd set, each batch is perturbed by the inner maximization before the
    descent step; epsilon=0 degenerates bitwise to plain training.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr)
    n = X.shape[0]
    metrics = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            Xb, yb = X[idx], y[idx]
            delta = None
            if pgd is not None and pgd.epsilon > 0.0:
                delta = pgd_perturb_batch(model, Xb, yb, pgd.epsilon, pgd.steps, pgd.alpha)
            loss, grads, _ = model.loss_and_grads(Xb, yb, delta=delta)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}")
            loss_sum += loss * len(idx)
            opt.step(model.params, grads)
        probs = model.predict_batch_pools(X)
        acc = float(np.mean(np.argmax(probs, axis=1) == y))
        metrics.append({"epoch": epoch, "loss": loss_sum / n, "accuracy": acc})
    return metrics


def train(
    model: Classifier,
    reports: list[Report],
    epochs: int,
    lr: float,
    batch_size: int = 128,
    seed: int = 0,
    pgd: PgdConfig | None = None,
) -> list[dict]:
    """Train in place on labeled reports; returns per-epoch loss/accuracy."""
    if len({r.label for r in reports}) < 2:
        raise ConfigError("training set must contain at least 2 classes")
    X = model.pool_batch(reports)
    y = model.labels_to_indices(reports)
    return run_epochs(model, X, y, epochs, lr, batch_size, seed=seed, pgd=pgd)


def save_checkpoint(model: Classifier, path: str) -> None:
    """Single-file snapshot: version, dims, class labels and all weights."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "hash_dim": model.hash_dim,
        "d_cat": model.d_cat,
        "hidden_dim": model.hidden_dim,
        "embed_dim": model.embed_dim,
        "classes": model.classes,
    }
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **model.params)


def load_checkpoint(path: str, expect_classes: list[str] | None = None) -> Classifier:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            weights = {k: data[k] for k in data.files if k != "meta"}
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    if expect_classes is not None and len(expect_classes) != len(meta["classes"]):
        raise CheckpointError(
            f"checkpoint has {len(meta['classes'])} classes, expected {len(expect_classes)}"
        )
    model = Classifier(
        meta["classes"], hash_dim=meta["hash_dim"], d_cat=meta["d_cat"], hidden_dim=meta["hidden_dim"]
    )
    for k in model.params:
        if k not in weights:
            raise CheckpointError(f"checkpoint missing tensor {k!r}")
        if weights[k].shape != model.params[k].shape:
            raise CheckpointError(f"tensor {k!r} has shape {weights[k].shape}, expected {model.params[k].shape}")
        model.params[k] = weights[k].astype(np.float64)
    return model
