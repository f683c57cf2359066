"""Desk-scale contrastive training on synthetic latent-class data.

A small encoder (linear, or one ReLU hidden layer) followed by L2
normalisation is trained with InfoNCE on independently sampled
(anchor, positive, negatives) tuples. Gradients are derived by hand.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .datamodel import AugmentationSpec, EmbeddingSet, augment_rows, compute_class_means, draw_members
from .errors import DivergenceError
from .losses import info_nce_batch, mean_classifier_loss, predict_linear, train_linear_probe
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_classes: int = 10
    samples_per_class: int = 500
    input_dim: int = 32
    hidden_dim: int = 0
    embed_dim: int = 16
    cluster_separation: float = 4.0
    cluster_sigma: float = 1.0
    # acts on raw inputs during training
    augmentation: AugmentationSpec = field(
        default_factory=lambda: AugmentationSpec("gaussian_noise", sigma=0.5, renormalize=False)
    )
    # acts on normalised embeddings during evaluation
    embedding_augmentation: AugmentationSpec = field(
        default_factory=lambda: AugmentationSpec("gaussian_noise", sigma=0.1, renormalize=True)
    )
    k_negatives: int = 31
    temperature: float = 0.5
    epochs: int = 30
    batch_pairs_per_step: int = 64
    learning_rate: float = 0.5
    seed: int = 0
    validation_fraction: float = 0.1
    m_augmentations: int = 10
    probe_epochs: int = 300
    report_preprojection: bool = False

    def __post_init__(self):
        for name in ("augmentation", "embedding_augmentation"):
            val = getattr(self, name)
            if isinstance(val, dict):
                setattr(self, name, AugmentationSpec(**val))
        counts = ("n_classes", "samples_per_class", "input_dim", "embed_dim", "k_negatives",
                  "batch_pairs_per_step", "m_augmentations")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim < 0 or self.epochs < 0 or self.probe_epochs < 0:
            raise ValueError("hidden_dim, epochs and probe_epochs must be >= 0")
        if not (self.cluster_separation >= 0 and self.cluster_sigma >= 0):
            raise ValueError("cluster_separation and cluster_sigma must be >= 0")
        if self.temperature <= 0 or self.learning_rate < 0:
            raise ValueError("temperature must be > 0 and learning_rate >= 0")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = self.augmentation.to_dict()
        d["embedding_augmentation"] = self.embedding_augmentation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)


@dataclass
class SyntheticData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    centers: np.ndarray


def generate_synthetic(config: TrainConfig, rng: np.random.Generator | None = None) -> SyntheticData:
    """Gaussian classes centred on orthogonal directions, split per class into train and validation."""
    c, d = config.n_classes, config.input_dim
    if d < c:
        raise ValueError(f"input_dim ({d}) must be >= n_classes ({c}) to place centres orthogonally")
    rng = rng or stream(config.seed, "synthetic-data")
    q, _ = np.linalg.qr(rng.normal(size=(d, c)))
    centers = config.cluster_separation * q.T
    xs_tr, ys_tr, xs_va, ys_va = [], [], [], []
    n = config.samples_per_class
    n_val = max(1, int(round(config.validation_fraction * n))) if n >= 2 else 0
    for k in range(c):
        x = centers[k] + config.cluster_sigma * rng.normal(size=(n, d))
        perm = rng.permutation(n)
        xs_va.append(x[perm[:n_val]])
        xs_tr.append(x[perm[n_val:]])
        ys_va.append(np.full(n_val, k))
        ys_tr.append(np.full(n - n_val, k))
    return SyntheticData(
        np.concatenate(xs_tr), np.concatenate(ys_tr).astype(np.int64),
        np.concatenate(xs_va), np.concatenate(ys_va).astype(np.int64), centers,
    )


# --------------------------------------------------------------------------
# encoder


def init_encoder(config: TrainConfig, rng: np.random.Generator) -> dict:
    d, h, hid = config.input_dim, config.embed_dim, config.hidden_dim
    if hid == 0:
        return {"W": rng.normal(0.0, 1.0 / math.sqrt(d), size=(h, d))}
    return {
        "W1": rng.normal(0.0, math.sqrt(2.0 / d), size=(hid, d)),
        "b1": np.zeros(hid),
        "W2": rng.normal(0.0, 1.0 / math.sqrt(hid), size=(h, hid)),
    }


def encode(params: dict, x: np.ndarray, normalize: bool = True):
    """Forward pass; returns (output, cache) where cache feeds ``encode_backward``."""
    if "W" in params:
        u = x @ params["W"].T
        hidden = pre = None
    else:
        pre = x @ params["W1"].T + params["b1"]
        hidden = np.maximum(pre, 0.0)
        u = hidden @ params["W2"].T
    if not normalize:
        return u, None
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    z = u / np.maximum(norm, 1e-12)
    return z, (x, pre, hidden, z, norm)


def hidden_features(params: dict, x: np.ndarray) -> np.ndarray | None:
    if "W" in params:
        return None
    return np.maximum(x @ params["W1"].T + params["b1"], 0.0)


def encode_backward(params: dict, cache, dz: np.ndarray) -> dict:
    x, pre, hidden, z, norm = cache
    du = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / np.maximum(norm, 1e-12)
    if "W" in params:
        return {"W": du.T @ x}
    g = {"W2": du.T @ hidden}
    dpre = (du @ params["W2"]) * (pre > 0)
    g["W1"] = dpre.T @ x
    g["b1"] = dpre.sum(axis=0)
    return g


def contrastive_loss_and_grad(params: dict, xa: np.ndarray, xp: np.ndarray, xn: np.ndarray, t: float):
    """Mean InfoNCE over tuples with inputs xa (B, d), xp (B, d), xn (B, K, d), and its gradient."""
    b, k, d = xn.shape
    x = np.concatenate([xa, xp, xn.reshape(b * k, d)])
    with np.errstate(over="ignore", invalid="ignore"):
        z, cache = encode(params, x)
    if not np.isfinite(cache[4]).all():
        # pre-normalisation outputs overflowed; report as a non-finite loss
        return math.nan, np.full(b, math.nan), {name: np.zeros_like(w) for name, w in params.items()}
    za, zp, zn = z[:b], z[b:2 * b], z[2 * b:].reshape(b, k, -1)
    per = info_nce_batch(za, zp, zn, t)
    pos = np.einsum("bh,bh->b", za, zp) / t
    neg = np.einsum("bh,bkh->bk", za, zn) / t
    logits = np.concatenate([pos[:, None], neg], axis=1)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    g = p
    g[:, 0] -= 1.0
    g /= b
    g0, gk = g[:, :1], g[:, 1:]
    dza = (g0 * zp + np.einsum("bk,bkh->bh", gk, zn)) / t
    dzp = g0 * za / t
    dzn = gk[:, :, None] * za[:, None, :] / t
    dz = np.concatenate([dza, dzp, dzn.reshape(b * k, -1)])
    return float(per.mean()), per, encode_backward(params, cache, dz)


def sample_training_tuples(data: SyntheticData, config: TrainConfig, rng: np.random.Generator, n: int | None = None):
    """Augmented raw inputs for ``n`` tuples drawn from the training split."""
    n = n or config.batch_pairs_per_step
    k = config.k_negatives
    members = [np.flatnonzero(data.y_train == c) for c in range(config.n_classes)]
    counts = np.array([m.size for m in members])
    classes = rng.choice(config.n_classes, size=(n, k + 1), p=counts / counts.sum())
    ia = draw_members(members, classes[:, 0], rng)
    ineg = draw_members(members, classes[:, 1:], rng)
    aug = config.augmentation
    xa = augment_rows(data.x_train[ia], aug, rng)
    xp = augment_rows(data.x_train[ia], aug, rng)
    xn = augment_rows(data.x_train[ineg.ravel()], aug, rng).reshape(n, k, -1)
    return xa, xp, xn


def gradient_check(params: dict, xa, xp, xn, t: float, eps: float = 1e-5) -> float:
    """Largest elementwise relative error between analytic and central-difference gradients."""
    _, _, grads = contrastive_loss_and_grad(params, xa, xp, xn, t)
    worst = 0.0
    for name, w in params.items():
        flat = w.reshape(-1)
        ga = grads[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = contrastive_loss_and_grad(params, xa, xp, xn, t)[0]
            flat[i] = old - eps
            fm = contrastive_loss_and_grad(params, xa, xp, xn, t)[0]
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            scale = max(abs(num), abs(ga[i]))
            if scale > 1e-7:
                worst = max(worst, abs(num - ga[i]) / scale)
    return worst


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    config: TrainConfig
    params: dict
    loss_trace: list  # (epoch, mean loss, stderr)
    train_set: EmbeddingSet
    val_set: EmbeddingSet
    train_unnormalized: EmbeddingSet
    mean_acc: float = float("nan")
    probe_acc: float = float("nan")
    mean_train_ce: float = float("nan")
    probe_train_ce: float = float("nan")
    preprojection_probe_acc: float | None = None


def _embed(params, x, y, n_classes):
    u, _ = encode(params, x, normalize=False)
    raw = EmbeddingSet(u, y, n_classes, normalized=False)
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    return EmbeddingSet(u / np.maximum(norms, 1e-12), y, n_classes, normalized=True), raw


def train_encoder(
    config: TrainConfig, data: SyntheticData | None = None, rng: np.random.Generator | None = None
) -> TrainResult:
    """Plain SGD on InfoNCE, then embed both splits and evaluate the classifiers."""
    data = data or generate_synthetic(config)
    params = init_encoder(config, rng or stream(config.seed, "encoder-init"))
    k = config.k_negatives
    ceiling = 10.0 * math.log(k + 1)
    n_train = data.x_train.shape[0]
    steps = max(1, math.ceil(n_train / config.batch_pairs_per_step))
    trace = []
    for epoch in range(config.epochs):
        losses = np.empty(steps)
        for s in range(steps):
            # the same tuples every epoch: a fixed empirical sample of the contrastive loss
            xa, xp, xn = sample_training_tuples(data, config, stream(config.seed, "train-step", s))
            loss, _, grads = contrastive_loss_and_grad(params, xa, xp, xn, config.temperature)
            if not math.isfinite(loss) or loss > ceiling:
                trace.append((epoch, float(loss), float("nan")))
                raise DivergenceError(f"loss {loss:.4g} exceeded {ceiling:.4g} at epoch {epoch}, step {s}", trace)
            with np.errstate(over="ignore", invalid="ignore"):
                for name in params:
                    params[name] -= config.learning_rate * grads[name]
            if not all(np.isfinite(w).all() for w in params.values()):
                trace.append((epoch, float(loss), float("nan")))
                raise DivergenceError(f"encoder weights became non-finite at epoch {epoch}, step {s}", trace)
            losses[s] = loss
        se = float(losses.std(ddof=1) / math.sqrt(steps)) if steps > 1 else 0.0
        trace.append((epoch, float(losses.mean()), se))
        log.debug("epoch %d loss %.4f", epoch, losses.mean())
    train_set, train_raw = _embed(params, data.x_train, data.y_train, config.n_classes)
    val_set, _ = _embed(params, data.x_val, data.y_val, config.n_classes)
    result = TrainResult(config, params, trace, train_set, val_set, train_raw)
    evaluate_classifiers(result, data)
    return result


def evaluate_classifiers(result: TrainResult, data: SyntheticData | None = None) -> tuple[float, float]:
    """Validation accuracy of the mean classifier and of a linear probe.

    Class means average ``m_augmentations`` embedding-space augmentations per
    training sample. The probe starts from those means, so its training loss
    can only go down from the mean classifier's.
    """
    cfg = result.config
    means = compute_class_means(
        result.train_set, cfg.embedding_augmentation, cfg.m_augmentations, stream(cfg.seed, "classifier-means")
    )
    mu = means.class_means
    val = result.val_set
    result.mean_acc = float(np.mean(predict_linear(val.features, mu) == val.labels))
    result.mean_train_ce = mean_classifier_loss(result.train_set, mu, t=1.0).value
    probe = train_linear_probe(
        result.train_set.features, result.train_set.labels, cfg.n_classes, means_for_init=mu, epochs=cfg.probe_epochs
    )
    result.probe_train_ce = probe.loss.value
    result.probe_acc = float(np.mean(probe.predict(val.features) == val.labels))
    if cfg.report_preprojection and data is not None and cfg.hidden_dim > 0:
        htr = hidden_features(result.params, data.x_train)
        hva = hidden_features(result.params, data.x_val)
        pp = train_linear_probe(htr, data.y_train, cfg.n_classes, epochs=cfg.probe_epochs)
        result.preprojection_probe_acc = float(np.mean(pp.predict(hva) == data.y_val))
    return result.mean_acc, result.probe_acc


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size < window:
        return values[:0]
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def nearest_center_accuracy(data: SyntheticData) -> float:
    d = ((data.x_val[:, None, :] - data.centers[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == data.y_val))
