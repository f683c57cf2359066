"""Embedding sets, augmentations, the contrastive batch sampler and file formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .probkit import ClassDistribution

TSV_MAGIC = "#negbound-embeddings v1"
PACKED_MAGIC = b"NEGBOUNDEMBED\x00v1"
FORMATS = ("tsv", "packed")
AUGMENTATION_KINDS = ("gaussian_noise", "coordinate_dropout", "compose")
MAX_DROPOUT_RETRIES = 100


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """N labeled feature rows of dimension h over ``n_classes`` classes."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    normalized: bool = False

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ValueError("labels must be 1-D with one entry per feature row")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            bad = int(np.flatnonzero((labels < 0) | (labels >= self.n_classes))[0])
            raise ValueError(f"row {bad}: class id {labels[bad]} outside 0..{self.n_classes - 1}")
        finite = np.isfinite(feats).all(axis=1)
        if not finite.all():
            raise ValueError(f"row {int(np.flatnonzero(~finite)[0])}: non-finite feature value")
        if self.normalized and feats.shape[0]:
            norms = np.linalg.norm(feats, axis=1)
            off = np.abs(norms - 1.0) > 1e-6
            if off.any():
                i = int(np.flatnonzero(off)[0])
                raise ValueError(f"row {i} has norm {norms[i]:.9g} but the set is flagged normalized")
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "labels", _readonly(labels))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.n_classes)]

    def class_distribution(self) -> ClassDistribution:
        return ClassDistribution.from_counts(self.class_counts)

    def subset(self, rows) -> "EmbeddingSet":
        return EmbeddingSet(self.features[rows], self.labels[rows], self.n_classes, self.normalized)


def l2_normalize(s: EmbeddingSet) -> EmbeddingSet:
    norms = np.linalg.norm(s.features, axis=1)
    zero = norms == 0.0
    if zero.any():
        raise ValueError(f"row {int(np.flatnonzero(zero)[0])} has zero norm and cannot be normalized")
    return EmbeddingSet(s.features / norms[:, None], s.labels, s.n_classes, normalized=True)


# --------------------------------------------------------------------------
# file formats


def save_embeddings(s: EmbeddingSet, path, fmt: str = "tsv") -> None:
    path = Path(path)
    if fmt == "tsv":
        lines = [f"{TSV_MAGIC} n={s.n} h={s.dim} c={s.n_classes} normalized={int(s.normalized)}"]
        for label, row in zip(s.labels, s.features):
            lines.append("\t".join([str(int(label))] + [f"{v:.9g}" for v in row]))
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "packed":
        with path.open("wb") as fh:
            fh.write(PACKED_MAGIC)
            fh.write(struct.pack("<IIIB", s.n, s.dim, s.n_classes, int(s.normalized)))
            fh.write(s.labels.astype("<u4").tobytes())
            fh.write(s.features.astype("<f4").tobytes())
    else:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def load_embeddings(path, fmt: str | None = None) -> EmbeddingSet:
    """Read an embedding file; the format is sniffed from the magic if not given."""
    path = Path(path)
    raw = path.read_bytes()
    if fmt is None:
        fmt = "packed" if raw.startswith(PACKED_MAGIC) else "tsv"
    if fmt == "tsv":
        return _load_tsv(raw.decode("utf-8"), path)
    if fmt == "packed":
        return _load_packed(raw, path)
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def _parse_header(line: str, path) -> dict:
    if not line.startswith(TSV_MAGIC):
        raise FormatError(f"{path}: line 1: missing header {TSV_MAGIC!r}")
    fields = {}
    for tok in line[len(TSV_MAGIC):].split():
        key, _, val = tok.partition("=")
        fields[key] = val
    try:
        return {
            "n": int(fields["n"]),
            "h": int(fields["h"]),
            "c": int(fields["c"]),
            "normalized": fields["normalized"] == "1",
        }
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: line 1: malformed header ({exc})") from None


def _load_tsv(text: str, path) -> EmbeddingSet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    hdr = _parse_header(lines[0], path)
    rows = lines[1:]
    if len(rows) != hdr["n"]:
        raise FormatError(f"{path}: header declares n={hdr['n']} rows but {len(rows)} found")
    feats = np.empty((hdr["n"], hdr["h"]))
    labels = np.empty(hdr["n"], dtype=np.int64)
    for i, line in enumerate(rows):
        lineno = i + 2
        parts = line.split("\t")
        if len(parts) - 1 != hdr["h"]:
            raise FormatError(f"{path}: line {lineno}: expected {hdr['h']} values, found {len(parts) - 1}")
        try:
            labels[i] = int(parts[0])
            feats[i] = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from None
        if not (0 <= labels[i] < hdr["c"]):
            raise FormatError(f"{path}: line {lineno}: unknown class id {labels[i]} (c={hdr['c']})")
        if not np.isfinite(feats[i]).all():
            raise FormatError(f"{path}: line {lineno} (row {i}): NaN or Inf value")
    try:
        return EmbeddingSet(feats, labels, hdr["c"], hdr["normalized"])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _load_packed(raw: bytes, path) -> EmbeddingSet:
    if not raw.startswith(PACKED_MAGIC):
        raise FormatError(f"{path}: bad magic")
    off = len(PACKED_MAGIC)
    hsize = struct.calcsize("<IIIB")
    if len(raw) < off + hsize:
        raise FormatError(f"{path}: truncated header")
    n, h, c, normalized = struct.unpack_from("<IIIB", raw, off)
    off += hsize
    need = off + 4 * n + 4 * n * h
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes for n={n}, h={h}, found {len(raw)}")
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    feats = np.frombuffer(raw, dtype="<f4", count=n * h, offset=off).reshape(n, h).astype(np.float64)
    bad = ~np.isfinite(feats).all(axis=1)
    if bad.any():
        raise FormatError(f"{path}: row {int(np.flatnonzero(bad)[0])}: NaN or Inf value")
    if n and labels.max() >= c:
        i = int(np.argmax(labels >= c))
        raise FormatError(f"{path}: row {i}: unknown class id {labels[i]} (c={c})")
    try:
        return EmbeddingSet(feats, labels, c, bool(normalized))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# augmentations


@dataclass(frozen=True)
class AugmentationSpec:
    """Stochastic map applied to a feature vector.

    ``compose`` adds noise first, then drops coordinates.
    """

    kind: str = "gaussian_noise"
    sigma: float = 0.1
    drop_rate: float = 0.0
    renormalize: bool = True

    def __post_init__(self):
        if self.kind not in AUGMENTATION_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if not (self.sigma >= 0.0):
            raise ValueError("sigma must be >= 0")
        if not (0.0 <= self.drop_rate < 1.0):
            raise ValueError("drop_rate must lie in [0, 1)")

    @property
    def uses_noise(self) -> bool:
        return self.kind in ("gaussian_noise", "compose") and self.sigma > 0

    @property
    def uses_dropout(self) -> bool:
        return self.kind in ("coordinate_dropout", "compose") and self.drop_rate > 0

    @property
    def is_identity(self) -> bool:
        return not (self.uses_noise or self.uses_dropout)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "drop_rate": self.drop_rate, "renormalize": self.renormalize}

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls("gaussian_noise", 0.0, 0.0, False)


def augment_rows(x: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply independent augmentation draws to every row of ``x``.

    The identity spec returns a copy untouched, without renormalizing.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    if spec.is_identity:
        return x
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if spec.uses_noise:
        x = x + rng.normal(0.0, spec.sigma, size=x.shape)
    if spec.uses_dropout:
        keep = rng.random(x.shape) >= spec.drop_rate
        if spec.renormalize:
            for _ in range(MAX_DROPOUT_RETRIES):
                dead = ~(keep & (x != 0)).any(axis=1)
                if not dead.any():
                    break
                keep[dead] = rng.random((int(dead.sum()), x.shape[1])) >= spec.drop_rate
            else:
                raise ValueError(f"coordinate dropout removed every coordinate {MAX_DROPOUT_RETRIES} times")
        x = np.where(keep, x, 0.0)
    if spec.renormalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        if (norms == 0).any():
            raise ValueError("augmented vector has zero norm and cannot be renormalized")
        x = x / norms
    return x[0] if single else x


def apply_augmentation(x: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    return augment_rows(np.asarray(x, dtype=np.float64), spec, rng)


# --------------------------------------------------------------------------
# Definition-1 sampling


@dataclass(frozen=True, eq=False)
class ContrastiveBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negatives: np.ndarray
    anchor_class: int
    negative_classes: np.ndarray
    anchor_index: int = -1
    negative_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        if len(self.negatives) != len(self.negative_classes):
            raise ValueError("negatives and negative_classes differ in length")

    @property
    def k(self) -> int:
        return len(self.negative_classes)


@dataclass(frozen=True, eq=False)
class BatchArrays:
    """``n`` contrastive tuples stacked: anchors (n, h), negatives (n, K, h)."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_classes: np.ndarray
    negative_classes: np.ndarray
    anchor_indices: np.ndarray
    negative_indices: np.ndarray

    def __len__(self) -> int:
        return self.anchor_classes.shape[0]

    def batch(self, i: int) -> ContrastiveBatch:
        return ContrastiveBatch(
            self.anchors[i], self.positives[i], self.negatives[i],
            int(self.anchor_classes[i]), self.negative_classes[i],
            int(self.anchor_indices[i]), self.negative_indices[i],
        )


def _sampling_probs(s: EmbeddingSet, dist: ClassDistribution | None) -> np.ndarray:
    if dist is None:
        counts = s.class_counts
        return counts / counts.sum()
    if dist.n_classes != s.n_classes:
        raise ValueError(f"distribution has {dist.n_classes} classes, set has {s.n_classes}")
    return dist.as_array()


def draw_members(members: list[np.ndarray], classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One uniformly chosen row index from each requested class."""
    classes = np.asarray(classes)
    sizes = np.array([len(m) for m in members])
    if classes.size and (sizes[classes] == 0).any():
        c = int(classes[np.flatnonzero(sizes[classes] == 0)[0]])
        raise ValueError(f"class {c} has no members in the set")
    pick = np.floor(rng.random(classes.shape) * sizes[classes]).astype(np.int64)
    out = np.empty(classes.shape, dtype=np.int64)
    flat_c, flat_p, flat_o = classes.ravel(), pick.ravel(), out.reshape(-1)
    for c in np.unique(flat_c):
        sel = flat_c == c
        flat_o[sel] = members[c][flat_p[sel]]
    return out


def sample_batches(
    s: EmbeddingSet,
    spec: AugmentationSpec,
    k: int,
    n: int,
    rng: np.random.Generator,
    dist: ClassDistribution | None = None,
) -> BatchArrays:
    """Draw ``n`` independent tuples following the data generation process.

    Per tuple: anchor class and ``k`` negative classes i.i.d. from the class
    distribution; one anchor sample with two augmentations (anchor, positive);
    one sample and one augmentation per negative.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    probs = _sampling_probs(s, dist)
    members = s.class_indices()
    classes = rng.choice(s.n_classes, size=(n, k + 1), p=probs)
    anchor_c, neg_c = classes[:, 0], classes[:, 1:]
    anchor_idx = draw_members(members, anchor_c, rng)
    neg_idx = draw_members(members, neg_c, rng)
    x = s.features
    anchors = augment_rows(x[anchor_idx], spec, rng)
    positives = augment_rows(x[anchor_idx], spec, rng)
    negs = augment_rows(x[neg_idx.ravel()], spec, rng).reshape(n, k, s.dim)
    return BatchArrays(anchors, positives, negs, anchor_c, neg_c, anchor_idx, neg_idx)


def sample_batch(
    s: EmbeddingSet,
    spec: AugmentationSpec,
    k: int,
    rng: np.random.Generator,
    dist: ClassDistribution | None = None,
) -> ContrastiveBatch:
    return sample_batches(s, spec, k, 1, rng, dist).batch(0)


# --------------------------------------------------------------------------
# class means


@dataclass(frozen=True, eq=False)
class MeanRepresentations:
    class_means: np.ndarray
    per_sample_means: np.ndarray | None
    augmentations_per_sample: int

    def __post_init__(self):
        object.__setattr__(self, "class_means", _readonly(self.class_means))
        if self.per_sample_means is not None:
            object.__setattr__(self, "per_sample_means", _readonly(self.per_sample_means))


def per_sample_means(s: EmbeddingSet, spec: AugmentationSpec, m_augmentations: int, rng) -> np.ndarray:
    if m_augmentations < 1:
        raise ValueError("m_augmentations must be >= 1")
    if spec.is_identity:
        return np.array(s.features, copy=True)
    acc = np.zeros_like(s.features)
    for _ in range(m_augmentations):
        acc += augment_rows(s.features, spec, rng)
    return acc / m_augmentations


def compute_class_means(
    s: EmbeddingSet, spec: AugmentationSpec, m_augmentations: int, rng: np.random.Generator
) -> MeanRepresentations:
    """Average M augmentations per sample, then average samples within each class."""
    mu_x = per_sample_means(s, spec, m_augmentations, rng)
    counts = s.class_counts
    if (counts == 0).any():
        raise ValueError(f"class {int(np.flatnonzero(counts == 0)[0])} is empty")
    sums = np.zeros((s.n_classes, s.dim))
    np.add.at(sums, s.labels, mu_x)
    return MeanRepresentations(sums / counts[:, None], mu_x, m_augmentations)


def check_unit_rows(x: np.ndarray, tol: float = 1e-6) -> bool:
    return bool(np.all(np.abs(np.linalg.norm(x, axis=-1) - 1.0) <= tol)) if x.size else True
