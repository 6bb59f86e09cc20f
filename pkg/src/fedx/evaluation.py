"""Representation quality: linear probe, semi-supervised fine-tuning, angle analysis."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .encoder import BACKBONE, ModelParams, embed
from .numerics import SgdState, Tensor, forward_backward, log_softmax, pick, sgd_step

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    top1: float
    per_class: list[float | None]
    label_ratio: float
    epochs: int
    mode: str = "linear"
    settings: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def features(params: ModelParams, images: np.ndarray, batch: int = 1024) -> np.ndarray:
    """Backbone embeddings, computed without touching or tracking the parameters."""
    frozen = params.select(BACKBONE).detached()
    rows = [embed(frozen, images[i:i + batch]).data for i in range(0, len(images), batch)]
    return np.concatenate(rows)


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return -pick(log_softmax(logits, axis=1), labels).mean()


def _per_class_accuracy(pred: np.ndarray, labels: np.ndarray, k: int) -> list[float | None]:
    out = []
    for c in range(k):
        mask = labels == c
        out.append(float((pred[mask] == c).mean()) if mask.any() else None)
    return out


def _missing_classes(labels: np.ndarray, k: int) -> list[int]:
    return [c for c in range(k) if not (labels == c).any()]


class _Linear:
    def __init__(self, dim: int, classes: int, rng: np.random.Generator, dtype):
        bound = 1.0 / np.sqrt(dim)
        self.params = {
            "classifier.weight": Tensor(rng.uniform(-bound, bound, (dim, classes)).astype(dtype),
                                        requires_grad=True),
            "classifier.bias": Tensor(np.zeros(classes, dtype=dtype), requires_grad=True),
        }

    def __call__(self, x) -> Tensor:
        return x @ self.params["classifier.weight"] + self.params["classifier.bias"]


def linear_evaluate(backbone: ModelParams, train: Dataset, test: Dataset, epochs: int = 100,
                    lr: float = 0.03, momentum: float = 0.9, batch_size: int = 128,
                    seed: int = 0) -> EvalReport:
    """Train a fresh linear classifier on frozen embeddings and report test top-1."""
    before = backbone.checksum()
    warnings = []
    missing = _missing_classes(train.labels, train.class_count)
    if missing:
        warnings.append(f"classes {missing} absent from the training labels")
        log.warning(warnings[-1])
    x_train = features(backbone, train.samples)
    x_test = features(backbone, test.samples)
    rng = np.random.default_rng(seed)
    head = _Linear(x_train.shape[1], train.class_count, rng, x_train.dtype)
    opt = SgdState.for_params(head.params, lr, momentum)
    for _ in range(epochs):
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = _cross_entropy(head(Tensor(x_train[idx])), train.labels[idx])
            sgd_step(head.params, forward_backward(loss, head.params), opt)
    pred = head(Tensor(x_test)).data.argmax(axis=1)
    if backbone.checksum() != before:
        raise RuntimeError("linear evaluation modified the backbone")
    return EvalReport(
        top1=float((pred == test.labels).mean()),
        per_class=_per_class_accuracy(pred, test.labels, test.class_count),
        label_ratio=1.0, epochs=epochs, mode="linear",
        settings={"optimizer": "sgd", "lr": lr, "momentum": momentum, "weight_decay": 0.0,
                  "batch_size": batch_size, "seed": seed, "features": "backbone"},
        warnings=warnings)


def labeled_subset(labels: np.ndarray, class_count: int, ratio: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Indices of a per-class proportional sample holding ``ratio`` of each class."""
    picked = []
    for c in range(class_count):
        members = np.flatnonzero(labels == c)
        take_n = int(round(ratio * len(members)))
        picked.append(rng.permutation(members)[:take_n])
    return np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)


def semi_supervised_finetune(model: ModelParams, train: Dataset, test: Dataset,
                             label_ratio: float, epochs: int = 100, lr: float = 1e-3,
                             momentum: float = 0.9, batch_size: int = 128,
                             seed: int = 0) -> EvalReport:
    """Fine-tune the whole backbone plus a new classifier on a labelled fraction."""
    if not 0 < label_ratio <= 1:
        raise ValueError(f"label ratio must lie in (0, 1], got {label_ratio}")
    rng = np.random.default_rng(seed)
    subset = labeled_subset(train.labels, train.class_count, label_ratio, rng)
    warnings = []
    missing = _missing_classes(train.labels[subset], train.class_count)
    if missing:
        warnings.append(f"label ratio {label_ratio} leaves classes {missing} without labels")
        log.warning(warnings[-1])
    if len(subset) == 0:
        raise ValueError("labelled subset is empty")
    net = model.select(BACKBONE).copy(requires_grad=True)
    head = _Linear(net.descriptor.embed_dim, train.class_count, rng, net.dtype)
    params = dict(net.items()) | head.params
    opt = SgdState.for_params(params, lr, momentum)
    x = train.samples[subset].astype(net.dtype)
    y = train.labels[subset]
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = _cross_entropy(head(embed(net, x[idx])), y[idx])
            sgd_step(params, forward_backward(loss, params), opt)
    pred = head(Tensor(features(net, test.samples))).data.argmax(axis=1)
    return EvalReport(
        top1=float((pred == test.labels).mean()),
        per_class=_per_class_accuracy(pred, test.labels, test.class_count),
        label_ratio=label_ratio, epochs=epochs, mode="semi",
        settings={"optimizer": "sgd", "lr": lr, "momentum": momentum, "batch_size": batch_size,
                  "seed": seed, "labeled_samples": int(len(subset))},
        warnings=warnings)


# -- angle analysis --------------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding: the angle is undefined")
    return v / norms


def angle_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise angle in degrees between two embedding batches."""
    cos = np.clip((_unit(a) * _unit(b)).sum(axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def embedding_angles(local: ModelParams, global_: ModelParams, images: np.ndarray) -> np.ndarray:
    """Per-sample angle between local f(x) and global F(x), in degrees."""
    return angle_between(features(local, images), features(global_, images))


def class_prototypes(emb: np.ndarray, labels: np.ndarray, class_count: int) -> np.ndarray:
    protos = []
    for c in range(class_count):
        mask = labels == c
        if not mask.any():
            raise ValueError(f"class {c} has no samples; its prototype is undefined")
        protos.append(np.asarray(emb[mask], dtype=np.float64).mean(axis=0))
    return np.stack(protos)


def prototype_angle_matrix(protos: np.ndarray) -> np.ndarray:
    unit = _unit(protos)
    out = np.degrees(np.arccos(np.clip(unit @ unit.T, -1.0, 1.0)))
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 0.0)
    return out


def inter_class_angles(model: ModelParams, test: Dataset) -> np.ndarray:
    """K x K angles between class-mean embeddings."""
    emb = features(model, test.samples)
    return prototype_angle_matrix(class_prototypes(emb, test.labels, test.class_count))


def mean_off_diagonal(matrix: np.ndarray) -> float:
    k = len(matrix)
    if k < 2:
        return 0.0
    return float(matrix[np.triu_indices(k, 1)].mean())


@dataclass
class AngleReport:
    per_sample: np.ndarray
    per_class: dict[int, dict[str, float]]
    inter_class: np.ndarray
    mean_local_global: float
    mean_inter_class: float

    def to_dict(self) -> dict:
        return {
            "mean_local_global_deg": self.mean_local_global,
            "mean_inter_class_deg": self.mean_inter_class,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "inter_class_deg": self.inter_class.tolist(),
            "per_sample_deg": self.per_sample.tolist(),
        }


def embedding_angle(local: ModelParams, global_: ModelParams, test: Dataset) -> AngleReport:
    """Local-vs-global angles per sample and per class, plus the local model's
    inter-class prototype angles."""
    angles = embedding_angles(local, global_, test.samples)
    per_class = {}
    for c in range(test.class_count):
        a = angles[test.labels == c]
        if len(a):
            per_class[c] = {"count": int(len(a)), "mean": float(a.mean()),
                            "median": float(np.median(a)), "q1": float(np.percentile(a, 25)),
                            "q3": float(np.percentile(a, 75)), "max": float(a.max())}
    matrix = inter_class_angles(local, test)
    return AngleReport(angles, per_class, matrix, float(angles.mean()), mean_off_diagonal(matrix))
