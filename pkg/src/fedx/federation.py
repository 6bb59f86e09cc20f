"""FedAvg round loop with the FedX local update.

Each round the server's global model is broadcast, every client replaces
its local backbone and projection head with it, trains for ``local_epochs``
against the frozen broadcast copy, and the server averages the results
weighted by client data size.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import losses
from .data import AugmentPolicy, Dataset, PartitionSpec, sample_batches
from .encoder import (
    BACKBONE,
    PREDICTOR,
    PROJECTION_HEAD,
    DescriptorMismatch,
    EmaEncoder,
    EncoderDescriptor,
    ModelParams,
    apply_head,
    build_encoder,
    ema_update,
    embed,
)
from .numerics import SgdState, Tensor, forward_backward, sgd_step, take

log = logging.getLogger(__name__)

METHODS = ("simclr", "byol")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class FederationConfig:
    clients: int = 10
    rounds: int = 100
    local_epochs: int = 10
    method: str = "simclr"
    fedx: bool = True
    tau: float = 0.1
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 128
    seed: int = 0
    workers: int = 1
    include_positive: bool = False
    ema_decay: float = 0.99
    reset_ema: bool = False
    augment_both: bool = True
    float64: bool = False

    def __post_init__(self):
        if self.rounds < 1 or self.clients < 1:
            raise ValueError("rounds and clients must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def dtype(self):
        return np.float64 if self.float64 else np.float32


@dataclass
class LossSummary:
    local_c: float = 0.0
    local_r: float = 0.0
    global_c: float = 0.0
    global_r: float = 0.0
    total: float = 0.0
    steps: int = 0

    def add(self, other: dict[str, float]) -> None:
        for k, v in other.items():
            setattr(self, k, getattr(self, k) + v)
        self.steps += 1

    def mean(self) -> LossSummary:
        if not self.steps:
            return LossSummary()
        s = self.steps
        return LossSummary(self.local_c / s, self.local_r / s, self.global_c / s,
                           self.global_r / s, self.total / s, s)


@dataclass
class RoundMetrics:
    round: int
    loss_local_c: float
    loss_local_r: float
    loss_global_c: float
    loss_global_r: float
    loss_total: float
    wall_ms: float
    mean_angle_deg: float | None = None
    per_client: list[dict] = field(default_factory=list)

    def record(self) -> dict:
        """The fixed-key JSON record written to the metrics sink."""
        out = asdict(self)
        out.pop("per_client")
        return out


@dataclass
class ClientState:
    client_id: int
    indices: np.ndarray
    params: ModelParams
    optimizer: SgdState
    rng: np.random.Generator
    ema: EmaEncoder | None = None


def trainable(params: ModelParams, cfg: FederationConfig) -> dict[str, Tensor]:
    roles = {BACKBONE}
    if cfg.fedx:
        roles.add(PROJECTION_HEAD)
    if cfg.method == "byol":
        roles.add(PREDICTOR)
    return {n: t for n, t in params.items() if params.roles[n] in roles}


def _rows(t: Tensor, start: int, stop: int) -> Tensor:
    return take(t, np.arange(start, stop))


def step_objective(params: ModelParams, teacher: ModelParams | None, ema: EmaEncoder | None,
                   batch, cfg: FederationConfig) -> tuple[Tensor, dict[str, float]]:
    """Build the training loss for one batch.

    Returns the differentiable total and the float value of each component.
    ``teacher`` is the frozen global model (required when ``cfg.fedx``).
    """
    n = len(batch.x)
    tau = cfg.tau
    stacked = [batch.x, batch.x_aug] + ([batch.x_ref] if cfg.fedx else [])
    z_all = embed(params, np.concatenate(stacked))
    z, z_aug = _rows(z_all, 0, n), _rows(z_all, n, 2 * n)

    if cfg.method == "simclr":
        local_c = losses.local_contrastive_simclr(z, z_aug, tau)
    else:
        target = embed(ema.shadow, batch.x_aug).detach()
        local_c = losses.local_contrastive_byol(apply_head(params, z, "predictor"), target)
    if not cfg.fedx:
        parts = {"local_c": local_c.item(), "total": local_c.item()}
        return local_c, parts

    z_ref = _rows(z_all, 2 * n, 3 * n)
    local_r = losses.relational_loss(losses.relationship_vector(z, z_ref, tau),
                                     losses.relationship_vector(z_aug, z_ref, tau))

    zl_all = apply_head(params, _rows(z_all, 0, 2 * n), "projection")
    zl, zl_aug = _rows(zl_all, 0, n), _rows(zl_all, n, 2 * n)
    zg_all = embed(teacher, np.concatenate(stacked)).data
    zg, zg_aug, zg_ref = zg_all[:n], zg_all[n:2 * n], zg_all[2 * n:]
    global_c = losses.global_contrastive(zl, zg_aug, zg, tau, cfg.include_positive)
    r_g, r_g_aug = losses.global_relationship_vectors(zl, zl_aug, zg_ref, tau)
    global_r = losses.relational_loss(r_g, r_g_aug)

    local_kd = losses.total_local_kd(local_c, local_r)
    global_kd = losses.total_global_kd(global_c, global_r)
    total = losses.total_kd(local_kd, global_kd)
    parts = {"local_c": local_c.item(), "local_r": local_r.item(), "global_c": global_c.item(),
             "global_r": global_r.item(), "total": total.item()}
    return total, parts


def train_epochs(params: ModelParams, optimizer: SgdState, ema: EmaEncoder | None,
                 teacher: ModelParams | None, images: np.ndarray, rng: np.random.Generator,
                 cfg: FederationConfig, policy: AugmentPolicy | None, epochs: int,
                 tag: str = "") -> LossSummary:
    """SGD over ``epochs`` passes of ``images``; the shared inner loop."""
    summary = LossSummary()
    weights = trainable(params, cfg)
    for step, batch in enumerate(sample_batches(images, cfg.batch_size, rng, policy, epochs,
                                                cfg.augment_both)):
        total, parts = step_objective(params, teacher, ema, batch, cfg)
        if not all(math.isfinite(v) for v in parts.values()):
            raise DivergenceError(f"{tag} step {step}: non-finite loss {parts}")
        grads = forward_backward(total, weights)
        sgd_step(weights, grads, optimizer)
        if ema is not None:
            ema_update(ema, params)
        summary.add(parts)
    return summary


def local_update(client: ClientState, global_params: ModelParams, images: np.ndarray,
                 cfg: FederationConfig, policy: AugmentPolicy | None,
                 round_index: int = 0) -> LossSummary:
    """Replace the local model with the global one, then train locally.

    ``global_params`` is read only.  The client's optimizer momentum, EMA
    target and predictor carry over between rounds.
    """
    if global_params.descriptor != client.params.descriptor:
        raise DescriptorMismatch("client and global descriptors differ")
    shared = client.params.select(BACKBONE, PROJECTION_HEAD)
    shared.load_from(global_params.select(BACKBONE, PROJECTION_HEAD))
    teacher = global_params.select(BACKBONE) if cfg.fedx else None
    if cfg.method == "byol" and (client.ema is None or cfg.reset_ema):
        client.ema = EmaEncoder.from_model(client.params, cfg.ema_decay)
    return train_epochs(client.params, client.optimizer, client.ema, teacher, images, client.rng,
                        cfg, policy, cfg.local_epochs,
                        tag=f"round {round_index} client {client.client_id}").mean()


def aggregate(models: Sequence[ModelParams], weights: Sequence[float],
              roles: tuple[str, ...] = (BACKBONE, PROJECTION_HEAD)) -> ModelParams:
    """Weighted elementwise average of the shared parameters."""
    if len(models) != len(weights) or not models:
        raise ValueError("need one weight per model")
    if abs(math.fsum(weights) - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {math.fsum(weights)}, not 1")
    first = models[0]
    if any(m.descriptor != first.descriptor for m in models[1:]):
        raise DescriptorMismatch("clients disagree on the model descriptor")
    out = {}
    for name, t in first.items():
        if first.roles[name] not in roles:
            continue
        acc = weights[0] * t.data
        for w, m in zip(weights[1:], models[1:]):
            acc = acc + w * m[name].data
        out[name] = Tensor(acc.astype(t.dtype, copy=False))
    return ModelParams(first.descriptor, out, {n: first.roles[n] for n in out})


def client_weights(partition: PartitionSpec) -> list[float]:
    return partition.weights()


def client_streams(seed: int, clients: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, 1]).spawn(clients)]


def descriptor_for(dataset: Dataset, cfg: FederationConfig, hidden=(256, 256), embed_dim=64,
                   head_hidden=128) -> EncoderDescriptor:
    return EncoderDescriptor(input_dim=dataset.feature_dim, hidden=tuple(hidden),
                             embed_dim=embed_dim, head_hidden=head_hidden,
                             predictor=cfg.method == "byol")


def init_clients(cfg: FederationConfig, initial: ModelParams,
                 partition: PartitionSpec) -> list[ClientState]:
    streams = client_streams(cfg.seed, cfg.clients)
    clients = []
    for m, (indices, rng) in enumerate(zip(partition.client_indices, streams)):
        params = initial.copy(requires_grad=True)
        opt = SgdState.for_params(trainable(params, cfg), cfg.lr, cfg.momentum, cfg.weight_decay)
        clients.append(ClientState(m, np.asarray(indices), params, opt, rng))
    return clients


@dataclass
class TrainingResult:
    global_params: ModelParams
    metrics: list[RoundMetrics]
    clients: list[ClientState]
    broadcast: ModelParams  # global model sent out in the final round


RoundHook = Callable[[int, ModelParams, RoundMetrics, list[ClientState], ModelParams], None]


def run_training(cfg: FederationConfig, dataset: Dataset, partition: PartitionSpec,
                 descriptor: EncoderDescriptor | None = None,
                 policy: AugmentPolicy | None = AugmentPolicy(),
                 angle_images: np.ndarray | None = None,
                 on_round: RoundHook | None = None) -> TrainingResult:
    """Run ``cfg.rounds`` of broadcast -> local update -> upload -> aggregate.

    ``angle_images``, when given, adds the mean local-vs-global embedding
    angle over those samples to every round's metrics.
    """
    from .evaluation import embedding_angles

    if partition.clients != cfg.clients:
        raise ValueError(f"partition has {partition.clients} clients, config expects {cfg.clients}")
    descriptor = descriptor or descriptor_for(dataset, cfg)
    if descriptor.predictor != (cfg.method == "byol"):
        raise DescriptorMismatch("BYOL needs a predictor in the descriptor (and only BYOL)")
    initial = build_encoder(descriptor, cfg.seed, dtype=cfg.dtype, requires_grad=False)
    clients = init_clients(cfg, initial, partition)
    client_images = [dataset.samples[c.indices].astype(cfg.dtype) for c in clients]
    weights = client_weights(partition)
    global_params = initial.select(BACKBONE, PROJECTION_HEAD)
    metrics: list[RoundMetrics] = []

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(1, cfg.rounds + 1):
            started = time.perf_counter()
            broadcast = global_params
            before = broadcast.checksum()

            def work(pair, _g=broadcast, _r=r):
                client, images = pair
                return local_update(client, _g, images, cfg, policy, _r)

            pairs = list(zip(clients, client_images))
            summaries = list(pool.map(work, pairs)) if pool else [work(p) for p in pairs]
            if broadcast.checksum() != before:
                raise RuntimeError("global model changed during local updates")
            global_params = aggregate([c.params for c in clients], weights)

            angle = None
            if angle_images is not None:
                angle = float(np.mean([embedding_angles(c.params, broadcast, angle_images).mean()
                                       for c in clients]))
            avg = {k: math.fsum(getattr(s, k) for s in summaries) / len(summaries)
                   for k in ("local_c", "local_r", "global_c", "global_r", "total")}
            rm = RoundMetrics(r, avg["local_c"], avg["local_r"], avg["global_c"], avg["global_r"],
                              avg["total"], (time.perf_counter() - started) * 1000.0, angle,
                              [asdict(s) | {"client": c.client_id}
                               for s, c in zip(summaries, clients)])
            metrics.append(rm)
            log.info("round %d/%d total %.4f", r, cfg.rounds, rm.loss_total)
            if on_round is not None:
                on_round(r, global_params, rm, clients, broadcast)
    finally:
        if pool:
            pool.shutdown()
    return TrainingResult(global_params, metrics, clients, broadcast)


def train_centralized(cfg: FederationConfig, images: np.ndarray,
                      descriptor: EncoderDescriptor, policy: AugmentPolicy | None,
                      epochs: int, teacher_every: int | None = None) -> ModelParams:
    """Single-process trainer on one data pool, sharing the batch schedule of client 0.

    With ``cfg.fedx`` the frozen teacher is re-snapshotted from the live
    model every ``teacher_every`` epochs (the single-client analogue of a
    communication round).
    """
    model = build_encoder(descriptor, cfg.seed, dtype=cfg.dtype, requires_grad=True)
    rng = client_streams(cfg.seed, 1)[0]
    optimizer = SgdState.for_params(trainable(model, cfg), cfg.lr, cfg.momentum, cfg.weight_decay)
    ema = EmaEncoder.from_model(model, cfg.ema_decay) if cfg.method == "byol" else None
    images = images.astype(cfg.dtype)
    every = teacher_every or max(epochs, 1)
    done = 0
    while done < epochs:
        chunk = min(every, epochs - done)
        teacher = model.select(BACKBONE).detached() if cfg.fedx else None
        train_epochs(model, optimizer, ema, teacher, images, rng, cfg, policy, chunk)
        done += chunk
    return model
