"""MLP encoder, projection head, BYOL predictor and EMA target.

A model is a :class:`ModelParams`: an ordered name -> :class:`Tensor` map
with a role tag per parameter (``backbone``, ``projection_head`` or
``predictor``) and the :class:`EncoderDescriptor` that produced it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .numerics import DEFAULT_DTYPE, Tensor, relu, tanh

BACKBONE = "backbone"
PROJECTION_HEAD = "projection_head"
PREDICTOR = "predictor"
ROLES = (BACKBONE, PROJECTION_HEAD, PREDICTOR)

_ACTIVATIONS = {"relu": relu, "tanh": tanh}


class DescriptorMismatch(ValueError):
    """Two models (or a model and a record) disagree on architecture."""


class RecordError(ValueError):
    """A serialized parameter record is malformed or truncated."""


@dataclass(frozen=True)
class EncoderDescriptor:
    """Architecture of the encoder family.

    The backbone maps ``input_dim`` through ``hidden`` to ``embed_dim``.  The
    projection head and (optional) predictor are both
    ``embed_dim -> head_hidden -> embed_dim``.
    """

    input_dim: int
    hidden: tuple[int, ...] = (256, 256)
    embed_dim: int = 64
    head_hidden: int = 128
    predictor: bool = False
    bias: bool = True
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.embed_dim, self.head_hidden)
        if any(int(w) <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive: {widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_shapes(self) -> list[tuple[str, str, tuple[int, ...]]]:
        """(name, role, shape) for every parameter, in canonical order."""
        shapes = []

        def mlp(prefix, role, dims):
            for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
                shapes.append((f"{prefix}.{i}.weight", role, (fan_in, fan_out)))
                if self.bias:
                    shapes.append((f"{prefix}.{i}.bias", role, (fan_out,)))

        mlp("backbone", BACKBONE, (self.input_dim, *self.hidden, self.embed_dim))
        head_dims = (self.embed_dim, self.head_hidden, self.embed_dim)
        mlp("head", PROJECTION_HEAD, head_dims)
        if self.predictor:
            mlp("predictor", PREDICTOR, head_dims)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EncoderDescriptor:
        return cls(**{**d, "hidden": tuple(d.get("hidden", ()))})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class ModelParams:
    descriptor: EncoderDescriptor
    tensors: dict[str, Tensor]
    roles: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.roles:
            known = {n: r for n, r, _ in self.descriptor.layer_shapes()}
            self.roles = {n: known[n] for n in self.tensors}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def has_role(self, role: str) -> bool:
        return role in self.roles.values()

    def select(self, *roles: str) -> ModelParams:
        """A view holding only parameters with the given roles (tensors shared)."""
        keep = {n: t for n, t in self.tensors.items() if self.roles[n] in roles}
        return ModelParams(self.descriptor, keep, {n: self.roles[n] for n in keep})

    def copy(self, requires_grad: bool | None = None) -> ModelParams:
        out = {}
        for name, t in self.tensors.items():
            flag = t.requires_grad if requires_grad is None else requires_grad
            out[name] = Tensor(t.data.copy(), requires_grad=flag)
        return ModelParams(self.descriptor, out, dict(self.roles))

    def detached(self) -> ModelParams:
        return self.copy(requires_grad=False)

    def load_from(self, other: ModelParams) -> None:
        """Overwrite values in place with ``other``'s (names must match)."""
        for name, t in self.tensors.items():
            src = other.tensors[name].data
            if src.shape != t.shape:
                raise DescriptorMismatch(f"{name}: {src.shape} vs {t.shape}")
            t.data[...] = src

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def build_encoder(descriptor: EncoderDescriptor, seed: int, dtype=DEFAULT_DTYPE,
                  requires_grad: bool = True) -> ModelParams:
    """Initialise a model with seeded fan-in uniform weights and zero biases.

    Values are drawn in float64 and cast, so 32- and 64-bit builds from the
    same seed agree up to rounding.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    roles = {}
    for name, role, shape in descriptor.layer_shapes():
        if name.endswith(".weight"):
            bound = np.sqrt(6.0 / shape[0])
            values = rng.uniform(-bound, bound, size=shape)
        else:
            values = np.zeros(shape)
        tensors[name] = Tensor(values.astype(dtype), requires_grad=requires_grad)
        roles[name] = role
    return ModelParams(descriptor, tensors, roles)


def _mlp_forward(params: ModelParams, prefix: str, x: Tensor, n_layers: int) -> Tensor:
    act = _ACTIVATIONS[params.descriptor.activation]
    for i in range(n_layers):
        x = x @ params[f"{prefix}.{i}.weight"]
        if params.descriptor.bias:
            x = x + params[f"{prefix}.{i}.bias"]
        if i < n_layers - 1:
            x = act(x)
    return x


def embed(params: ModelParams, x, head: str = "none") -> Tensor:
    """Encode a batch.

    ``head`` is ``"none"`` for backbone output f(x), ``"projection"`` for
    h(f(x)) and ``"predictor"`` for g(f(x)).  Image batches are flattened.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim == 1 or data.shape[0] == 0:
        raise ValueError("embed expects a non-empty batch")
    data = data.reshape(data.shape[0], -1).astype(params.dtype, copy=False)
    d = params.descriptor
    if data.shape[1] != d.input_dim:
        raise DescriptorMismatch(f"input has {data.shape[1]} features, model expects {d.input_dim}")
    z = _mlp_forward(params, "backbone", Tensor(data), len(d.hidden) + 1)
    return apply_head(params, z, head)


def apply_head(params: ModelParams, z: Tensor, head: str) -> Tensor:
    """Run the projection head or predictor on existing backbone output."""
    if head == "none":
        return z
    prefix, role = {"projection": ("head", PROJECTION_HEAD),
                    "predictor": ("predictor", PREDICTOR)}.get(head, (None, None))
    if prefix is None:
        raise ValueError(f"unknown head {head!r}")
    if not params.has_role(role):
        raise ValueError(f"head {head!r} requested but the model has no {role}")
    return _mlp_forward(params, prefix, z, 2)


@dataclass
class EmaEncoder:
    """Shadow backbone updated as an exponential moving average."""

    shadow: ModelParams
    decay: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {self.decay}")

    @classmethod
    def from_model(cls, params: ModelParams, decay: float = 0.99) -> EmaEncoder:
        return cls(params.select(BACKBONE).detached(), decay)

    def copy(self) -> EmaEncoder:
        return EmaEncoder(self.shadow.copy(), self.decay)


def ema_update(ema: EmaEncoder, source: ModelParams) -> EmaEncoder:
    """shadow <- decay * shadow + (1 - decay) * source, for every backbone tensor."""
    keep = ema.decay
    for name, t in ema.shadow.items():
        src = source[name].data
        if src.shape != t.shape:
            raise DescriptorMismatch(f"EMA shape mismatch for {name}: {t.shape} vs {src.shape}")
        t.data[...] = keep * t.data + (1.0 - keep) * src
    return ema


# -- flat parameter records ------------------------------------------------------


@dataclass
class ParamRecord:
    """Flat, self-describing serialization of a :class:`ModelParams`."""

    manifest: dict
    payload: bytes


def export_params(params: ModelParams) -> ParamRecord:
    dtype = np.dtype(params.dtype).newbyteorder("<")
    entries = []
    chunks = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype=dtype).tobytes()
        entries.append({"name": name, "role": params.roles[name], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "descriptor": params.descriptor.to_dict(),
        "descriptor_hash": params.descriptor.digest(),
        "dtype": dtype.str,
        "entries": entries,
    }
    return ParamRecord(manifest, b"".join(chunks))


def import_params(record: ParamRecord, expected: EncoderDescriptor | None = None,
                  requires_grad: bool = False) -> ModelParams:
    """Rebuild a model from a record, validating it against its descriptor."""
    m = record.manifest
    try:
        descriptor = EncoderDescriptor.from_dict(m["descriptor"])
        entries = m["entries"]
        dtype = np.dtype(m["dtype"])
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordError(f"malformed manifest: {exc}") from exc
    if m.get("descriptor_hash") != descriptor.digest():
        raise DescriptorMismatch("descriptor hash does not match the descriptor")
    if expected is not None and expected != descriptor:
        raise DescriptorMismatch(f"record descriptor {descriptor} != expected {expected}")

    skeleton = {n: (r, s) for n, r, s in descriptor.layer_shapes()}
    names = [e["name"] for e in entries]
    missing = [n for n, (r, _) in skeleton.items() if r == BACKBONE and n not in names]
    if missing:
        raise RecordError(f"record lacks backbone parameters {missing}")
    tensors, roles = {}, {}
    cursor = 0
    for e in entries:
        name, shape = e["name"], tuple(e["shape"])
        if name not in skeleton or skeleton[name][1] != shape:
            want = skeleton.get(name, (None, "absent"))[1]
            raise DescriptorMismatch(f"{name}: manifest shape {shape}, descriptor {want}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if e["offset"] != cursor or e["nbytes"] != nbytes:
            raise RecordError(f"{name}: bad offset/size ({e['offset']}, {e['nbytes']}), "
                              f"expected ({cursor}, {nbytes})")
        if cursor + nbytes > len(record.payload):
            raise RecordError(f"payload truncated: {name} needs bytes {cursor}..{cursor + nbytes}, "
                              f"payload has {len(record.payload)}")
        arr = np.frombuffer(record.payload, dtype=dtype, count=nbytes // dtype.itemsize,
                            offset=cursor).reshape(shape)
        tensors[name] = Tensor(arr.astype(dtype.newbyteorder("="), copy=True),
                               requires_grad=requires_grad)
        roles[name] = skeleton[name][0]
        cursor += nbytes
    if cursor != len(record.payload):
        raise RecordError(f"payload has {len(record.payload) - cursor} trailing bytes")
    return ModelParams(descriptor, tensors, roles)
