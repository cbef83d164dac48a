"""Minimal MLP substrate: forward pass, hand-derived reverse-mode gradients,
Adam updates, soft target replacement, and a versioned binary checkpoint
container.

Everything is float64 and deterministic. Gradients are exact for the fixed
affine+ReLU topology; there is no general autodiff graph.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    """Unreadable or version-incompatible checkpoint data."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)


@dataclass
class ParamSet:
    """Per-layer weight matrices (fan_in, fan_out) and bias vectors."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamSet:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)); biases zero."""
    weights, biases = [], []
    dims = spec.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ParamSet(spec, weights, biases)


def zeros_like_params(params: ParamSet) -> ParamSet:
    return ParamSet(
        params.spec,
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


def _check_input(params: ParamSet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.spec.input_dim:
        raise ShapeError(
            f"input must have trailing dim {params.spec.input_dim}, got shape {x.shape}"
        )
    return x


def forward(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Affine + ReLU stack with identity output; accepts (in,) or (batch, in)."""
    x = _check_input(params, x)
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h


def forward_cached(params: ParamSet, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass returning (output, per-layer post-activation cache).

    The cache starts with the (batched) input and can be handed to
    `backward` to skip the internal forward recomputation.
    """
    x = _check_input(params, x)
    xb = x[None, :] if x.ndim == 1 else x
    acts = [xb]
    h = xb
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return (h[0] if x.ndim == 1 else h), acts


def backward(
    params: ParamSet,
    x: np.ndarray,
    upstream: np.ndarray,
    acts: list[np.ndarray] | None = None,
) -> tuple[ParamSet, np.ndarray]:
    """Exact gradients of sum(upstream * forward(x)) w.r.t. params and input.

    Batched inputs sum gradients over the batch; scale `upstream` by 1/batch
    for mean losses. Pass the cache from `forward_cached` to reuse its
    activations.
    """
    x = _check_input(params, x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    up = np.asarray(upstream, dtype=np.float64)
    up = up[None, :] if single else up
    if up.shape != (xb.shape[0], params.spec.output_dim):
        raise ShapeError(
            f"upstream must have shape {(xb.shape[0], params.spec.output_dim)}, got {up.shape}"
        )

    last = len(params.weights) - 1
    if acts is None:
        _, acts = forward_cached(params, xb)

    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = up
    for i in reversed(range(n_layers)):
        if i != last:
            delta = delta * (acts[i + 1] > 0.0)  # ReLU mask; subgradient 0 at 0
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
    input_grad = delta[0] if single else delta
    return ParamSet(params.spec, gw, gb), input_grad


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adam_init(params: ParamSet) -> AdamState:
    arrays = params.arrays()
    return AdamState([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float) -> tuple[ParamSet, AdamState]:
    """In-place Adam update with bias correction; eps added outside the sqrt."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape}")
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


def soft_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    """target <- tau * online + (1 - tau) * target, elementwise, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    for t, o in zip(target.arrays(), online.arrays()):
        if t.shape != o.shape:
            raise ShapeError(f"target shape {t.shape} != online shape {o.shape}")
        t[...] = tau * o + (1.0 - tau) * t
    return target


def flatten(params: ParamSet) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def unflatten(spec: MlpSpec, flat: np.ndarray) -> ParamSet:
    flat = np.asarray(flat, dtype=np.float64)
    params = init_params(spec, np.random.default_rng(0))
    pos = 0
    for a in params.arrays():
        n = a.size
        if pos + n > flat.size:
            raise ShapeError("flat vector too short for spec")
        a[...] = flat[pos : pos + n].reshape(a.shape)
        pos += n
    if pos != flat.size:
        raise ShapeError(f"flat vector has {flat.size} values, spec needs {pos}")
    return params


# ---------------------------------------------------------------------------
# Versioned binary container: shared by network, optimizer, and buffer
# checkpoints. Sections carry a name, a JSON meta header, and a raw payload.
# All integers little-endian; float payloads are little-endian float64.

_MAGIC = b"NNC1"
CONTAINER_VERSION = 1


def write_container(path, sections: list[tuple[str, dict, bytes]]) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", CONTAINER_VERSION, len(sections)))
        for name, meta, payload in sections:
            name_b = name.encode()
            meta_b = json.dumps(meta, sort_keys=True).encode()
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", len(meta_b)))
            f.write(meta_b)
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def read_container(path) -> list[tuple[str, dict, bytes]]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if data[:4] != _MAGIC:
        raise CheckpointError("bad magic: not a checkpoint container")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CONTAINER_VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        pos = 12
        sections = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode()
            pos += name_len
            (meta_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            meta = json.loads(data[pos : pos + meta_len])
            pos += meta_len
            (payload_len,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            payload = data[pos : pos + payload_len]
            if len(payload) != payload_len:
                raise CheckpointError("truncated section payload")
            pos += payload_len
            sections.append((name, meta, payload))
        return sections
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint container: {exc}") from exc


def params_section(name: str, params: ParamSet) -> tuple[str, dict, bytes]:
    spec = params.spec
    meta = {
        "kind": "mlp_params",
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "output_dim": spec.output_dim,
    }
    return name, meta, flatten(params).astype("<f8").tobytes()


def params_from_section(meta: dict, payload: bytes) -> ParamSet:
    if meta.get("kind") != "mlp_params":
        raise CheckpointError(f"section is not mlp_params: {meta}")
    spec = MlpSpec(meta["input_dim"], tuple(meta["hidden_dims"]), meta["output_dim"])
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return unflatten(spec, flat)


def adam_section(name: str, state: AdamState) -> tuple[str, dict, bytes]:
    flat_m = np.concatenate([a.ravel() for a in state.m])
    flat_v = np.concatenate([a.ravel() for a in state.v])
    meta = {"kind": "adam_state", "t": state.t, "n": int(flat_m.size)}
    return name, meta, np.concatenate([flat_m, flat_v]).astype("<f8").tobytes()


def adam_from_section(meta: dict, payload: bytes, params: ParamSet) -> AdamState:
    if meta.get("kind") != "adam_state":
        raise CheckpointError(f"section is not adam_state: {meta}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    n = meta["n"]
    if flat.size != 2 * n:
        raise CheckpointError("adam payload size mismatch")
    state = adam_init(params)
    pos = 0
    for part in (state.m, state.v):
        for a in part:
            a[...] = flat[pos : pos + a.size].reshape(a.shape)
            pos += a.size
    state.t = int(meta["t"])
    return state
