"""Dense MLPs with hand-written reverse-mode gradients, a diagonal Gaussian
action head, Adam, and flat-blob parameter serialization.

Everything operates on plain numpy arrays. Inputs may be a single vector
``(in_dim,)`` or a batch ``(B, in_dim)``; gradients are summed over the batch.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation, TrainingDivergence

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0

_ACTIVATIONS = ("tanh", "identity")


@dataclass
class MlpParams:
    weights: List[np.ndarray]  # each (in, out)
    biases: List[np.ndarray]  # each (out,)
    activations: List[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ContractViolation("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ContractViolation(f"layer {i}: weight {w.shape} and bias {b.shape} do not fit")
            if act not in _ACTIVATIONS:
                raise ContractViolation(f"layer {i}: unknown activation {act!r}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ContractViolation(
                    f"layer {i} expects {w.shape[0]} inputs but layer {i - 1} emits "
                    f"{self.weights[i - 1].shape[1]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def tensors(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def tensor_names(self, prefix: str) -> List[str]:
        names = []
        for i in range(len(self.weights)):
            names.extend((f"{prefix}.l{i}.weight", f"{prefix}.l{i}.bias"))
        return names

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            list(self.activations),
        )

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations)
        )

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            list(self.activations),
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    hidden_gain: float = math.sqrt(2.0),
    output_gain: float = 1.0,
    dtype=np.float64,
) -> MlpParams:
    """Orthogonal init with tanh hidden layers and a linear output layer."""
    weights, biases, acts = [], [], []
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        gain = output_gain if i == n_layers - 1 else hidden_gain
        a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        w = q if fan_in >= fan_out else q.T
        weights.append((gain * w[:fan_in, :fan_out]).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
        acts.append("identity" if i == n_layers - 1 else "tanh")
    return MlpParams(weights, biases, acts)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != params.in_dim or x.ndim not in (1, 2):
        raise ContractViolation(f"MLP expects input width {params.in_dim}, got shape {x.shape}")
    return x.astype(params.dtype, copy=False)


def mlp_forward_cached(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Forward pass returning the output and the per-layer inputs/activations."""
    h = _check_input(params, x)
    cache = [h]
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = h @ w + b
        if act == "tanh":
            h = np.tanh(h)
        cache.append(h)
    return h, cache


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward_cached(params, x)[0]


def mlp_backward(
    params: MlpParams,
    x: np.ndarray,
    output_grad: np.ndarray,
    cache: Optional[List[np.ndarray]] = None,
) -> Tuple[MlpParams, np.ndarray]:
    """Gradients of ``sum(output * output_grad)`` w.r.t. every parameter and the input.

    Pass the ``cache`` from :func:`mlp_forward_cached` to skip recomputing the
    forward pass.
    """
    if cache is None:
        _, cache = mlp_forward_cached(params, x)
    g = np.asarray(output_grad, dtype=params.dtype)
    if g.shape != cache[-1].shape:
        raise ContractViolation(
            f"output_grad shape {g.shape} does not match output shape {cache[-1].shape}"
        )
    batched = g.ndim == 2
    n = len(params.weights)
    gw: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        if params.activations[i] == "tanh":
            g = g * (1.0 - cache[i + 1] ** 2)
        h_in = cache[i]
        if batched:
            gw[i] = h_in.T @ g
            gb[i] = g.sum(axis=0)
        else:
            gw[i] = np.outer(h_in, g)
            gb[i] = g.copy()
        g = g @ params.weights[i].T
    return MlpParams(gw, gb, list(params.activations)), g


# ---------------------------------------------------------------------------
# Diagonal Gaussian head


@dataclass
class GaussianHead:
    mean: np.ndarray  # (..., d)
    log_std: np.ndarray  # (d,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean)
        self.log_std = np.clip(np.asarray(self.log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)
        if self.mean.shape[-1] != self.log_std.shape[-1]:
            raise ContractViolation(
                f"mean width {self.mean.shape[-1]} != log_std width {self.log_std.shape[-1]}"
            )

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def gaussian_log_prob(head: GaussianHead, action: np.ndarray) -> np.ndarray:
    """Sum over the last axis of the per-dimension normal log-densities."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != head.mean.shape[-1]:
        raise ContractViolation(
            f"action width {action.shape[-1]} != mean width {head.mean.shape[-1]}"
        )
    z = (action - head.mean) / head.std
    return np.sum(-0.5 * z * z - head.log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_sample(head: GaussianHead, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    z = rng.standard_normal(np.shape(head.mean))
    action = head.mean + head.std * z
    return action, gaussian_log_prob(head, action)


def gaussian_entropy(head: GaussianHead) -> float:
    return float(np.sum(head.log_std + 0.5 * (LOG_2PI + 1.0)))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(
    state: AdamState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    names: Optional[Sequence[str]] = None,
) -> Tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam descent step, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation("params, grads and Adam moments must have the same length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ContractViolation(f"tensor {i}: param {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names is not None else f"tensor[{i}]"
            raise TrainingDivergence(f"non-finite gradient in {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Serialization: little-endian float32 blob plus a JSON manifest


def pack_tensors(named: Dict[str, np.ndarray]) -> Tuple[bytes, List[dict]]:
    chunks, entries, offset = [], [], 0
    for name, arr in named.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    return b"".join(chunks), entries


def unpack_tensors(blob: bytes, entries: List[dict]) -> Dict[str, np.ndarray]:
    out = {}
    for e in entries:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ContractViolation(f"blob truncated while reading {e['name']}")
        out[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float64)
    return out


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save_tensors(
    blob_path: os.PathLike, named: Dict[str, np.ndarray], extra: Optional[dict] = None
) -> dict:
    """Write ``<blob_path>`` and ``<blob_path>.json``; returns the manifest."""
    blob_path = Path(blob_path)
    blob, entries = pack_tensors(named)
    manifest = dict(extra or {})
    manifest["tensors"] = entries
    manifest["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    manifest["dtype"] = "float32-le"
    _atomic_write(blob_path, blob)
    _atomic_write(
        blob_path.with_name(blob_path.name + ".json"),
        (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"),
    )
    return manifest


def load_tensors(blob_path: os.PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    blob_path = Path(blob_path)
    manifest = json.loads(blob_path.with_name(blob_path.name + ".json").read_text("utf-8"))
    blob = blob_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise ContractViolation(f"{blob_path}: blob hash does not match its manifest")
    return unpack_tensors(blob, manifest["tensors"]), manifest


@dataclass
class GaussianPolicyNet:
    """An MLP mean network with a state-independent log-std vector."""

    mlp: MlpParams
    log_std: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.log_std is None:
            self.log_std = np.zeros(self.mlp.out_dim, dtype=np.float64)

    def head(self, x: np.ndarray) -> GaussianHead:
        return GaussianHead(mlp_forward(self.mlp, x), self.log_std)

    def tensors(self) -> List[np.ndarray]:
        return self.mlp.tensors() + [self.log_std]

    def tensor_names(self, prefix: str) -> List[str]:
        return self.mlp.tensor_names(prefix) + [f"{prefix}.log_std"]

    def project(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)
