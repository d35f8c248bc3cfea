"""Parameters, small MLPs, Adam and the flat binary checkpoint format."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import NonFiniteError, Tensor, as_tensor

MAGIC = b"DQL1"

ACTIVATIONS = ("relu", "gelu")


class ParameterSet:
    """Ordered name -> Tensor map. Each tensor carries its own ``.grad``."""

    def __init__(self, params=None):
        self._params: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def update(self, other, prefix=""):
        for name, t in other.items():
            self._params[prefix + name] = t

    def state(self):
        """Copy of the parameter values as plain arrays."""
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state, strict=True):
        for name, p in self._params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r} in state")
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def checksum(self):
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def subset(self, prefix):
        out = ParameterSet()
        for name, t in self._params.items():
            if name.startswith(prefix):
                out._params[name] = t
        return out


def init_linear(params, name, n_in, n_out, rng, scale=None):
    """He-normal weights and zero bias, registered as ``name.weight``/``name.bias``."""
    std = np.sqrt(2.0 / n_in) if scale is None else scale
    params.add(f"{name}.weight", rng.normal(0.0, std, size=(n_in, n_out)))
    params.add(f"{name}.bias", np.zeros(n_out))


def linear(params, name, x):
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def activate(x, kind):
    if kind == "relu":
        return x.relu()
    if kind == "gelu":
        return x.gelu()
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[in, hidden..., out]`` and one activation per hidden layer."""

    widths: tuple
    activations: tuple = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        acts = tuple(self.activations) or ("relu",) * (len(widths) - 2)
        if len(acts) != len(widths) - 2:
            raise ValueError("need exactly one activation per hidden layer")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self):
        return len(self.widths) - 1


class Mlp:
    def __init__(self, spec: MlpSpec, seed=0, params=None, prefix="fc"):
        self.spec = spec
        self.prefix = prefix
        self.params = ParameterSet() if params is None else params
        rng = np.random.default_rng(seed)
        for i in range(spec.n_layers):
            init_linear(self.params, f"{prefix}{i}", spec.widths[i], spec.widths[i + 1], rng)

    def __call__(self, x):
        return forward(self, x)


def forward(net: Mlp, x) -> Tensor:
    """Run ``x`` (..., in) through the MLP; the last layer is linear."""
    x = as_tensor(x)
    if x.shape[-1] != net.spec.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} != first layer width {net.spec.widths[0]}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("non-finite network input")
    h = x
    for i in range(net.spec.n_layers):
        h = linear(net.params, f"{net.prefix}{i}", h)
        if i < net.spec.n_layers - 1:
            h = activate(h, net.spec.activations[i])
    return h


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterSet, state: AdamState):
    """One bias-corrected Adam update with L2 weight decay added to the gradient."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        new = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"Adam update produced non-finite values in {name!r}")
        p.data = new
    return params


def adam_state_arrays(state: AdamState, prefix="adam"):
    """Flatten optimizer state into checkpoint-friendly arrays."""
    out = {f"{prefix}.step": np.array([float(state.step)])}
    for name, m in state.m.items():
        out[f"{prefix}.m.{name}"] = m
        out[f"{prefix}.v.{name}"] = state.v[name]
    return out


def restore_adam_state(state: AdamState, arrays, prefix="adam"):
    state.step = int(arrays[f"{prefix}.step"][0])
    state.m, state.v = {}, {}
    for key, arr in arrays.items():
        if key.startswith(f"{prefix}.m."):
            state.m[key[len(prefix) + 3 :]] = np.array(arr)
        elif key.startswith(f"{prefix}.v."):
            state.v[key[len(prefix) + 3 :]] = np.array(arr)
    return state


# -- checkpoint ------------------------------------------------------------


def save_checkpoint(path, arrays):
    """Write ``{name: array}`` as: magic, then per entry
    u32 name length, name bytes, u32 rank, u64 dims, f64 LE values."""
    buf = bytearray(MAGIC)
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(buf))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError("not a DQL1 checkpoint")
    pos = 4
    out = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(data):
                raise CheckpointError(f"truncated values for {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return out
