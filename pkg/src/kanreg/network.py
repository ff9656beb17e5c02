"""Chebyshev KAN layers and the displacement model built from them."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .chebyshev import BasisConfig, DegreeSet, basis, full_degree_set, sample_degree_set
from .diffcore import Dual, value_of

__all__ = [
    "KanLayer",
    "KanModel",
    "AdaptiveBasisState",
    "FrozenStateError",
    "init_model",
    "layer_forward",
    "adaptive_layer_forward",
    "model_forward",
    "adaptive_schedule_update",
    "update_adaptive_schedule",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
    "DEFAULT_WIDTHS",
]

DEFAULT_WIDTHS = (3, 70, 70, 3)
NOISE_START = 0.3
FREEZE_FRACTION = 0.75
CHECKPOINT_MAGIC = b"KANR"
CHECKPOINT_VERSION = 1


class FrozenStateError(RuntimeError):
    """Raised when a frozen adaptive basis state is modified."""


@dataclass
class AdaptiveBasisState:
    """Noisy top-k basis selection driven by an MLP of a fixed latent vector.

    ``w = mlp(z)`` holds one raw weight per degree 1..K.  Degree 0 is always
    active and never weighted.
    """

    z: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    k: int
    K: int
    noise_std: float = NOISE_START
    frozen: bool = False
    frozen_weights: np.ndarray | None = None
    frozen_selection: np.ndarray | None = None

    MLP_NAMES = ("w1", "b1", "w2", "b2")

    @classmethod
    def create(cls, k: int, K: int, rng: np.random.Generator, dtype=np.float64):
        hidden = 2 * K
        z = rng.standard_normal(K)
        a1, a2 = 1.0 / np.sqrt(K), 1.0 / np.sqrt(hidden)
        return cls(
            z=z.astype(dtype),
            w1=rng.uniform(-a1, a1, (K, hidden)).astype(dtype),
            b1=rng.uniform(-a1, a1, hidden).astype(dtype),
            w2=rng.uniform(-a2, a2, (hidden, K)).astype(dtype),
            b2=rng.uniform(-a2, a2, K).astype(dtype),
            k=k,
            K=K,
        )

    def mlp_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.MLP_NAMES}

    def assign(self, name: str, value: np.ndarray) -> None:
        if self.frozen:
            raise FrozenStateError(f"adaptive basis state is frozen; cannot set {name}")
        if name not in self.MLP_NAMES:
            raise KeyError(name)
        setattr(self, name, np.asarray(value))

    def raw_weights(self, params: dict | None = None):
        """w = mlp(z) with a tanh hidden layer; nodes if ``params`` are nodes."""
        if self.frozen:
            return self.frozen_weights
        p = self.mlp_arrays() if params is None else params
        h = dc.tanh(dc.add(dc.matmul(self.z[None, :], p["w1"]), p["b1"]))
        return dc.reshape(dc.add(dc.matmul(h, p["w2"]), p["b2"]), (self.K,))

    def select(self, w_values: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Zero-based indices into 1..K of the top-k noisy weights, ascending.

        Ties go to the lowest index.  No noise is drawn without ``rng``.
        """
        if self.frozen:
            return self.frozen_selection
        noisy = np.asarray(w_values, dtype=np.float64)
        if rng is not None and self.noise_std > 0:
            noisy = noisy + rng.normal(0.0, self.noise_std, size=noisy.shape)
        order = np.argsort(-noisy, kind="stable")
        return np.sort(order[: self.k])

    def freeze(self) -> None:
        if self.frozen:
            return
        w = np.array(value_of(self.raw_weights()))
        sel = self.select(w)
        self.noise_std = 0.0
        self.frozen_weights = w
        self.frozen_selection = sel
        for arr in (w, sel, *self.mlp_arrays().values()):
            arr.flags.writeable = False
        self.frozen = True


@dataclass
class KanLayer:
    """coeffs[i, o, d] over ``degrees``; skip[o, i] acts on silu(x)."""

    coeffs: np.ndarray
    skip: np.ndarray
    degrees: DegreeSet
    adaptive: AdaptiveBasisState | None = None

    def __post_init__(self):
        if self.coeffs.ndim != 3 or self.coeffs.shape[2] != len(self.degrees):
            raise ValueError(
                f"coeffs shape {self.coeffs.shape} does not match {len(self.degrees)} degrees"
            )
        if self.skip.shape != (self.coeffs.shape[1], self.coeffs.shape[0]):
            raise ValueError(f"skip shape {self.skip.shape} vs coeffs {self.coeffs.shape}")

    @property
    def in_dim(self) -> int:
        return self.coeffs.shape[0]

    @property
    def out_dim(self) -> int:
        return self.coeffs.shape[1]


@dataclass
class KanModel:
    layers: list[KanLayer]
    config: BasisConfig
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers[0].in_dim != 3 or self.layers[-1].out_dim != 3:
            raise ValueError("model must map R^3 to R^3")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.layers[0].in_dim,) + tuple(layer.out_dim for layer in self.layers)

    @property
    def dtype(self):
        return self.layers[0].coeffs.dtype

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Currently trainable arrays; frozen adaptive MLPs are left out."""
        out = {}
        for m, layer in enumerate(self.layers):
            out[f"layers.{m}.coeffs"] = layer.coeffs
            out[f"layers.{m}.skip"] = layer.skip
            st = layer.adaptive
            if st is not None and not st.frozen:
                for name, arr in st.mlp_arrays().items():
                    out[f"layers.{m}.mlp.{name}"] = arr
        return out

    def basis_sizes(self) -> list[int]:
        """Basis functions evaluated per input in each layer."""
        return [
            layer.adaptive.k + 1 if layer.adaptive is not None else len(layer.degrees)
            for layer in self.layers
        ]


def parameter_count(model: KanModel) -> int:
    return int(sum(a.size for a in model.named_parameters().values()))


def init_model(
    config: BasisConfig,
    widths=DEFAULT_WIDTHS,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    dtype=np.float64,
    zero_head: bool = True,
) -> KanModel:
    """Fresh model; with ``zero_head`` the last layer is zero so U starts at 0."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"invalid widths {widths}")
    if widths[0] != 3 or widths[-1] != 3:
        raise ValueError(f"widths must start and end with 3, got {widths}")
    if rng is None:
        rng = np.random.default_rng(seed)
    layers = []
    n_layers = len(widths) - 1
    for m, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        state = None
        if config.mode == "fixed":
            degrees = full_degree_set(config.D)
        elif config.mode == "randomized":
            degrees = sample_degree_set(config.k, config.K, rng)
        else:
            degrees = full_degree_set(config.K)
            state = AdaptiveBasisState.create(config.k, config.K, rng, dtype)
        n = config.k + 1 if config.mode == "adaptive" else len(degrees)
        scale = 1.0 / (fan_in * n)
        bound = 1.0 / np.sqrt(fan_in)
        coeffs = rng.uniform(-scale, scale, (fan_in, fan_out, len(degrees)))
        skip = rng.uniform(-bound, bound, (fan_out, fan_in))
        if zero_head and m == n_layers - 1:
            coeffs[:] = 0.0
            skip[:] = 0.0
        layers.append(KanLayer(coeffs.astype(dtype), skip.astype(dtype), degrees, state))
    return KanModel(layers, config, seed)


def _kan_transform(x, coeffs, skip, degrees):
    """sum_i W[o,i] silu(x_i) + sum_{i,d} T_d(tanh x_i) C[i,o,d]."""
    shape = value_of(x).shape
    in_dim, out_dim, n = value_of(coeffs).shape
    if shape[-1] != in_dim:
        raise ValueError(f"layer expects input width {in_dim}, got {shape[-1]}")
    lead = shape[:-1]
    linear = dc.matmul(dc.silu(x), dc.transpose(skip))
    T = basis(dc.tanh(x), degrees)
    flat = dc.reshape(T, lead + (in_dim * n,))
    cmat = dc.reshape(dc.transpose(coeffs, (0, 2, 1)), (in_dim * n, out_dim))
    return dc.add(linear, dc.matmul(flat, cmat))


def _layer_params(layer: KanLayer, m: int, params: dict | None):
    if params is None:
        return layer.coeffs, layer.skip, None
    mlp = {name: params[f"layers.{m}.mlp.{name}"] for name in AdaptiveBasisState.MLP_NAMES
           if f"layers.{m}.mlp.{name}" in params}
    return params[f"layers.{m}.coeffs"], params[f"layers.{m}.skip"], (mlp or None)


def layer_forward(layer: KanLayer, x, coeffs=None, skip=None):
    """One fixed-basis layer; ``coeffs``/``skip`` override the stored arrays."""
    if layer.adaptive is not None:
        raise ValueError("use adaptive_layer_forward for adaptive layers")
    c = layer.coeffs if coeffs is None else coeffs
    w = layer.skip if skip is None else skip
    return _kan_transform(x, c, w, layer.degrees)


def adaptive_layer_forward(
    layer: KanLayer,
    state: AdaptiveBasisState,
    x,
    coeffs=None,
    skip=None,
    mlp: dict | None = None,
    rng: np.random.Generator | None = None,
):
    """Layer restricted to {0} plus the noisy top-k degrees, weighted by sigmoid(w_d)."""
    if state.frozen and mlp:
        raise FrozenStateError("frozen adaptive state received trainable MLP parameters")
    c = layer.coeffs if coeffs is None else coeffs
    w_skip = layer.skip if skip is None else skip
    w = state.raw_weights(mlp)
    sel = state.select(value_of(w), rng)
    one = np.ones(1, dtype=value_of(c).dtype)
    scale = dc.concat([one, dc.sigmoid(dc.take(w, sel, 0))], axis=0)
    active = np.concatenate([[0], sel + 1])
    c_active = dc.mul(dc.take(c, active, 2), scale)
    degrees = DegreeSet(tuple(int(d) for d in active))
    return _kan_transform(x, c_active, w_skip, degrees)


def model_forward(model: KanModel, x, params: dict | None = None, rng=None):
    """Displacement U(x) for points of shape (..., 3); pass a Dual for tangents."""
    h = x
    for m, layer in enumerate(model.layers):
        c, w, mlp = _layer_params(layer, m, params)
        if layer.adaptive is not None:
            h = adaptive_layer_forward(layer, layer.adaptive, h, c, w, mlp, rng)
        else:
            h = _kan_transform(h, c, w, layer.degrees)
    return h


def adaptive_schedule_update(state: AdaptiveBasisState, iteration: int, total: int):
    """Linear noise decay from 0.3 to 0 at 75% of the run, then freeze."""
    if not 0 <= iteration < total:
        raise ValueError(f"iteration {iteration} outside [0, {total})")
    freeze_at = FREEZE_FRACTION * total
    if state.frozen:
        return state
    state.noise_std = NOISE_START * max(0.0, 1.0 - iteration / freeze_at)
    if iteration >= freeze_at:
        state.freeze()
    return state


def update_adaptive_schedule(model: KanModel, iteration: int, total: int) -> None:
    for layer in model.layers:
        if layer.adaptive is not None:
            adaptive_schedule_update(layer.adaptive, iteration, total)


# --------------------------------------------------------------------------
# checkpoint container: magic, u32 version, u32 header length, JSON header,
# little-endian float64 payload in header order


def _layer_arrays(layer: KanLayer) -> list[tuple[str, np.ndarray]]:
    arrays = [("coeffs", layer.coeffs), ("skip", layer.skip)]
    st = layer.adaptive
    if st is not None:
        arrays.append(("z", st.z))
        arrays.extend(st.mlp_arrays().items())
        if st.frozen:
            arrays.append(("frozen_weights", st.frozen_weights))
    return arrays


def save_checkpoint(model: KanModel, path) -> None:
    header = {
        "widths": list(model.widths),
        "basis": model.config.to_dict(),
        "seed": model.seed,
        "dtype": np.dtype(model.dtype).name,
        "layers": [],
    }
    payload = []
    for layer in model.layers:
        entry = {"degrees": list(layer.degrees), "arrays": []}
        for name, arr in _layer_arrays(layer):
            entry["arrays"].append({"name": name, "shape": list(arr.shape)})
            payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        st = layer.adaptive
        if st is not None:
            entry["adaptive"] = {
                "k": st.k,
                "K": st.K,
                "noise_std": st.noise_std,
                "frozen": st.frozen,
                "selection": None if st.frozen_selection is None else st.frozen_selection.tolist(),
            }
        header["layers"].append(entry)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path) -> KanModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a KANR checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    dtype = np.dtype(header["dtype"])
    offset = 12 + hlen
    layers = []
    for entry in header["layers"]:
        arrays = {}
        for spec in entry["arrays"]:
            n = int(np.prod(spec["shape"], dtype=np.int64))
            end = offset + 8 * n
            if end > len(raw):
                raise ValueError(f"{path}: truncated payload")
            arrays[spec["name"]] = (
                np.frombuffer(raw[offset:end], dtype="<f8").reshape(spec["shape"]).astype(dtype)
            )
            offset = end
        state = None
        if "adaptive" in entry:
            a = entry["adaptive"]
            state = AdaptiveBasisState(
                z=arrays["z"], w1=arrays["w1"], b1=arrays["b1"], w2=arrays["w2"],
                b2=arrays["b2"], k=a["k"], K=a["K"], noise_std=a["noise_std"],
            )
            if a["frozen"]:
                state.frozen_weights = arrays["frozen_weights"]
                state.frozen_selection = np.asarray(a["selection"], dtype=np.int64)
                for arr in (state.frozen_weights, state.frozen_selection, *state.mlp_arrays().values()):
                    arr.flags.writeable = False
                state.frozen = True
        layers.append(
            KanLayer(arrays["coeffs"], arrays["skip"], DegreeSet(tuple(entry["degrees"])), state)
        )
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return KanModel(layers, BasisConfig(**header["basis"]), header["seed"])
