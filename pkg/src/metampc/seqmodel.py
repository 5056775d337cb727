"""History-conditioned derivative model: GRU encoder plus a two-layer head.

The model reads a window of ``n + 1`` (v_x, v_y, omega, d, delta_cmd) samples,
oldest first, from a zero hidden state, appends optional auxiliary features
to the final hidden state, and predicts (dv_x, dv_y, domega) in SI units/s.

Weights may carry a leading member axis, in which case every function
evaluates all members at once on shared inputs (that is how ensembles are
trained and rolled out).  :func:`loss_and_grad` backpropagates through time
by hand; :func:`forward` also accepts :class:`~metampc.autodiff.Tensor`
weights, which is what the second-order meta-gradient differentiates.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import autodiff as ad

CELL = "gru"
FORMAT_VERSION = 1
STATE_SCALE = np.array([1 / 5, 1 / 5, 1 / 3])
INPUT_SCALE = np.concatenate([STATE_SCALE, [1.0, 1.0]])
INPUT_DIM = 5
OUTPUT_DIM = 3
PARAM_NAMES = ("W_x", "W_h", "b_x", "b_h", "W_1", "b_1", "W_2", "b_2")


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    n: int = 10
    dt: float = 0.05
    hidden_size: int = 32
    head_size: int = 32
    aux_size: int = 0

    @property
    def window_length(self) -> int:
        return self.n + 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        H, F, L = self.hidden_size, self.head_size, self.aux_size
        return {
            "W_x": (INPUT_DIM, 3 * H),
            "W_h": (H, 3 * H),
            "b_x": (1, 3 * H),
            "b_h": (1, 3 * H),
            "W_1": (H + L, F),
            "b_1": (1, F),
            "W_2": (F, OUTPUT_DIM),
            "b_2": (1, OUTPUT_DIM),
        }

    def fan_in(self) -> dict[str, int]:
        H, F, L = self.hidden_size, self.head_size, self.aux_size
        return {"W_x": H, "W_h": H, "b_x": H, "b_h": H, "W_1": H + L, "b_1": H + L, "W_2": F, "b_2": F}


@dataclasses.dataclass
class ModelWeights:
    """Parameter arrays keyed by name, optionally stacked along axis 0."""

    params: dict
    config: ModelConfig

    @property
    def members(self) -> int | None:
        extra = self.params["W_x"].ndim - 2
        return self.params["W_x"].shape[0] if extra else None

    @property
    def dtype(self):
        return self.params["W_x"].dtype

    def __getitem__(self, name):
        return self.params[name]

    def map(self, fn) -> "ModelWeights":
        return ModelWeights({k: fn(v) for k, v in self.params.items()}, self.config)

    def zip_map(self, other: "ModelWeights", fn) -> "ModelWeights":
        return ModelWeights({k: fn(v, other.params[k]) for k, v in self.params.items()}, self.config)

    def copy(self) -> "ModelWeights":
        return self.map(np.array)

    def astype(self, dtype) -> "ModelWeights":
        return self.map(lambda a: a.astype(dtype))

    def axpy(self, alpha, other: "ModelWeights") -> "ModelWeights":
        """``self + alpha * other`` (alpha may be per-member, shape (members,))."""
        alpha = np.asarray(alpha, dtype=float)

        def step(a, b):
            scale = alpha.reshape(alpha.shape + (1,) * (a.ndim - alpha.ndim)) if alpha.ndim else alpha
            return a + scale * b

        return self.zip_map(other, step)

    def flat(self) -> np.ndarray:
        """Concatenate all parameters (per member when stacked)."""
        if self.members is None:
            return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])
        return np.concatenate([self.params[k].reshape(self.members, -1) for k in PARAM_NAMES], axis=1)

    def norm(self) -> np.ndarray | float:
        flat = self.flat()
        return np.linalg.norm(flat, axis=-1) if flat.ndim > 1 else float(np.linalg.norm(flat))

    def member(self, i: int) -> "ModelWeights":
        return self.map(lambda a: np.array(a[i]))

    @staticmethod
    def stack(weights: list["ModelWeights"]) -> "ModelWeights":
        config = weights[0].config
        return ModelWeights({k: np.stack([w.params[k] for w in weights]) for k in PARAM_NAMES}, config)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())


def init_weights(config: ModelConfig, rng: np.random.Generator, members: int | None = None) -> ModelWeights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation, drawn per tensor in a fixed order."""
    lead = () if members is None else (members,)
    fan_in = config.fan_in()
    params = {}
    for name, shape in config.shapes().items():
        bound = 1.0 / np.sqrt(fan_in[name])
        params[name] = rng.uniform(-bound, bound, size=lead + shape)
    return ModelWeights(params, config)


def zeros_like(weights: ModelWeights) -> ModelWeights:
    return weights.map(np.zeros_like)


def standardize(windows):
    return np.asarray(windows) * INPUT_SCALE


def destandardize(scaled):
    return np.asarray(scaled) / INPUT_SCALE


def _check_inputs(config: ModelConfig, windows, aux):
    windows = np.asarray(windows)
    if windows.ndim < 2:
        raise ValueError("window must have shape (n+1, 5) or (batch, n+1, 5)")
    if windows.shape[-1] != INPUT_DIM:
        raise ValueError(f"window feature dimension is {windows.shape[-1]}, expected {INPUT_DIM}")
    if windows.shape[-2] != config.window_length:
        raise ValueError(f"window length is {windows.shape[-2]}, expected n+1={config.window_length}")
    if config.aux_size:
        if aux is None:
            raise ValueError(f"aux features of size {config.aux_size} are required")
        aux = np.asarray(aux, dtype=float)
        if aux.shape[-1] != config.aux_size:
            raise ValueError(f"aux size is {aux.shape[-1]}, expected L={config.aux_size}")
        aux = np.broadcast_to(aux, windows.shape[:-2] + (config.aux_size,))
    elif aux is not None and np.size(aux):
        raise ValueError("model was configured with aux_size=0 but aux features were given")
    else:
        aux = None
    return windows, aux


def _forward_core(p, scaled, aux, hidden_size, cache=None):
    """Shared forward pass; ``p`` holds ndarrays or autodiff tensors."""
    H = hidden_size
    h = None
    for t in range(scaled.shape[-2]):
        x_t = scaled[..., t, :]
        a = x_t @ p["W_x"] + p["b_x"]
        if h is None:
            c = p["b_h"]
            h_prev = 0.0
        else:
            c = h @ p["W_h"] + p["b_h"]
            h_prev = h
        r = ad.sigmoid(a[..., :H] + c[..., :H])
        z = ad.sigmoid(a[..., H:2 * H] + c[..., H:2 * H])
        cand = ad.tanh(a[..., 2 * H:] + r * c[..., 2 * H:])
        h = (1.0 - z) * cand + z * h_prev
        if cache is not None:
            cache.append((x_t, h_prev, c, r, z, cand))
    if aux is not None:
        aux = np.broadcast_to(aux, tuple(h.shape[:-1]) + (aux.shape[-1],))
    encoded = h if aux is None else ad.concat([h, aux], axis=-1)
    q = ad.tanh(encoded @ p["W_1"] + p["b_1"])
    y = q @ p["W_2"] + p["b_2"]
    return y, encoded, q


def _gates(w, H):
    """Contiguous (r, z, n) slices of a gate-stacked weight or bias."""
    return [np.ascontiguousarray(w[..., i * H:(i + 1) * H]) for i in range(3)]


def _sigmoid_(x):
    x *= 0.5
    np.tanh(x, out=x)
    x += 1.0
    x *= 0.5
    return x


def _forward_np(p, scaled, aux, H, cache=None):
    """ndarray forward pass with per-gate arrays and in-place updates.

    Mathematically identical to :func:`_forward_core`; it just allocates far
    fewer full-size temporaries, which dominate the cost at batch sizes of a
    few hundred windows.
    """
    W_x, b_x, W_h, b_h = _gates(p["W_x"], H), _gates(p["b_x"], H), _gates(p["W_h"], H), _gates(p["b_h"], H)
    steps = np.ascontiguousarray(np.moveaxis(scaled, -2, 0))
    h = None
    for x_t in steps:
        a = [x_t @ W_x[i] + b_x[i] for i in range(3)]
        if h is None:
            h_prev = 0.0
            c = [np.broadcast_to(b_h[i], a[i].shape) for i in range(3)]
        else:
            h_prev = h
            c = [h @ W_h[i] for i in range(3)]
            for i in range(3):
                c[i] += b_h[i]
        r = _sigmoid_(a[0] + c[0])
        z = _sigmoid_(a[1] + c[1])
        cand = r * c[2]
        cand += a[2]
        np.tanh(cand, out=cand)
        h = h_prev - cand
        h *= z
        h += cand
        if cache is not None:
            cache.append((x_t, h_prev, c[2], r, z, cand))
    if aux is not None:
        aux = np.broadcast_to(aux, tuple(h.shape[:-1]) + (aux.shape[-1],))
    encoded = h if aux is None else np.concatenate([h, aux], axis=-1)
    q = encoded @ p["W_1"] + p["b_1"]
    np.tanh(q, out=q)
    y = q @ p["W_2"] + p["b_2"]
    return y, encoded, q


def input_projection(p, scaled):
    """Input half of the gate pre-activations, ``x W_x + b_x``."""
    return scaled @ p["W_x"] + p["b_x"]


def cell(p, a, h, hidden_size):
    """One recurrent step from hidden state ``h`` given the projected input ``a``.

    With ``h = 0`` this is bitwise identical to the first step of :func:`forward`.
    """
    H = hidden_size
    c = h @ p["W_h"] + p["b_h"]
    r = ad.sigmoid(a[..., :H] + c[..., :H])
    z = ad.sigmoid(a[..., H:2 * H] + c[..., H:2 * H])
    cand = ad.tanh(a[..., 2 * H:] + r * c[..., 2 * H:])
    return (1.0 - z) * cand + z * h


def head(p, h, aux=None):
    encoded = h if aux is None else np.concatenate([h, np.broadcast_to(aux, h.shape[:-1] + aux.shape[-1:])], axis=-1)
    return np.tanh(encoded @ p["W_1"] + p["b_1"]) @ p["W_2"] + p["b_2"]


def forward(weights: ModelWeights, windows, aux=None) -> np.ndarray:
    """Predict state derivatives for one window ``(n+1, 5)`` or a batch ``(B, n+1, 5)``.

    Stacked weights return ``(members, ..., 3)``.
    """
    windows, aux = _check_inputs(weights.config, windows, aux)
    single = windows.ndim == 2
    if single:
        windows = windows[None]
        aux = None if aux is None else aux[None]
    scaled = standardize(windows).astype(weights.dtype, copy=False)
    y, _, _ = _forward_np(weights.params, scaled, aux, weights.config.hidden_size)
    return y[..., 0, :] if single else y


def forward_tensor(params: dict, config: ModelConfig, windows, aux=None):
    """Forward pass on autodiff tensors (used for higher-order derivatives)."""
    windows, aux = _check_inputs(config, windows, aux)
    y, _, _ = _forward_core(params, standardize(windows), aux, config.hidden_size)
    return y


def predict_next(weights: ModelWeights, windows, aux=None, dt: float | None = None) -> np.ndarray:
    """Forward-Euler step of the dynamic state at the end of each window."""
    dt = weights.config.dt if dt is None else dt
    windows = np.asarray(windows)
    return windows[..., -1, :3] + forward(weights, windows, aux) * dt


def loss(weights: ModelWeights, windows, targets, aux=None):
    targets = np.asarray(targets, dtype=float)
    if targets.shape[0] == 0:
        raise ValueError("empty batch")
    y = forward(weights, windows, aux)
    return np.mean((y - targets) ** 2, axis=(-2, -1))


def loss_and_grad(weights: ModelWeights, windows, targets, aux=None, reduction: str = "mean"):
    """Mean squared error over batch and outputs, and its exact gradient.

    ``reduction="sum"`` sums the per-window losses (each still averaged over
    the three outputs) instead of averaging them.  With stacked weights the
    loss has one entry per member and each member gets its own gradient.
    """
    config = weights.config
    windows, aux = _check_inputs(config, windows, aux)
    targets = np.asarray(targets, dtype=float)
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ValueError("loss_and_grad needs a non-empty batch of windows")
    if targets.shape != (windows.shape[0], OUTPUT_DIM):
        raise ValueError(f"targets must have shape ({windows.shape[0]}, 3), got {targets.shape}")
    p = weights.params
    H = config.hidden_size
    scaled = standardize(windows)
    cache = []
    y, encoded, q = _forward_np(p, scaled, aux, H, cache)
    batch = windows.shape[0]
    residual = y - targets
    per_window = np.mean(residual**2, axis=-1)
    if reduction == "mean":
        value = per_window.mean(axis=-1)
        dy = residual * (2.0 / (OUTPUT_DIM * batch))
    elif reduction == "sum":
        value = per_window.sum(axis=-1)
        dy = residual * (2.0 / OUTPUT_DIM)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def t(a):
        return np.swapaxes(a, -1, -2)

    g = {}
    g["W_2"] = t(q) @ dy
    g["b_2"] = dy.sum(axis=-2, keepdims=True)
    du = (dy @ t(p["W_2"])) * (1.0 - q**2)
    g["W_1"] = t(encoded) @ du
    g["b_1"] = du.sum(axis=-2, keepdims=True)
    dh = (du @ t(p["W_1"]))[..., :H]

    W_hT = [np.ascontiguousarray(t(w)) for w in _gates(p["W_h"], H)]
    g_Wx = [0.0, 0.0, 0.0]
    g_Wh = [0.0, 0.0, 0.0]
    g_bx = [0.0, 0.0, 0.0]
    g_bh_n = 0.0
    for x_t, h_prev, c_n, r, z, cand in reversed(cache):
        one_minus_z = 1.0 - z
        d_n = dh * one_minus_z
        slope = cand * cand
        np.subtract(1.0, slope, out=slope)
        d_n *= slope
        d_r = d_n * c_n
        d_r *= r
        d_r *= 1.0 - r
        d_z = h_prev - cand
        d_z *= dh
        d_z *= z
        d_z *= one_minus_z
        dc_n = d_n * r
        x_tT = t(x_t)
        for i, d in enumerate((d_r, d_z, d_n)):
            g_Wx[i] = g_Wx[i] + x_tT @ d
            g_bx[i] = g_bx[i] + d.sum(axis=-2, keepdims=True)
        g_bh_n = g_bh_n + dc_n.sum(axis=-2, keepdims=True)
        if np.ndim(h_prev):
            h_prevT = t(h_prev)
            for i, d in enumerate((d_r, d_z, dc_n)):
                g_Wh[i] = g_Wh[i] + h_prevT @ d
            dh *= z
            dh += d_r @ W_hT[0]
            dh += d_z @ W_hT[1]
            dh += dc_n @ W_hT[2]

    def joined(parts, like):
        parts = [np.broadcast_to(part, like.shape[:-1] + (H,)) for part in parts]
        return np.concatenate(parts, axis=-1)

    g_Wx = joined(g_Wx, p["W_x"])
    g_bx = joined(g_bx, p["b_x"])
    g_bh = joined([g_bx[..., :H], g_bx[..., H:2 * H], g_bh_n], p["b_h"])
    g_Wh = joined([np.zeros(1) if isinstance(w, float) else w for w in g_Wh], p["W_h"])
    g.update(W_x=g_Wx, W_h=g_Wh, b_x=g_bx, b_h=g_bh)
    return value, ModelWeights(g, config)


# checkpoint I/O ------------------------------------------------------------

def save(weights: ModelWeights, path, extra: dict | None = None) -> None:
    """Write ``<path>.bin`` (raw little-endian float64) and ``<path>.json``."""
    path = os.fspath(path)
    entries, offset = [], 0
    with open(path + ".bin", "wb") as fh:
        for name in PARAM_NAMES:
            arr = np.ascontiguousarray(weights.params[name], dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    meta = {
        "format_version": FORMAT_VERSION,
        "cell": CELL,
        "config": dataclasses.asdict(weights.config),
        "input_scale": INPUT_SCALE.tolist(),
        "tensors": entries,
    }
    if extra:
        meta["extra"] = extra
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load(path) -> ModelWeights:
    path = os.fspath(path)
    with open(path + ".json") as fh:
        meta = json.load(fh)
    if meta["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {meta['format_version']}")
    if not np.allclose(meta["input_scale"], INPUT_SCALE):
        raise ValueError("checkpoint was trained with different input standardization")
    blob = np.fromfile(path + ".bin", dtype="<f8")
    params = {}
    for entry in meta["tensors"]:
        size = int(np.prod(entry["shape"]))
        start = entry["offset"] // 8
        params[entry["name"]] = blob[start:start + size].reshape(entry["shape"]).astype(float)
    return ModelWeights(params, ModelConfig(**meta["config"]))
