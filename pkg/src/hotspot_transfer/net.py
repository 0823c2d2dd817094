"""Minimal dense/convolutional network with hand-written reverse-mode gradients.

The model maps a (channels, 3, 3) neighborhood feature map plus a 7-long
day-of-week one-hot to a hotspot probability:

    Conv3x3(same) -> ReLU -> Conv3x3(same) -> ReLU -> Flatten
        -> Concat(dow) -> Dense -> ReLU -> Dense(1) -> Sigmoid

Everything runs in 64-bit floats. Convolutions are expressed as im2col
matrix products so both passes are BLAS-bound; the input gradient of a
'same' 3x3 convolution is itself a 'same' 3x3 convolution with the
spatially flipped, channel-transposed kernel. Initialization draws from a
counter-based Philox generator so identical (descriptor, seed) pairs yield
bit-identical weights on any platform.

Batched activations travel position-major as (batch, 9 cells row-major,
channels): patch extraction is then a contiguous gather instead of a strided
transpose, which is what keeps each optimizer step BLAS-bound. The
single-sample entry point accepts the conventional (channels, 3, 3) layout.
"""

from __future__ import annotations

import base64
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ArchitectureMismatch, CorruptFile, FormatVersionError, NumericError, ShapeError

FORMAT_VERSION = 1
PRNG_NAME = "philox4x64"
GRID = 3
DOW_DIM = 7

WEIGHT_KEYS = (
    "conv1_w",
    "conv1_b",
    "conv2_w",
    "conv2_b",
    "dense1_w",
    "dense1_b",
    "dense2_w",
    "dense2_b",
)


@dataclass(frozen=True)
class ArchitectureDescriptor:
    lookback_days: int = 7
    feature_count: int = 11
    grid_rows: int = GRID
    grid_cols: int = GRID
    cell_layout: str = "ring8-v1"
    conv1_filters: int = 32
    conv2_filters: int = 64
    hidden_units: int = 64
    dow_dim: int = DOW_DIM

    def __post_init__(self):
        if self.grid_rows != GRID or self.grid_cols != GRID:
            raise ShapeError("only 3x3 neighborhood grids are supported")
        if min(self.lookback_days, self.feature_count, self.conv1_filters,
               self.conv2_filters, self.hidden_units) < 1:
            raise ShapeError("descriptor extents must be positive")

    @property
    def input_channels(self) -> int:
        return self.lookback_days * self.feature_count

    @property
    def flat_dim(self) -> int:
        return self.conv2_filters * GRID * GRID

    @property
    def dense_in(self) -> int:
        return self.flat_dim + self.dow_dim

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv1_w": (self.conv1_filters, self.input_channels, 3, 3),
            "conv1_b": (self.conv1_filters,),
            "conv2_w": (self.conv2_filters, self.conv1_filters, 3, 3),
            "conv2_b": (self.conv2_filters,),
            "dense1_w": (self.dense_in, self.hidden_units),
            "dense1_b": (self.hidden_units,),
            "dense2_w": (self.hidden_units, 1),
            "dense2_b": (1,),
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureDescriptor":
        return cls(**d)


@dataclass
class ModelParams:
    descriptor: ArchitectureDescriptor
    weights: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.descriptor.weight_shapes()
        if set(self.weights) != set(shapes):
            raise ShapeError(f"weight keys {sorted(self.weights)} != {sorted(shapes)}")
        for key, shape in shapes.items():
            if self.weights[key].shape != shape:
                raise ShapeError(
                    f"{key}: shape {self.weights[key].shape} != descriptor {shape}"
                )

    def copy(self) -> "ModelParams":
        return ModelParams(self.descriptor, {k: v.copy() for k, v in self.weights.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.weights.values())

    def payload_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(self.weights[k], dtype="<f8").tobytes()
            for k in WEIGHT_KEYS
        )

    def checksum(self) -> int:
        """CRC-32 of the little-endian weight payload, in key order."""
        return zlib.crc32(self.payload_bytes()) & 0xFFFFFFFF

    def allclose(self, other: "ModelParams") -> bool:
        return self.descriptor == other.descriptor and all(
            np.array_equal(self.weights[k], other.weights[k]) for k in WEIGHT_KEYS
        )


def init_params(desc: ArchitectureDescriptor, seed: int) -> ModelParams:
    """He-style fan-in scaled uniform weights, zero biases, Philox-seeded."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    weights: dict[str, np.ndarray] = {}
    for key, shape in desc.weight_shapes().items():
        if key.endswith("_b"):
            weights[key] = np.zeros(shape, dtype=np.float64)
            continue
        fan_in = int(np.prod(shape[1:])) if key.startswith("conv") else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        weights[key] = rng.uniform(-bound, bound, size=shape).astype(np.float64)
    return ModelParams(desc, weights)


# --- layer primitives ---------------------------------------------------------
#
# Position-major layout: activations are (B, 9, C) with cell p = 3*row + col.
# _PATCH_SRC[p, o] is the source cell feeding kernel offset o at output cell p,
# or 9 (a zero sentinel row appended to the input) when the offset falls off
# the padded border.


def _build_patch_src() -> np.ndarray:
    src = np.full((9, 9), 9, dtype=np.int64)
    for p in range(9):
        r, s = divmod(p, 3)
        for o in range(9):
            u, v = divmod(o, 3)
            rr, ss = r + u - 1, s + v - 1
            if 0 <= rr < GRID and 0 <= ss < GRID:
                src[p, o] = rr * GRID + ss
    return src


_PATCH_SRC = _build_patch_src()


def im2col_cells(x: np.ndarray) -> np.ndarray:
    """(B, 9, C) -> (B, 9, 9*C) patches; column index is offset*C + channel."""
    b, _, c = x.shape
    ext = np.concatenate([x, np.zeros((b, 1, c), dtype=x.dtype)], axis=1)
    return ext[:, _PATCH_SRC, :].reshape(b, 9, 9 * c)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(F, C, 3, 3) kernel -> (9*C, F) matrix matching im2col_cells columns."""
    f, c = w.shape[0], w.shape[1]
    return w.reshape(f, c, 9).transpose(2, 1, 0).reshape(9 * c, f)


def conv3x3_same_forward(
    x: np.ndarray, w: np.ndarray, bias: np.ndarray, keep_cols: bool = False
):
    """Cross-correlate position-major (B, 9, C) with (F, C, 3, 3) kernels.

    Zero padding keeps the 3x3 spatial extent. With ``keep_cols`` also
    returns the im2col patches so the backward pass need not rebuild them.
    """
    cols = im2col_cells(x)  # (B, 9, 9C)
    z = cols @ _kernel_matrix(w) + bias  # (B, 9, F)
    if keep_cols:
        return z, cols
    return z


def conv3x3_same_backward(
    x: np.ndarray,
    w: np.ndarray,
    dz: np.ndarray,
    cols: np.ndarray | None = None,
    need_dx: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of the 'same' 3x3 correlation.

    ``cols`` are the forward im2col patches when available; ``need_dx=False``
    skips the input gradient (first layer).
    """
    f, c = w.shape[0], w.shape[1]
    if cols is None:
        cols = im2col_cells(x)
    dz2d = dz.reshape(-1, f)  # (B*9, F)
    dw = (dz2d.T @ cols.reshape(-1, 9 * c)).reshape(f, 9, c).transpose(0, 2, 1).reshape(w.shape)
    db = dz.sum(axis=(0, 1))
    dx = None
    if need_dx:
        # input gradient == 'same' conv of dz with flipped, channel-transposed kernel
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx = conv3x3_same_forward(dz, w_flip, np.zeros(c, dtype=x.dtype))
    return dx, dw, db


def spatial_to_cells(x: np.ndarray) -> np.ndarray:
    """Convert one sample or batch from (…, C, 3, 3) to position-major (…, 9, C)."""
    if x.ndim == 3:
        c = x.shape[0]
        return np.ascontiguousarray(x.reshape(c, 9).T)
    b, c = x.shape[0], x.shape[1]
    return np.ascontiguousarray(x.reshape(b, c, 9).transpose(0, 2, 1))


def dense_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return x @ w + bias


def dense_backward(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0.0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_bce(p: float | np.ndarray, y: float | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Binary cross-entropy and its logit gradient: (loss, p - y).

    Probabilities are clamped to [1e-12, 1 - 1e-12] before the logarithms.
    """
    p_arr = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    y_arr = np.asarray(y, dtype=np.float64)
    loss = -(y_arr * np.log(p_arr) + (1.0 - y_arr) * np.log1p(-p_arr))
    return loss, np.asarray(p, dtype=np.float64) - y_arr


# --- full model ----------------------------------------------------------------


def _check_batch_shapes(desc: ArchitectureDescriptor, x: np.ndarray, dow: np.ndarray):
    if x.ndim != 3 or x.shape[1:] != (GRID * GRID, desc.input_channels):
        raise ShapeError(
            f"input shape {x.shape} != (B, {GRID * GRID}, {desc.input_channels})"
        )
    if dow.ndim != 2 or dow.shape != (x.shape[0], desc.dow_dim):
        raise ShapeError(f"dow shape {dow.shape} != ({x.shape[0]}, {desc.dow_dim})")


def forward_batch(
    params: ModelParams, x: np.ndarray, dow: np.ndarray, keep_cache: bool = False
):
    """Probabilities for a position-major (B, 9, channels) batch.

    Optionally returns the activation cache consumed by :func:`backward`.
    """
    desc = params.descriptor
    _check_batch_shapes(desc, x, dow)
    w = params.weights
    z1, cols1 = conv3x3_same_forward(x, w["conv1_w"], w["conv1_b"], keep_cols=True)
    a1 = relu(z1)
    z2, cols2 = conv3x3_same_forward(a1, w["conv2_w"], w["conv2_b"], keep_cols=True)
    a2 = relu(z2)
    flat = np.concatenate([a2.reshape(x.shape[0], -1), dow], axis=1)
    z3 = dense_forward(flat, w["dense1_w"], w["dense1_b"])
    a3 = relu(z3)
    logit = dense_forward(a3, w["dense2_w"], w["dense2_b"])[:, 0]
    if not np.all(np.isfinite(logit)):
        raise NumericError("non-finite logit in forward pass")
    p = sigmoid(logit)
    if keep_cache:
        return p, (x, dow, z1, cols1, z2, cols2, flat, z3, a3)
    return p


def forward(params: ModelParams, x: np.ndarray, dow: np.ndarray) -> float:
    """Hotspot probability for one sample (channels, 3, 3) + dow one-hot."""
    if x.ndim != 3 or x.shape != (params.descriptor.input_channels, GRID, GRID):
        raise ShapeError(
            f"input shape {x.shape} != ({params.descriptor.input_channels}, {GRID}, {GRID})"
        )
    p = forward_batch(
        params,
        spatial_to_cells(x)[None, ...],
        np.asarray(dow, dtype=np.float64)[None, ...],
    )
    return float(p[0])


def backward(
    params: ModelParams, batch: tuple[np.ndarray, np.ndarray, np.ndarray]
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and exact gradients of it w.r.t. every weight."""
    x, dow, y = batch
    w = params.weights
    p, cache = forward_batch(params, x, dow, keep_cache=True)
    _, _, z1, cols1, z2, cols2, flat, z3, a3 = cache
    n = x.shape[0]
    losses, dlogit = loss_bce(p, y)
    dlogit = (dlogit / n)[:, None]  # (B, 1), gradient of the mean loss

    da3, dw2, db2 = dense_backward(a3, w["dense2_w"], dlogit)
    dz3 = relu_backward(z3, da3)
    dflat, dw1, db1 = dense_backward(flat, w["dense1_w"], dz3)
    da2 = dflat[:, : params.descriptor.flat_dim].reshape(z2.shape)
    dz2 = relu_backward(z2, da2)
    da1, dcw2, dcb2 = conv3x3_same_backward(relu(z1), w["conv2_w"], dz2, cols=cols2)
    dz1 = relu_backward(z1, da1)
    _, dcw1, dcb1 = conv3x3_same_backward(
        x, w["conv1_w"], dz1, cols=cols1, need_dx=False
    )

    grads = {
        "conv1_w": dcw1,
        "conv1_b": dcb1,
        "conv2_w": dcw2,
        "conv2_b": dcb2,
        "dense1_w": dw1,
        "dense1_b": db1,
        "dense2_w": dw2,
        "dense2_b": db2,
    }
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {key}")
    return float(losses.mean()), grads


def batch_loss(params: ModelParams, batch) -> float:
    """Mean BCE of a batch without gradients (finite-difference oracle side)."""
    x, dow, y = batch
    p = forward_batch(params, x, dow)
    losses, _ = loss_bce(p, y)
    return float(losses.mean())


# --- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(w) for k, w in params.weights.items()},
            v={k: np.zeros_like(w) for k, w in params.weights.items()},
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; functional, inputs untouched."""
    t = state.t + 1
    new_w, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for key, w in params.weights.items():
        g = grads[key]
        m = beta1 * state.m[key] + (1.0 - beta1) * g
        v = beta2 * state.v[key] + (1.0 - beta2) * g * g
        new_w[key] = w - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[key] = m
        new_v[key] = v
    return ModelParams(params.descriptor, new_w), AdamState(new_m, new_v, t)


# --- serialization ----------------------------------------------------------------


@dataclass(frozen=True)
class StatsBlock:
    """Standardization statistics carried alongside weights."""

    mean: tuple[float, ...]
    sd: tuple[float, ...]


def save_params(
    params: ModelParams,
    path,
    stats: StatsBlock | None = None,
    metadata: dict | None = None,
) -> None:
    """Write a self-describing weights file; round-trips bit-exactly."""
    tensors = []
    for key in WEIGHT_KEYS:
        arr = np.ascontiguousarray(params.weights[key], dtype="<f8")
        tensors.append(
            {
                "name": key,
                "shape": list(arr.shape),
                "data": base64.b64encode(arr.tobytes()).decode("ascii"),
            }
        )
    doc = {
        "format_version": FORMAT_VERSION,
        "prng": PRNG_NAME,
        "descriptor": params.descriptor.to_dict(),
        "encoding": "base64/little-endian/f64",
        "tensors": tensors,
        "crc32": params.checksum(),
    }
    if stats is not None:
        doc["stats"] = {"mean": list(stats.mean), "sd": list(stats.sd)}
    if metadata:
        doc["metadata"] = metadata
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def load_params(
    path, expected: ArchitectureDescriptor | None = None
) -> tuple[ModelParams, StatsBlock | None, dict]:
    """Read a weights file back; returns (params, stats-or-None, metadata)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: not a weights file: {exc}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CorruptFile(f"{path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: format_version {doc['format_version']} != {FORMAT_VERSION}"
        )
    try:
        desc = ArchitectureDescriptor.from_dict(doc["descriptor"])
        entries = {t["name"]: t for t in doc["tensors"]}
        weights = {}
        for key in WEIGHT_KEYS:
            entry = entries[key]
            raw = base64.b64decode(entry["data"], validate=True)
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
            weights[key] = arr
        stored_crc = int(doc["crc32"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"{path}: malformed weights file: {exc}") from None
    try:
        params = ModelParams(desc, weights)
    except ShapeError as exc:
        raise CorruptFile(f"{path}: {exc}") from None
    if params.checksum() != stored_crc:
        raise CorruptFile(f"{path}: payload CRC mismatch")
    if expected is not None and desc != expected:
        raise ArchitectureMismatch(
            f"{path}: file descriptor {desc} != expected {expected}"
        )
    stats = None
    if "stats" in doc:
        stats = StatsBlock(tuple(doc["stats"]["mean"]), tuple(doc["stats"]["sd"]))
    return params, stats, doc.get("metadata", {})


# --- finite-difference gradient checking --------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_key: str
    worst_index: tuple[int, ...]
    per_layer: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def finite_difference_check(
    params: ModelParams, batch, h: float = 1e-5, abs_floor: float = 1e-7
) -> GradCheckReport:
    """Compare analytic gradients against central differences, coordinatewise.

    The error for one coordinate is |a - n| / max(|a|, |n|) whenever either
    magnitude exceeds ``abs_floor``, else 0 (both sides numerically zero).
    """
    _, grads = backward(params, batch)
    report = GradCheckReport(0.0, "", ())
    for key in WEIGHT_KEYS:
        w = params.weights[key]
        layer_max = 0.0
        flat = w.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = batch_loss(params, batch)
            flat[i] = orig - h
            down = batch_loss(params, batch)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = grads[key].reshape(-1)[i]
            scale = max(abs(analytic), abs(numeric))
            err = 0.0 if scale < abs_floor else abs(analytic - numeric) / scale
            if err > layer_max:
                layer_max = err
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst_key = key
                report.worst_index = tuple(np.unravel_index(i, w.shape))
        report.per_layer[key] = layer_max
    return report


def gradcheck_suite(seed: int = 0, n_random: int = 5) -> list[GradCheckReport]:
    """Finite-difference reports for ``n_random`` randomized small models."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    reports = []
    for trial in range(n_random):
        desc = ArchitectureDescriptor(
            lookback_days=int(rng.integers(1, 4)),
            conv1_filters=int(rng.integers(2, 6)),
            conv2_filters=int(rng.integers(2, 6)),
            hidden_units=int(rng.integers(3, 9)),
        )
        params = init_params(desc, seed=1000 + trial)
        b = 4
        x = rng.normal(size=(b, GRID * GRID, desc.input_channels))
        dow = np.zeros((b, DOW_DIM))
        dow[np.arange(b), rng.integers(0, DOW_DIM, size=b)] = 1.0
        y = rng.integers(0, 2, size=b).astype(np.float64)
        reports.append(finite_difference_check(params, (x, dow, y)))
    return reports
