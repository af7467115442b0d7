"""Graph-convolutional GRU speed forecaster with hand-rolled gradients.

One graph convolution (symmetrically normalized self-looped adjacency,
shared across timesteps) feeds a per-node GRU over the input window; a
linear readout maps the final hidden state to the horizon. Training is
plain mini-batch gradient descent on mean squared error plus an L1 penalty
on the weights, with reverse-mode gradients implemented explicitly so they
can be audited against finite differences.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TrainingDiverged
from .graph import (
    FEATURE_DIM,
    HUMIDITY_COL,
    LANE_COL,
    LIMIT_COL,
    POI_COL,
    PRECIP_COL,
    TEMP_COL,
    WIND_COL,
    FeatureWindow,
    RoadGraph,
)

CHECKPOINT_SCHEMA_VERSION = 1

# Fixed per-column input scaling applied inside the model. The external
# feature contract stays in natural units (raw counts, km/h, degrees C);
# dividing by nominal full-scale values here keeps the recurrent gates out
# of saturation under the uniform +-1/sqrt(fan_in) initialization.
DEFAULT_INPUT_SCALE = np.ones(FEATURE_DIM)
DEFAULT_INPUT_SCALE[POI_COL] = 1.0 / 36.0
DEFAULT_INPUT_SCALE[LANE_COL] = 1.0 / 6.0
DEFAULT_INPUT_SCALE[LIMIT_COL] = 1.0 / 120.0
DEFAULT_INPUT_SCALE[TEMP_COL] = 1.0 / 30.0
DEFAULT_INPUT_SCALE[WIND_COL] = 1.0 / 10.0
DEFAULT_INPUT_SCALE[PRECIP_COL] = 1.0 / 5.0
DEFAULT_INPUT_SCALE[HUMIDITY_COL] = 1.0 / 100.0
DEFAULT_INPUT_SCALE.setflags(write=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(float)),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}


@dataclass(frozen=True)
class NormalizedAdjacency:
    """D^-1/2 (A + I) D^-1/2 with D the self-looped degree matrix."""

    matrix: np.ndarray


def normalize_adjacency(graph: RoadGraph) -> NormalizedAdjacency:
    a_tilde = graph.adjacency + np.eye(graph.node_count)
    inv_sqrt_deg = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    matrix = a_tilde * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]
    return NormalizedAdjacency(matrix)


@dataclass
class GcnLayer:
    weight: np.ndarray  # (in_dim, out_dim)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not np.isfinite(self.weight).all():
            raise ValueError("GCN weight must be finite")


def gcn_forward(adj: NormalizedAdjacency, features: np.ndarray, layer: GcnLayer) -> np.ndarray:
    """activation(A_hat @ features @ W) for one (node, feature) matrix."""
    if features.shape[-1] != layer.weight.shape[0]:
        raise ValueError(
            f"feature dim {features.shape[-1]} does not match weight in_dim {layer.weight.shape[0]}"
        )
    if features.shape[-2] != adj.matrix.shape[0]:
        raise ValueError("node count mismatch between adjacency and features")
    act, _ = ACTIVATIONS[layer.activation]
    return act(adj.matrix @ features @ layer.weight)


@dataclass
class GruCell:
    weight_update: np.ndarray     # (input_dim + hidden_dim, hidden_dim)
    weight_reset: np.ndarray
    weight_candidate: np.ndarray
    bias_update: np.ndarray       # (hidden_dim,)
    bias_reset: np.ndarray
    bias_candidate: np.ndarray
    hidden_dim: int

    def __post_init__(self):
        expected = self.weight_update.shape
        for name in ("weight_reset", "weight_candidate"):
            if getattr(self, name).shape != expected:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {expected}")
        if expected[1] != self.hidden_dim:
            raise ValueError("weight out_dim must equal hidden_dim")


def gru_step(cell: GruCell, gc_out: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """One recurrent update. The update gate keeps the previous state."""
    if gc_out.shape[-1] + cell.hidden_dim != cell.weight_update.shape[0]:
        raise ValueError("gc_out dim incompatible with cell weights")
    if h_prev.shape[-1] != cell.hidden_dim:
        raise ValueError("h_prev dim must equal hidden_dim")
    z = np.concatenate([gc_out, h_prev], axis=-1)
    u = sigmoid(z @ cell.weight_update + cell.bias_update)
    r = sigmoid(z @ cell.weight_reset + cell.bias_reset)
    zc = np.concatenate([gc_out, r * h_prev], axis=-1)
    c = np.tanh(zc @ cell.weight_candidate + cell.bias_candidate)
    return u * h_prev + (1.0 - u) * c


@dataclass
class TrainingConfig:
    epochs: int = 80
    learning_rate: float = 0.4
    l1_lambda: float = 1e-6
    hidden_dim: int = 32
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.hidden_dim <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, hidden_dim and batch_size must be positive")
        if self.learning_rate < 0 or self.l1_lambda < 0:
            raise ValueError("learning_rate and l1_lambda must be non-negative")


@dataclass
class TgcnModel:
    gcn: GcnLayer
    gru: GruCell
    readout_weight: np.ndarray  # (hidden_dim, horizon_length)
    readout_bias: np.ndarray    # (horizon_length,)
    normalized_adjacency: NormalizedAdjacency
    speed_max: float
    input_scale: np.ndarray

    @property
    def horizon_length(self) -> int:
        return self.readout_weight.shape[1]

    @property
    def node_count(self) -> int:
        return self.normalized_adjacency.matrix.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "w_gcn": self.gcn.weight,
            "w_update": self.gru.weight_update,
            "w_reset": self.gru.weight_reset,
            "w_candidate": self.gru.weight_candidate,
            "b_update": self.gru.bias_update,
            "b_reset": self.gru.bias_reset,
            "b_candidate": self.gru.bias_candidate,
            "w_out": self.readout_weight,
            "b_out": self.readout_bias,
        }

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        self.gcn.weight = params["w_gcn"]
        self.gru.weight_update = params["w_update"]
        self.gru.weight_reset = params["w_reset"]
        self.gru.weight_candidate = params["w_candidate"]
        self.gru.bias_update = params["b_update"]
        self.gru.bias_reset = params["b_reset"]
        self.gru.bias_candidate = params["b_candidate"]
        self.readout_weight = params["w_out"]
        self.readout_bias = params["b_out"]


WEIGHT_KEYS = ("w_gcn", "w_update", "w_reset", "w_candidate", "w_out")


def init_model(
    adjacency: NormalizedAdjacency,
    feature_dim: int,
    hidden_dim: int,
    horizon_length: int,
    seed: int,
    speed_max: float,
    input_scale: np.ndarray | None = None,
    activation: str = "relu",
) -> TgcnModel:
    """Seeded uniform +-1/sqrt(fan_in) weight init, zero biases."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    gcn_dim = hidden_dim
    combined = gcn_dim + hidden_dim
    gcn = GcnLayer(uniform(feature_dim, (feature_dim, gcn_dim)), activation)
    gru = GruCell(
        weight_update=uniform(combined, (combined, hidden_dim)),
        weight_reset=uniform(combined, (combined, hidden_dim)),
        weight_candidate=uniform(combined, (combined, hidden_dim)),
        bias_update=np.zeros(hidden_dim),
        bias_reset=np.zeros(hidden_dim),
        bias_candidate=np.zeros(hidden_dim),
        hidden_dim=hidden_dim,
    )
    readout_weight = uniform(hidden_dim, (hidden_dim, horizon_length))
    readout_bias = np.zeros(horizon_length)
    scale = np.array(DEFAULT_INPUT_SCALE if input_scale is None else input_scale, dtype=float)
    if scale.shape != (feature_dim,):
        raise ValueError("input_scale must have one entry per feature column")
    return TgcnModel(gcn, gru, readout_weight, readout_bias, adjacency, float(speed_max), scale)


def forward_batch(model: TgcnModel, inputs: np.ndarray, want_cache: bool = False):
    """Normalized-scale predictions for a batch of windows.

    inputs: (batch, window_length, node_count, feature_dim) in natural units.
    Returns (batch, horizon_length, node_count) plus, optionally, the cache
    needed by backward_batch.
    """
    if inputs.ndim != 4:
        raise ValueError("inputs must be (batch, time, node, feature)")
    if inputs.shape[2] != model.node_count:
        raise ValueError(f"window has {inputs.shape[2]} nodes; model expects {model.node_count}")
    if inputs.shape[3] != model.gcn.weight.shape[0]:
        raise ValueError("feature dimension mismatch")
    batch, steps, nodes, _ = inputs.shape
    hidden = model.gru.hidden_dim
    act, dact = ACTIVATIONS[model.gcn.activation]

    scaled = inputs * model.input_scale
    mixed = np.matmul(model.normalized_adjacency.matrix, scaled)  # (B, T, N, F)
    gc_pre = mixed @ model.gcn.weight                    # (B, T, N, G)
    gc_all = act(gc_pre)

    h = np.zeros((batch, nodes, hidden))
    trace = []
    for t in range(steps):
        g = gc_all[:, t]
        z = np.concatenate([g, h], axis=-1)
        u = sigmoid(z @ model.gru.weight_update + model.gru.bias_update)
        r = sigmoid(z @ model.gru.weight_reset + model.gru.bias_reset)
        zc = np.concatenate([g, r * h], axis=-1)
        c = np.tanh(zc @ model.gru.weight_candidate + model.gru.bias_candidate)
        h_new = u * h + (1.0 - u) * c
        if want_cache:
            trace.append((h, u, r, c))
        h = h_new
    out = h @ model.readout_weight + model.readout_bias  # (B, N, horizon)
    pred = out.transpose(0, 2, 1)
    if not want_cache:
        return pred
    cache = {"mixed": mixed, "gc_pre": gc_pre, "gc_all": gc_all, "trace": trace, "h_final": h, "dact": dact}
    return pred, cache


def model_forward(model: TgcnModel, window: FeatureWindow) -> np.ndarray:
    """Predict one window; output is denormalized to km/h, (horizon, node)."""
    pred = forward_batch(model, window.inputs[None])
    return pred[0] * model.speed_max


def predict_batch(model: TgcnModel, inputs: np.ndarray) -> np.ndarray:
    """Denormalized predictions (km/h) for stacked window inputs."""
    return forward_batch(model, inputs) * model.speed_max


def l1_penalty(params: dict[str, np.ndarray]) -> float:
    return float(sum(np.abs(params[k]).sum() for k in WEIGHT_KEYS))


def loss(pred: np.ndarray, truth: np.ndarray, params: dict[str, np.ndarray], l1_lambda: float) -> float:
    """Mean squared error plus L1 on the weight matrices (biases excluded)."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    mse = float(np.mean((truth - pred) ** 2))
    return mse + l1_lambda * l1_penalty(params)


def backward_batch(
    model: TgcnModel,
    inputs: np.ndarray,
    targets_norm: np.ndarray,
    l1_lambda: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients w.r.t. every parameter for one batch."""
    pred, cache = forward_batch(model, inputs, want_cache=True)
    params = model.parameters()
    value = loss(pred, targets_norm, params, l1_lambda)

    def outer(left: np.ndarray, right: np.ndarray) -> np.ndarray:
        # sum over batch/node axes: (..., Z) x (..., H) -> (Z, H)
        return left.reshape(-1, left.shape[-1]).T @ right.reshape(-1, right.shape[-1])

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dpred = 2.0 * (pred - targets_norm) / pred.size     # (B, H, N)
    dout = np.ascontiguousarray(dpred.transpose(0, 2, 1))  # (B, N, horizon)

    h_final = cache["h_final"]
    grads["w_out"] = outer(h_final, dout)
    grads["b_out"] = dout.sum(axis=(0, 1))
    dh = dout @ model.readout_weight.T

    gcn_dim = model.gcn.weight.shape[1]
    gc_all = cache["gc_all"]
    dgc_all = np.zeros_like(gc_all)
    for t in range(len(cache["trace"]) - 1, -1, -1):
        h_prev, u, r, c = cache["trace"][t]
        g = gc_all[:, t]
        du = dh * (h_prev - c)
        dc = dh * (1.0 - u)
        dh_prev = dh * u

        dc_pre = dc * (1.0 - c * c)
        zc = np.concatenate([g, r * h_prev], axis=-1)
        grads["w_candidate"] += outer(zc, dc_pre)
        grads["b_candidate"] += dc_pre.sum(axis=(0, 1))
        dzc = dc_pre @ model.gru.weight_candidate.T
        dg = dzc[..., :gcn_dim].copy()
        drh = dzc[..., gcn_dim:]
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r

        du_pre = du * u * (1.0 - u)
        dr_pre = dr * r * (1.0 - r)
        z = np.concatenate([g, h_prev], axis=-1)
        grads["w_update"] += outer(z, du_pre)
        grads["b_update"] += du_pre.sum(axis=(0, 1))
        grads["w_reset"] += outer(z, dr_pre)
        grads["b_reset"] += dr_pre.sum(axis=(0, 1))
        dz = du_pre @ model.gru.weight_update.T + dr_pre @ model.gru.weight_reset.T
        dg += dz[..., :gcn_dim]
        dh_prev = dh_prev + dz[..., gcn_dim:]

        dgc_all[:, t] = dg
        dh = dh_prev

    dgc_pre = dgc_all * cache["dact"](cache["gc_pre"])
    grads["w_gcn"] = outer(cache["mixed"], dgc_pre)

    if l1_lambda > 0:
        for key in WEIGHT_KEYS:
            grads[key] += l1_lambda * np.sign(params[key])
    return value, grads


def stack_windows(windows: list[FeatureWindow]) -> tuple[np.ndarray, np.ndarray]:
    inputs = np.stack([w.inputs for w in windows])
    targets = np.stack([w.targets for w in windows])
    return inputs, targets


def train(
    model: TgcnModel,
    windows: list[FeatureWindow],
    config: TrainingConfig,
    eval_windows: list[FeatureWindow] | None = None,
) -> tuple[TgcnModel, dict[str, list[float]]]:
    """Mini-batch gradient descent; returns a trained copy and loss traces."""
    if not windows:
        raise ValueError("training set is empty")
    model = copy.deepcopy(model)
    inputs, targets = stack_windows(windows)
    targets_norm = targets / model.speed_max
    eval_pair = None
    if eval_windows:
        eval_inputs, eval_targets = stack_windows(eval_windows)
        eval_pair = (eval_inputs, eval_targets / model.speed_max)

    rng = np.random.default_rng(config.seed)
    count = len(windows)
    trace: dict[str, list[float]] = {"train": [], "test": []}
    for epoch in range(config.epochs):
        order = rng.permutation(count)
        epoch_losses = []
        for start in range(0, count, config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grads = backward_batch(model, inputs[idx], targets_norm[idx], config.l1_lambda)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch offset {start}: {value!r}; "
                    f"lower the learning rate (currently {config.learning_rate})"
                )
            params = model.parameters()
            for key, grad in grads.items():
                params[key] = params[key] - config.learning_rate * grad
            model.set_parameters(params)
            epoch_losses.append(value)
        trace["train"].append(float(np.mean(epoch_losses)))
        if eval_pair is not None:
            pred = forward_batch(model, eval_pair[0])
            trace["test"].append(loss(pred, eval_pair[1], model.parameters(), config.l1_lambda))
    return model, trace


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mae: float
    accuracy: float
    r2: float | None
    var_explained: float | None

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mae": self.mae,
            "accuracy": self.accuracy,
            "r2": self.r2,
            "var_explained": self.var_explained,
        }


def metrics(truth: np.ndarray, pred: np.ndarray) -> MetricsReport:
    """RMSE, MAE, relative-Frobenius accuracy, R^2 and explained variance.

    R^2 and explained variance are None when the truth is constant (their
    denominators vanish).
    """
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {pred.shape}")
    residual = truth - pred
    rmse = float(np.sqrt(np.mean(residual**2)))
    mae = float(np.mean(np.abs(residual)))
    truth_norm = float(np.linalg.norm(truth))
    if truth_norm == 0.0:
        raise ValueError("accuracy undefined for all-zero truth")
    accuracy = 1.0 - float(np.linalg.norm(residual)) / truth_norm
    ss_total = float(np.sum((truth - truth.mean()) ** 2))
    if ss_total == 0.0:
        r2 = None
        var_explained = None
    else:
        r2 = 1.0 - float(np.sum(residual**2)) / ss_total
        var_explained = 1.0 - float(np.var(residual)) / float(np.var(truth))
    return MetricsReport(rmse, mae, accuracy, r2, var_explained)


# ---------------------------------------------------------------------------
# Checkpoint serialization. Weight tensors are written row-major as strings
# with 17 significant digits so saved models round-trip bit-exactly.
# ---------------------------------------------------------------------------

def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": [format(float(v), ".17g") for v in arr.reshape(-1)],
    }


def _decode_array(doc: dict) -> np.ndarray:
    return np.array([float(v) for v in doc["data"]]).reshape(doc["shape"])


def save_model(model: TgcnModel, path: Path | str, extra_config: dict | None = None) -> None:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": dict(extra_config or {}),
        "activation": model.gcn.activation,
        "hidden_dim": model.gru.hidden_dim,
        "normalization": {
            "speed_max": format(model.speed_max, ".17g"),
            "input_scale": [format(float(v), ".17g") for v in model.input_scale],
        },
        "adjacency": _encode_array(model.normalized_adjacency.matrix),
        "weights": {key: _encode_array(value) for key, value in model.parameters().items()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_model(path: Path | str) -> tuple[TgcnModel, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
    weights = {key: _decode_array(value) for key, value in doc["weights"].items()}
    hidden = doc["hidden_dim"]
    gcn = GcnLayer(weights["w_gcn"], doc["activation"])
    gru = GruCell(
        weights["w_update"], weights["w_reset"], weights["w_candidate"],
        weights["b_update"], weights["b_reset"], weights["b_candidate"], hidden,
    )
    model = TgcnModel(
        gcn, gru, weights["w_out"], weights["b_out"],
        NormalizedAdjacency(_decode_array(doc["adjacency"])),
        float(doc["normalization"]["speed_max"]),
        np.array([float(v) for v in doc["normalization"]["input_scale"]]),
    )
    return model, doc["config"]
