"""Toy differentiable collaborative BEV detector.

Per-agent point rasterization, nearest-cell cross-agent feature projection,
elementwise-max fusion, and a learned shared-weight affine head over 3x3
cell neighborhoods. Small enough that every gradient is checkable against
finite differences. The encoder is fixed (not learned); all trainable
parameters live in the head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from .geometry import GLOBAL_FRAME, AnchorGrid, Pose2D, RegDelta, normalize_angle, transform_points

if TYPE_CHECKING:
    from .mining import LabelSet
    from .scenes import Agent

CHANNELS = 4  # point count, mean offset x, mean offset y, density
OUTPUTS_PER_ANCHOR = 8  # 1 cls + 5 reg + 2 dir
NEIGHBORHOOD = 9  # 3x3 cells

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
LOSS_WEIGHTS = (1.0, 2.0, 0.2)  # cls, reg, dir


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def direction_bin(yaw: float) -> int:
    """Two heading bins split at zero: bin 0 for yaw in [0, pi), bin 1 otherwise."""
    return 0 if normalize_angle(yaw) >= 0.0 else 1


@dataclass(frozen=True)
class FeatureMap:
    grid: AnchorGrid
    data: np.ndarray  # (H, W, C)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        expected = (self.grid.height_cells, self.grid.width_cells, CHANNELS)
        if data.shape != expected:
            raise ValueError(f"feature map shape {data.shape} does not match grid {expected}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map holds non-finite values")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class Prediction:
    grid: AnchorGrid
    cls_logits: np.ndarray  # (H, W, A)
    reg_deltas: np.ndarray  # (H, W, A, 5) ordered as (dx, dy, dl, dw, dyaw)
    dir_logits: np.ndarray  # (H, W, A, 2)

    def __post_init__(self):
        h, w, a = self.grid.height_cells, self.grid.width_cells, self.grid.anchors_per_cell
        shapes = {
            "cls_logits": (self.cls_logits, (h, w, a)),
            "reg_deltas": (self.reg_deltas, (h, w, a, 5)),
            "dir_logits": (self.dir_logits, (h, w, a, 2)),
        }
        for name, (arr, expected) in shapes.items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape != expected:
                raise ValueError(f"{name} shape {arr.shape}, expected {expected}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} holds non-finite values")
            object.__setattr__(self, name, arr)

    def flat_scores(self) -> np.ndarray:
        """Sigmoid classification scores indexed by flat anchor index."""
        return sigmoid(self.cls_logits.ravel())

    def flat_deltas(self) -> np.ndarray:
        return self.reg_deltas.reshape(-1, 5)

    def delta_at(self, anchor_index: int) -> RegDelta:
        return RegDelta.from_array(self.flat_deltas()[anchor_index])


@dataclass(frozen=True)
class DetectorState:
    """Flat head parameters: (A*8, 9*C) weight matrix then (A*8,) bias."""

    params: np.ndarray
    anchors_per_cell: int
    channels: int = CHANNELS

    def __post_init__(self):
        params = np.array(self.params, dtype=float)
        if params.ndim != 1 or params.size != self.n_params:
            raise ValueError(
                f"expected {self.n_params} parameters for layout "
                f"(A={self.anchors_per_cell}, C={self.channels}), got shape {params.shape}"
            )
        if not np.all(np.isfinite(params)):
            raise ValueError("detector parameters are non-finite")
        params.flags.writeable = False
        object.__setattr__(self, "params", params)

    @property
    def in_dim(self) -> int:
        return NEIGHBORHOOD * self.channels

    @property
    def out_dim(self) -> int:
        return self.anchors_per_cell * OUTPUTS_PER_ANCHOR

    @property
    def n_params(self) -> int:
        return self.out_dim * self.in_dim + self.out_dim

    def weights(self) -> np.ndarray:
        return self.params[: self.out_dim * self.in_dim].reshape(self.out_dim, self.in_dim)

    def bias(self) -> np.ndarray:
        return self.params[self.out_dim * self.in_dim :]

    def layout(self) -> dict:
        return {"anchors_per_cell": self.anchors_per_cell, "channels": self.channels}

    def with_params(self, params: np.ndarray) -> "DetectorState":
        return replace(self, params=params)


def init_state(grid: AnchorGrid, seed) -> DetectorState:
    """Small random weights; classification biases start strongly negative so
    the untrained detector predicts background everywhere. ``seed`` may be an
    int or a sequence of ints (stream derivation)."""
    a = grid.anchors_per_cell
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.05, size=(a * OUTPUTS_PER_ANCHOR, NEIGHBORHOOD * CHANNELS))
    b = np.zeros(a * OUTPUTS_PER_ANCHOR)
    b[0::OUTPUTS_PER_ANCHOR] = -4.0
    return DetectorState(params=np.concatenate([w.ravel(), b]), anchors_per_cell=a)


# ---------------------------------------------------------------------------
# Forward pass.


def encode(agent: "Agent", grid: AnchorGrid) -> FeatureMap:
    """Rasterize the agent's points (agent frame) into per-cell channels:
    point count, mean offset from the cell center, and share of all in-grid
    points."""
    h, w = grid.height_cells, grid.width_cells
    data = np.zeros((h, w, CHANNELS))
    pts = agent.points
    if pts.shape[0]:
        ox, oy = grid.origin
        cols = np.floor((pts[:, 0] - ox) / grid.cell_size).astype(int)
        rows = np.floor((pts[:, 1] - oy) / grid.cell_size).astype(int)
        keep = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        cols, rows, kept = cols[keep], rows[keep], pts[keep]
        if kept.shape[0]:
            counts = np.zeros((h, w))
            sums = np.zeros((h, w, 2))
            np.add.at(counts, (rows, cols), 1.0)
            np.add.at(sums, (rows, cols), kept)
            occupied = counts > 0
            centers_x = ox + (np.arange(w) + 0.5) * grid.cell_size
            centers_y = oy + (np.arange(h) + 0.5) * grid.cell_size
            mean = np.zeros((h, w, 2))
            mean[occupied] = sums[occupied] / counts[occupied, None]
            data[..., 0] = counts
            data[..., 1] = np.where(occupied, mean[..., 0] - centers_x[None, :], 0.0)
            data[..., 2] = np.where(occupied, mean[..., 1] - centers_y[:, None], 0.0)
            data[..., 3] = counts / kept.shape[0]
    return FeatureMap(grid=grid, data=data)


def project_feature(f: FeatureMap, from_pose: Pose2D, to_pose: Pose2D) -> FeatureMap:
    """Resample ``f`` (laid out in ``from_pose``'s frame) onto the same grid in
    ``to_pose``'s frame by nearest-cell lookup; cells that land outside the
    source grid become zero.

    The mean-offset channels are position vectors anchored at the source cell
    center, so copying them across frames verbatim would both skip the
    rotation and inherit up to half a cell diagonal of quantization error.
    They are instead recomputed so the implied mean point position survives
    the frame change exactly; occupancy still moves at nearest-cell
    resolution."""
    if from_pose == to_pose:
        return FeatureMap(grid=f.grid, data=f.data.copy())
    grid = f.grid
    h, w = grid.height_cells, grid.width_cells
    centers = grid.cell_centers().reshape(-1, 2)  # target frame
    src = transform_points(centers, to_pose, from_pose)
    ox, oy = grid.origin
    cols = np.floor((src[:, 0] - ox) / grid.cell_size).astype(int)
    rows = np.floor((src[:, 1] - oy) / grid.cell_size).astype(int)
    inside = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    data = np.zeros((h * w, CHANNELS))
    data[inside] = f.data[rows[inside], cols[inside]]
    occupied = inside & (data[:, 0] > 0)
    if np.any(occupied):
        src_centers = np.stack(
            [
                ox + (cols[occupied] + 0.5) * grid.cell_size,
                oy + (rows[occupied] + 0.5) * grid.cell_size,
            ],
            axis=1,
        )
        mean_tgt = transform_points(
            src_centers + data[occupied][:, 1:3], from_pose, to_pose
        )
        patched = data[occupied]
        patched[:, 1:3] = mean_tgt - centers[occupied]
        data[occupied] = patched
    return FeatureMap(grid=grid, data=data.reshape(h, w, CHANNELS))


def fuse_max(ego: FeatureMap, projected: list[FeatureMap]) -> FeatureMap:
    data = ego.data
    for other in projected:
        if other.data.shape != ego.data.shape:
            raise ValueError(
                f"cannot fuse maps of shapes {other.data.shape} and {ego.data.shape}"
            )
        data = np.maximum(data, other.data)
    return FeatureMap(grid=ego.grid, data=data)


def head_features(fused: FeatureMap) -> np.ndarray:
    """Stack each cell's 3x3 neighborhood (zero padded) into a flat feature
    row; returns (H*W, 9*C)."""
    h, w = fused.grid.height_cells, fused.grid.width_cells
    padded = np.zeros((h + 2, w + 2, CHANNELS))
    padded[1:-1, 1:-1] = fused.data
    blocks = [
        padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
        for di in (-1, 0, 1)
        for dj in (-1, 0, 1)
    ]
    return np.concatenate(blocks, axis=2).reshape(h * w, NEIGHBORHOOD * CHANNELS)


def prediction_from_features(features: np.ndarray, state: DetectorState, grid: AnchorGrid) -> Prediction:
    h, w, a = grid.height_cells, grid.width_cells, grid.anchors_per_cell
    out = features @ state.weights().T + state.bias()
    out = out.reshape(h, w, a, OUTPUTS_PER_ANCHOR)
    return Prediction(
        grid=grid,
        cls_logits=out[..., 0],
        reg_deltas=out[..., 1:6],
        dir_logits=out[..., 6:8],
    )


def detect_head(fused: FeatureMap, state: DetectorState) -> Prediction:
    return prediction_from_features(head_features(fused), state, fused.grid)


def head_backward(features: np.ndarray, grad: "LossGrad") -> np.ndarray:
    """Gradient of the loss w.r.t. the flat parameter vector, given the
    per-output gradients produced by supervised_loss."""
    n_cells = features.shape[0]
    a = grad.d_cls.size // n_cells
    d_out = np.empty((n_cells, a, OUTPUTS_PER_ANCHOR))
    d_out[..., 0] = grad.d_cls.reshape(n_cells, a)
    d_out[..., 1:6] = grad.d_reg.reshape(n_cells, a, 5)
    d_out[..., 6:8] = grad.d_dir.reshape(n_cells, a, 2)
    d_flat = d_out.reshape(n_cells, a * OUTPUTS_PER_ANCHOR)
    d_w = d_flat.T @ features
    d_b = d_flat.sum(axis=0)
    return np.concatenate([d_w.ravel(), d_b])


# ---------------------------------------------------------------------------
# Loss.


@dataclass(frozen=True)
class LossGrad:
    d_cls: np.ndarray
    d_reg: np.ndarray
    d_dir: np.ndarray


def supervised_loss_detailed(pred: Prediction, labels: "LabelSet", grid: AnchorGrid):
    """Focal classification over every anchor plus smooth-L1 regression and
    2-bin direction cross-entropy on the labeled positives, term weights
    (1.0, 2.0, 0.2), all normalized by max(1, n_pos). Returns the scalar,
    its analytic gradient w.r.t. the prediction, and the weighted terms."""
    z = pred.cls_logits.ravel()
    n = z.size
    pos_idx = np.array([e.anchor_index for e in labels.positives], dtype=int)
    if pos_idx.size:
        if pos_idx.min() < 0 or pos_idx.max() >= n:
            raise ValueError("label references an anchor outside the grid")
        if len(set(pos_idx.tolist())) != pos_idx.size:
            raise ValueError("duplicate anchors in label set")
    norm = max(1, pos_idx.size)
    w_cls, w_reg, w_dir = LOSS_WEIGHTS

    pos_mask = np.zeros(n, dtype=bool)
    pos_mask[pos_idx] = True
    p = sigmoid(z)
    log_p = -np.logaddexp(0.0, -z)
    log_1p = -np.logaddexp(0.0, z)

    focal = np.where(
        pos_mask,
        -FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * log_p,
        -(1.0 - FOCAL_ALPHA) * p**FOCAL_GAMMA * log_1p,
    )
    d_focal = np.where(
        pos_mask,
        FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * (FOCAL_GAMMA * p * log_p - (1.0 - p)),
        (1.0 - FOCAL_ALPHA) * p**FOCAL_GAMMA * (p - FOCAL_GAMMA * (1.0 - p) * log_1p),
    )
    cls_loss = focal.sum() / norm
    d_cls = (w_cls / norm) * d_focal

    deltas = pred.flat_deltas()
    d_reg = np.zeros_like(deltas)
    reg_loss = 0.0
    dir_flat = pred.dir_logits.reshape(-1, 2)
    d_dir = np.zeros_like(dir_flat)
    dir_loss = 0.0
    for entry in labels.positives:
        if entry.target is None:
            raise ValueError(f"positive anchor {entry.anchor_index} lacks a regression target")
        if not entry.supervise_regression:
            continue
        diff = deltas[entry.anchor_index] - entry.target.as_array()
        absd = np.abs(diff)
        reg_loss += float(np.where(absd < 1.0, 0.5 * diff**2, absd - 0.5).sum())
        d_reg[entry.anchor_index] = np.clip(diff, -1.0, 1.0)

        logits = dir_flat[entry.anchor_index]
        shifted = logits - logits.max()
        log_soft = shifted - np.log(np.exp(shifted).sum())
        dir_loss += float(-log_soft[entry.direction_bin])
        soft = np.exp(log_soft)
        soft[entry.direction_bin] -= 1.0
        d_dir[entry.anchor_index] = soft
    reg_loss /= norm
    dir_loss /= norm

    total = w_cls * cls_loss + w_reg * reg_loss + w_dir * dir_loss
    grad = LossGrad(
        d_cls=d_cls.reshape(pred.cls_logits.shape),
        d_reg=(w_reg / norm) * d_reg.reshape(pred.reg_deltas.shape),
        d_dir=(w_dir / norm) * d_dir.reshape(pred.dir_logits.shape),
    )
    terms = {"cls": w_cls * cls_loss, "reg": w_reg * reg_loss, "dir": w_dir * dir_loss}
    return total, grad, terms


def supervised_loss(pred: Prediction, labels: "LabelSet", grid: AnchorGrid):
    total, grad, _ = supervised_loss_detailed(pred, labels, grid)
    return total, grad


# ---------------------------------------------------------------------------
# Optimizer.


@dataclass(frozen=True)
class AdamMemory:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n_params: int) -> "AdamMemory":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), t=0)


def optimizer_step(
    state: DetectorState,
    gradient: np.ndarray,
    memory: AdamMemory,
    lr: float = 0.002,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
):
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != state.params.shape:
        raise ValueError(f"gradient shape {gradient.shape} != params {state.params.shape}")
    if not np.all(np.isfinite(gradient)):
        raise ValueError("non-finite gradient")
    b1, b2 = betas
    t = memory.t + 1
    m = b1 * memory.m + (1.0 - b1) * gradient
    v = b2 * memory.v + (1.0 - b2) * gradient**2
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new_params = state.params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state.with_params(new_params), AdamMemory(m=m, v=v, t=t)


# ---------------------------------------------------------------------------
# Checkpoints.


def save_checkpoint(path, state: DetectorState, config_hash: str) -> None:
    doc = {
        "layout": state.layout(),
        "params": state.params.tolist(),
        "config_hash": config_hash,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, expected_config_hash: str | None = None) -> DetectorState:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if expected_config_hash is not None and doc.get("config_hash") != expected_config_hash:
        raise ValueError(
            f"checkpoint {path} was produced under config hash {doc.get('config_hash')}, "
            f"expected {expected_config_hash}"
        )
    layout = doc["layout"]
    return DetectorState(
        params=np.array(doc["params"], dtype=float),
        anchors_per_cell=int(layout["anchors_per_cell"]),
        channels=int(layout["channels"]),
    )


def config_digest(config_doc: dict) -> str:
    """Stable short hash of a JSON-serializable config mapping."""
    blob = json.dumps(config_doc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
