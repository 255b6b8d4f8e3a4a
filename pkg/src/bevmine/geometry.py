"""Rotated BEV box algebra.

Boxes live in a top-down 2-D plane and carry five parameters: center,
length (along heading), width (across heading), and yaw. Everything here
is exact scalar geometry: IoU by convex polygon clipping, greedy NMS,
anchor-grid indexing, box encode/decode, and rigid SE(2) transforms.
All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = math.fmod(theta + math.pi, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    return wrapped - math.pi


@dataclass(frozen=True)
class BoxBEV:
    """An oriented rectangle in the BEV plane.

    ``length`` runs along the heading (``yaw``), ``width`` across it.
    ``yaw`` is stored normalized to [-pi, pi).
    """

    cx: float
    cy: float
    length: float
    width: float
    yaw: float

    def __post_init__(self):
        if not (self.length > 0.0 and self.width > 0.0):
            raise ValueError(f"box dimensions must be positive, got {self.length}x{self.width}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def area(self) -> float:
        return self.length * self.width

    @property
    def diagonal(self) -> float:
        return math.hypot(self.length, self.width)

    def corners(self) -> list[tuple[float, float]]:
        """Corner coordinates in counter-clockwise order."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        out = []
        for dx, dy in ((-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)):
            out.append((self.cx + dx * c - dy * s, self.cy + dx * s + dy * c))
        return out

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of (N, 2) points falling inside the box footprint."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = pts[:, 0] - self.cx
        dy = pts[:, 1] - self.cy
        local_x = dx * c + dy * s
        local_y = -dx * s + dy * c
        return (np.abs(local_x) <= 0.5 * self.length) & (np.abs(local_y) <= 0.5 * self.width)


@dataclass(frozen=True)
class RegDelta:
    """Anchor-relative box residual.

    Center offsets are normalized by the anchor diagonal, sizes are log
    ratios, yaw is an additive residual.
    """

    dx: float
    dy: float
    dl: float
    dw: float
    dyaw: float

    def __post_init__(self):
        vals = (self.dx, self.dy, self.dl, self.dw, self.dyaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite regression delta {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dl, self.dw, self.dyaw], dtype=float)

    @staticmethod
    def from_array(values) -> "RegDelta":
        dx, dy, dl, dw, dyaw = (float(v) for v in values)
        return RegDelta(dx, dy, dl, dw, dyaw)


@dataclass(frozen=True)
class Pose2D:
    """Rigid agent pose: position plus heading, normalized to [-pi, pi)."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(self.heading))


@dataclass(frozen=True)
class AnchorGrid:
    """The H x W x A anchor lattice.

    Flat anchor index ``i`` occupies grid cell ``i // A``; cells decompose
    row-major into (row, col). Cell centers sit at
    ``origin + ((col + 0.5) * cell, (row + 0.5) * cell)`` with row along y.
    ``templates`` holds A (length, width, yaw) triples.
    """

    height_cells: int
    width_cells: int
    cell_size: float
    origin: tuple[float, float]
    templates: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        if self.height_cells <= 0 or self.width_cells <= 0:
            raise ValueError("grid dims must be positive")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if not self.templates:
            raise ValueError("need at least one anchor template")
        templates = tuple((float(l), float(w), float(y)) for l, w, y in self.templates)
        for l, w, _ in templates:
            if l <= 0 or w <= 0:
                raise ValueError(f"template dimensions must be positive, got {l}x{w}")
        object.__setattr__(self, "templates", templates)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def anchors_per_cell(self) -> int:
        return len(self.templates)

    @property
    def num_cells(self) -> int:
        return self.height_cells * self.width_cells

    @property
    def num_anchors(self) -> int:
        return self.num_cells * self.anchors_per_cell

    def cell_to_rowcol(self, cell: int) -> tuple[int, int]:
        return cell // self.width_cells, cell % self.width_cells

    def cell_center(self, cell: int) -> tuple[float, float]:
        row, col = self.cell_to_rowcol(cell)
        return (
            self.origin[0] + (col + 0.5) * self.cell_size,
            self.origin[1] + (row + 0.5) * self.cell_size,
        )

    def anchor_box(self, flat_index: int) -> BoxBEV:
        """Template footprint of the anchor at ``flat_index``."""
        if not 0 <= flat_index < self.num_anchors:
            raise IndexError(f"anchor index {flat_index} out of range [0, {self.num_anchors})")
        cell, template = divmod(flat_index, self.anchors_per_cell)
        x, y = self.cell_center(cell)
        length, width, yaw = self.templates[template]
        return BoxBEV(x, y, length, width, yaw)

    def cell_centers(self) -> np.ndarray:
        """(num_cells, 2) array of cell centers in flat cell order."""
        rows, cols = np.divmod(np.arange(self.num_cells), self.width_cells)
        xs = self.origin[0] + (cols + 0.5) * self.cell_size
        ys = self.origin[1] + (rows + 0.5) * self.cell_size
        return np.stack([xs, ys], axis=1)

    def contains_point(self, x: float, y: float) -> bool:
        x0, y0 = self.origin
        return (
            x0 <= x <= x0 + self.width_cells * self.cell_size
            and y0 <= y <= y0 + self.height_cells * self.cell_size
        )


def anchor_index_to_grid(flat_index: int, anchors_per_cell: int) -> int:
    """Grid cell occupied by the anchor at ``flat_index``."""
    if flat_index < 0:
        raise IndexError(f"anchor index must be non-negative, got {flat_index}")
    if anchors_per_cell <= 0:
        raise ValueError("anchors_per_cell must be positive")
    return flat_index // anchors_per_cell


# ---------------------------------------------------------------------------
# Rotated IoU via Sutherland-Hodgman clipping + shoelace area.

_DEGENERATE_AREA = 1e-12


def _clip_polygon(subject: list[tuple[float, float]], clipper: list[tuple[float, float]]):
    """Clip a convex polygon against another convex polygon (CCW vertices)."""
    output = subject
    n = len(clipper)
    for i in range(n):
        if len(output) < 3:
            return []
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        # Inside = left of the directed edge a->b for CCW clippers.
        ex, ey = bx - ax, by - ay
        input_pts = output
        output = []
        m = len(input_pts)
        for j in range(m):
            px, py = input_pts[j]
            qx, qy = input_pts[(j + 1) % m]
            p_side = ex * (py - ay) - ey * (px - ax)
            q_side = ex * (qy - ay) - ey * (qx - ax)
            if p_side >= 0.0:
                output.append((px, py))
            if (p_side > 0.0 and q_side < 0.0) or (p_side < 0.0 and q_side > 0.0):
                t = p_side / (p_side - q_side)
                output.append((px + t * (qx - px), py + t * (qy - py)))
    return output


def _shoelace_area(polygon) -> float:
    n = len(polygon)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = polygon[i]
        x1, y1 = polygon[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def intersection_area(a: BoxBEV, b: BoxBEV) -> float:
    """Exact overlap area of two oriented rectangles; degenerate slivers clamp to 0."""
    # No overlap possible when centers are farther apart than the summed half-diagonals.
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > 0.5 * (a.diagonal + b.diagonal):
        return 0.0
    area = _shoelace_area(_clip_polygon(a.corners(), b.corners()))
    if area <= _DEGENERATE_AREA:
        return 0.0
    return area


def rotated_iou(a: BoxBEV, b: BoxBEV) -> float:
    """Intersection-over-union of two oriented BEV rectangles, in [0, 1]."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.area + b.area - inter
    return min(inter / union, 1.0)


def iou_upper_bound(a: BoxBEV, b: BoxBEV) -> float:
    """Cheap upper bound on rotated_iou(a, b) from axis-aligned footprints.

    Used to prune exact clipping; never below the true IoU.
    """
    corners_a = a.corners()
    corners_b = b.corners()
    ax0 = min(p[0] for p in corners_a)
    ax1 = max(p[0] for p in corners_a)
    ay0 = min(p[1] for p in corners_a)
    ay1 = max(p[1] for p in corners_a)
    bx0 = min(p[0] for p in corners_b)
    bx1 = max(p[0] for p in corners_b)
    by0 = min(p[1] for p in corners_b)
    by1 = max(p[1] for p in corners_b)
    w = min(ax1, bx1) - max(ax0, bx0)
    h = min(ay1, by1) - max(ay0, by0)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    inter_ub = min(w * h, a.area, b.area)
    return inter_ub / (a.area + b.area - inter_ub)


def nms(candidates: list[tuple[BoxBEV, float]], overlap_threshold: float) -> list[int]:
    """Greedy non-maximum suppression over (box, score) candidates.

    Processes candidates in descending score order (ties broken by lower
    input position), suppressing any candidate whose IoU with an already
    kept box exceeds ``overlap_threshold``. Returns kept input indices in
    selection order.
    """
    if not 0.0 < overlap_threshold < 1.0:
        raise ValueError(f"overlap_threshold must lie in (0, 1), got {overlap_threshold}")
    for _, score in candidates:
        if not math.isfinite(score):
            raise ValueError("candidate scores must be finite")
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i][1], i))
    kept: list[int] = []
    for i in order:
        box_i = candidates[i][0]
        suppressed = False
        for k in kept:
            box_k = candidates[k][0]
            if iou_upper_bound(box_i, box_k) <= overlap_threshold:
                continue
            if rotated_iou(box_i, box_k) > overlap_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept


# ---------------------------------------------------------------------------
# Anchor-relative box coding.


def decode_box(anchor: BoxBEV, delta: RegDelta) -> BoxBEV:
    """Apply a regression delta to an anchor box."""
    diag = anchor.diagonal
    return BoxBEV(
        cx=anchor.cx + delta.dx * diag,
        cy=anchor.cy + delta.dy * diag,
        length=anchor.length * math.exp(delta.dl),
        width=anchor.width * math.exp(delta.dw),
        yaw=normalize_angle(anchor.yaw + delta.dyaw),
    )


def encode_box(anchor: BoxBEV, target: BoxBEV) -> RegDelta:
    """Inverse of :func:`decode_box`: the delta carrying ``anchor`` onto ``target``."""
    diag = anchor.diagonal
    return RegDelta(
        dx=(target.cx - anchor.cx) / diag,
        dy=(target.cy - anchor.cy) / diag,
        dl=math.log(target.length / anchor.length),
        dw=math.log(target.width / anchor.width),
        dyaw=target.yaw - anchor.yaw,
    )


def fold_yaw(yaw: float, reference: float) -> float:
    """The representation of ``yaw`` modulo pi nearest to ``reference``.

    A BEV rectangle is unchanged by a half turn, so ``yaw`` and ``yaw + pi``
    describe the same footprint; regression targets must use the
    representative within a quarter turn of the anchor or the residual
    becomes bimodal and unlearnable. The heading half the fold discards is
    carried by the direction bin instead.
    """
    return yaw - math.pi * round((yaw - reference) / math.pi)


# ---------------------------------------------------------------------------
# SE(2) frame changes.


def transform_points(points: np.ndarray, from_pose: Pose2D, to_pose: Pose2D) -> np.ndarray:
    """Re-express (N, 2) points given in ``from_pose``'s frame in ``to_pose``'s frame."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    cf, sf = math.cos(from_pose.heading), math.sin(from_pose.heading)
    gx = from_pose.x + pts[:, 0] * cf - pts[:, 1] * sf
    gy = from_pose.y + pts[:, 0] * sf + pts[:, 1] * cf
    ct, st = math.cos(to_pose.heading), math.sin(to_pose.heading)
    dx = gx - to_pose.x
    dy = gy - to_pose.y
    return np.stack([dx * ct + dy * st, -dx * st + dy * ct], axis=1)


def transform_box(box: BoxBEV, from_pose: Pose2D, to_pose: Pose2D) -> BoxBEV:
    """Re-express a box given in ``from_pose``'s frame in ``to_pose``'s frame."""
    center = transform_points(np.array([[box.cx, box.cy]]), from_pose, to_pose)[0]
    return BoxBEV(
        cx=float(center[0]),
        cy=float(center[1]),
        length=box.length,
        width=box.width,
        yaw=normalize_angle(box.yaw + from_pose.heading - to_pose.heading),
    )


GLOBAL_FRAME = Pose2D(0.0, 0.0, 0.0)
