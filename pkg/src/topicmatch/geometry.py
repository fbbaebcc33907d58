"""Projective geometry: homographies, fundamental matrices, epipolar
distances, ground-truth correspondence generation, and accuracy metrics.

Conventions used throughout the package:

- Pixel centers sit at integer coordinates; a point is (x, y) with x along
  image columns and y along rows.
- A coarse cell of side ``cell_px`` covering pixel columns ``c*cell_px ..
  (c+1)*cell_px - 1`` has its continuous center at ``(c + 0.5) * cell_px - 0.5``.
- :class:`CameraPose` stores the transform from the *second* view's camera
  frame into the first view's frame (``X_a = R @ X_b + t``). Under this
  convention ``F = K^-T [t]x R K^-1`` satisfies ``x_a^T F x_b = 0`` for any
  correspondence (x_a in view A, x_b in view B).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegeneratePose,
    DegenerateWarp,
    EmptyInput,
    InsufficientMatches,
    NoConsensus,
    ShapeError,
    UndefinedDistance,
)
from .validation import as_points, check_matrix

_W_EPS = 1e-12


@dataclass(frozen=True)
class Homography:
    """Non-degenerate 3x3 plane projective transform, scaled so h[2,2] = 1."""

    h: np.ndarray

    def __post_init__(self):
        h = check_matrix(self.h, (3, 3), "homography")
        if abs(np.linalg.det(h)) < 1e-12:
            raise DegenerateWarp("homography is singular")
        if abs(h[2, 2]) > _W_EPS:
            h = h / h[2, 2]
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        h = np.eye(3)
        h[0, 2] = tx
        h[1, 2] = ty
        return cls(h)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def compose(self, other: "Homography") -> "Homography":
        """Return the transform applying ``other`` first, then ``self``."""
        return Homography(self.h @ other.h)


@dataclass(frozen=True)
class FundamentalMatrix:
    """Rank-2 fundamental matrix, normalized to unit Frobenius norm.

    The sign is fixed so the entry of largest magnitude is positive, which
    makes construction deterministic; epipolar distances are sign-invariant.
    """

    f: np.ndarray

    def __post_init__(self):
        f = check_matrix(self.f, (3, 3), "fundamental matrix")
        norm = np.linalg.norm(f)
        if norm < _W_EPS:
            raise ShapeError("fundamental matrix is (near) zero")
        f = f / norm
        pivot = np.unravel_index(np.argmax(np.abs(f)), f.shape)
        if f[pivot] < 0:
            f = -f
        svals = np.linalg.svd(f, compute_uv=False)
        if svals[2] > 1e-6 * svals[0]:
            raise ShapeError(
                f"fundamental matrix must be rank 2 (sv ratio {svals[2] / svals[0]:.3g})"
            )
        object.__setattr__(self, "f", f)


@dataclass(frozen=True)
class CameraPose:
    """Relative pose mapping view-B camera coordinates into view A's frame,
    plus the shared pinhole intrinsics."""

    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: np.ndarray

    def __post_init__(self):
        r = check_matrix(self.rotation, (3, 3), "rotation")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ShapeError("rotation is not orthonormal within 1e-9")
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        k = check_matrix(self.intrinsics, (3, 3), "intrinsics")
        if abs(k[2, 2] - 1.0) > 1e-12 or np.abs(k[np.tril_indices(3, -1)]).max() > 1e-12:
            raise ShapeError("intrinsics must be upper triangular with k[2,2] = 1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "intrinsics", k)


@dataclass
class CorrespondenceSet:
    """Paired 2D pixel coordinates, optionally weighted by confidence."""

    points_a: np.ndarray
    points_b: np.ndarray
    weights: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.points_a = as_points(self.points_a)
        self.points_b = as_points(self.points_b)
        if len(self.points_a) != len(self.points_b):
            raise ShapeError(
                f"point lists differ in length: {len(self.points_a)} vs {len(self.points_b)}"
            )
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if len(w) != len(self.points_a):
                raise ShapeError("weights length mismatch")
            if w.min() < 0 or w.max() > 1:
                raise ShapeError("weights must lie in [0, 1]")
            self.weights = w

    def __len__(self) -> int:
        return len(self.points_a)


def _homogeneous(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def warp_points(h: Homography, pts) -> np.ndarray:
    """Apply a homography to (N, 2) points and dehomogenize."""
    arr = as_points(pts)
    mapped = _homogeneous(arr) @ h.h.T
    w = mapped[:, 2]
    if np.abs(w).min() < _W_EPS:
        raise DegenerateWarp("warped point has near-zero homogeneous w component")
    return mapped[:, :2] / w[:, None]


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x with [v]x @ u = v x u."""
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def fundamental_from_pose(pose_rel: CameraPose) -> FundamentalMatrix:
    """Build F = K^-T [t]x R K^-1 from a relative pose (see module conventions)."""
    t = pose_rel.translation
    if np.linalg.norm(t) <= 1e-9:
        raise DegeneratePose("translation is (near) zero; no fundamental matrix exists")
    k_inv = np.linalg.inv(pose_rel.intrinsics)
    f = k_inv.T @ skew(t) @ pose_rel.rotation @ k_inv
    return FundamentalMatrix(f)


def project_two_views(pose: CameraPose, points_xyz) -> tuple[np.ndarray, np.ndarray]:
    """Project 3D points (given in view A's camera frame) into both images.

    View B coordinates follow the pose convention: X_b = R^T (X_a - t).
    """
    pts = np.asarray(points_xyz, dtype=np.float64).reshape(-1, 3)
    k = pose.intrinsics
    xa = pts @ k.T
    xb = (pts - pose.translation) @ pose.rotation @ k.T
    if np.abs(xa[:, 2]).min() < _W_EPS or np.abs(xb[:, 2]).min() < _W_EPS:
        raise DegenerateWarp("3D point projects to the plane at infinity")
    return xa[:, :2] / xa[:, 2:3], xb[:, :2] / xb[:, 2:3]


def plane_induced_homography(pose: CameraPose, plane_normal, plane_depth: float) -> Homography:
    """Homography mapping view-A pixels to view-B pixels for a world plane.

    The plane is ``n^T X = d`` in view A's camera frame with ``d > 0``.
    """
    n = np.asarray(plane_normal, dtype=np.float64).reshape(3)
    if plane_depth <= 0:
        raise ShapeError("plane depth must be positive")
    k = pose.intrinsics
    r_ab = pose.rotation.T
    t_ab = -r_ab @ pose.translation
    h = k @ (r_ab + np.outer(t_ab, n) / plane_depth) @ np.linalg.inv(k)
    return Homography(h)


def symmetric_epipolar_distance(f: FundamentalMatrix, x, y) -> float:
    """First-order geometric error of a correspondence against F.

    Returns ``(x^T F y)^2 * (1/||F^T x||_{0:2}^2 + 1/||F y||_{0:2}^2)`` with
    x in view A and y in view B. A correspondence that satisfies the
    constraint exactly scores 0 even at an epipole; if both line norms
    vanish the distance is undefined and UndefinedDistance is raised.
    """
    xp = _homogeneous(as_points(x))[0]
    yp = _homogeneous(as_points(y))[0]
    fm = f.f
    line_b = fm.T @ xp
    line_a = fm @ yp
    d1 = line_b[0] ** 2 + line_b[1] ** 2
    d2 = line_a[0] ** 2 + line_a[1] ** 2
    if d1 < _W_EPS and d2 < _W_EPS:
        raise UndefinedDistance("both points lie at epipoles; distance undefined")
    num = float(xp @ fm @ yp) ** 2
    if num == 0.0:
        return 0.0
    return num / d1 + num / d2


def _hartley_normalization(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translate centroid to origin and scale mean radius to sqrt(2)."""
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = np.sqrt((centered**2).sum(axis=1)).mean()
    scale = np.sqrt(2.0) / max(mean_dist, 1e-12)
    t = np.array(
        [[scale, 0.0, -scale * centroid[0]], [0.0, scale, -scale * centroid[1]], [0.0, 0.0, 1.0]]
    )
    return centered * scale, t


def _dlt_homography(pts_a: np.ndarray, pts_b: np.ndarray) -> Homography:
    """Normalized direct linear transform from >= 4 correspondences."""
    na, ta = _hartley_normalization(pts_a)
    nb, tb = _hartley_normalization(pts_b)
    n = len(na)
    a = np.zeros((2 * n, 9))
    src = _homogeneous(na)
    for i in range(n):
        u, v = nb[i]
        a[2 * i, 0:3] = src[i]
        a[2 * i, 6:9] = -u * src[i]
        a[2 * i + 1, 3:6] = src[i]
        a[2 * i + 1, 6:9] = -v * src[i]
    _, _, vt = np.linalg.svd(a)
    h_norm = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(tb) @ h_norm @ ta)


def _symmetric_transfer_errors(h: Homography, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """Per-pair sqrt(forward^2 + backward^2) transfer error in pixels."""
    try:
        fwd = warp_points(h, pts_a) - pts_b
        bwd = warp_points(h.inverse(), pts_b) - pts_a
    except DegenerateWarp:
        return np.full(len(pts_a), np.inf)
    return np.sqrt((fwd**2).sum(axis=1) + (bwd**2).sum(axis=1))


def estimate_homography_ransac(
    c: CorrespondenceSet,
    threshold_px: float,
    iters: int = 1000,
    seed: int = 0,
    return_inliers: bool = False,
):
    """RANSAC over normalized 4-point DLT fits, refit on the best inlier set.

    Inliers are pairs whose symmetric transfer error is <= threshold_px.
    Deterministic for a fixed seed.
    """
    n = len(c)
    if n < 4:
        raise InsufficientMatches(f"need >= 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best_count = 0
    best_mask = None
    for _ in range(iters):
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = _dlt_homography(c.points_a[idx], c.points_b[idx])
        except (DegenerateWarp, np.linalg.LinAlgError):
            continue
        errs = _symmetric_transfer_errors(h, c.points_a, c.points_b)
        mask = errs <= threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < 4:
        raise NoConsensus(f"best inlier set has {best_count} < 4 correspondences")
    h_fit = _dlt_homography(c.points_a[best_mask], c.points_b[best_mask])
    # one re-selection pass with the refit model tightens borderline inliers
    errs = _symmetric_transfer_errors(h_fit, c.points_a, c.points_b)
    mask = errs <= threshold_px
    if mask.sum() >= 4:
        h_fit = _dlt_homography(c.points_a[mask], c.points_b[mask])
        best_mask = mask
    if return_inliers:
        return h_fit, np.flatnonzero(best_mask)
    return h_fit


def corner_error(h_est: Homography, h_gt: Homography, width: int, height: int) -> float:
    """Mean displacement of the four image corners under h_est vs h_gt."""
    corners = np.array(
        [[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]]
    )
    d = warp_points(h_est, corners) - warp_points(h_gt, corners)
    return float(np.sqrt((d**2).sum(axis=1)).mean())


def auc_at_thresholds(errors, thresholds) -> list[float]:
    """Area under the cumulative accuracy curve, normalized per threshold.

    The curve linearly interpolates the sorted-error recall points (the
    convention of the pose/homography evaluation code this field shares);
    errors above a threshold contribute zero accuracy there.
    """
    errs = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errs.size == 0:
        raise EmptyInput("no errors to integrate")
    if errs.min() < 0:
        raise ShapeError("errors must be nonnegative")
    ths = list(thresholds)
    if any(t <= 0 for t in ths) or any(b <= a for a, b in zip(ths, ths[1:])):
        raise ShapeError("thresholds must be positive and ascending")
    order = np.argsort(errs)
    sorted_errs = np.concatenate([[0.0], errs[order]])
    recall = np.concatenate([[0.0], (np.arange(errs.size) + 1) / errs.size])
    out = []
    for t in ths:
        last = np.searchsorted(sorted_errs, t, side="right")
        e = np.concatenate([sorted_errs[:last], [t]])
        r = np.concatenate([recall[:last], [recall[last - 1]]])
        out.append(float(np.trapezoid(r, x=e) / t))
    return out


def coarse_cell_centers(grid_shape: tuple[int, int], cell_px: int) -> np.ndarray:
    """Continuous pixel-center coordinates (x, y) of every cell, row-major."""
    rows, cols = grid_shape
    cy = (np.arange(rows) + 0.5) * cell_px - 0.5
    cx = (np.arange(cols) + 0.5) * cell_px - 0.5
    gx, gy = np.meshgrid(cx, cy)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def gt_coarse_matches(
    h: Homography,
    grid_a: tuple[int, int],
    grid_b: tuple[int, int],
    cell_px: int = 8,
) -> list[tuple[int, int]]:
    """Ground-truth coarse cell pairs induced by a homography.

    Each A-cell center is warped into B; the pair is kept when the warped
    point lies within half a cell (Euclidean) of its nearest in-bounds
    B-cell center. One-to-one: a B cell keeps only its closest A cell,
    ties broken toward the lower A index.
    """
    rows_b, cols_b = grid_b
    centers_a = coarse_cell_centers(grid_a, cell_px)
    warped = warp_points(h, centers_a)
    nearest = np.round((warped + 0.5) / cell_px - 0.5).astype(int)
    centers_of_nearest = (nearest + 0.5) * cell_px - 0.5
    dist = np.sqrt(((warped - centers_of_nearest) ** 2).sum(axis=1))
    in_bounds = (
        (nearest[:, 0] >= 0)
        & (nearest[:, 0] < cols_b)
        & (nearest[:, 1] >= 0)
        & (nearest[:, 1] < rows_b)
    )
    ok = in_bounds & (dist <= cell_px / 2.0)
    best_for_b: dict[int, tuple[float, int]] = {}
    for i in np.flatnonzero(ok):
        j = int(nearest[i, 1] * cols_b + nearest[i, 0])
        cand = (float(dist[i]), int(i))
        if j not in best_for_b or cand < best_for_b[j]:
            best_for_b[j] = cand
    pairs = sorted((i, j) for j, (_, i) in best_for_b.items())
    return pairs
