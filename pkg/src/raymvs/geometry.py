"""Pinhole cameras, plane-sweep warping, epipolar segments, and grid sampling."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BEHIND_EPS = 1e-9


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


@dataclass
class CameraView:
    """A posed pinhole view; world-to-camera convention, x_cam = R x + t."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image: np.ndarray | None = None
    id: int = 1

    def __post_init__(self):
        self.K = _as_f64(self.K)
        self.R = _as_f64(self.R)
        self.t = _as_f64(self.t).reshape(3)
        if self.K.shape != (3, 3) or self.R.shape != (3, 3):
            raise ValueError("K and R must be 3x3")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise ValueError("R must have unit determinant")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9):
            raise ValueError("R must be orthonormal")
        lower = [self.K[1, 0], self.K[2, 0], self.K[2, 1]]
        if np.max(np.abs(lower)) > 0 or min(self.K[0, 0], self.K[1, 1], self.K[2, 2]) <= 0:
            raise ValueError("K must be upper-triangular with positive diagonal")
        if self.image is not None:
            self.image = _as_f64(self.image)
            if self.image.ndim != 3:
                raise ValueError("image must be [C, H, W]")

    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t


@dataclass
class Ray:
    """A viewing ray with unit direction, tagged with its source pixel."""

    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.origin = _as_f64(self.origin).reshape(3)
        self.direction = _as_f64(self.direction).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")


def project(point, view):
    """Project a world point into a view.

    Args:
        point: 3-vector in world coordinates (meters).
        view: CameraView.

    Returns:
        (u, v, depth) with (u, v) in pixels and depth the camera-frame z.

    Raises:
        ValueError: if the point is behind the camera (depth <= 1e-9).
    """
    x_cam = view.R @ _as_f64(point).reshape(3) + view.t
    depth = x_cam[2]
    if depth <= BEHIND_EPS:
        raise ValueError("point is behind the camera")
    uvw = view.K @ x_cam
    return float(uvw[0] / uvw[2]), float(uvw[1] / uvw[2]), float(depth)


def backproject(pixel, depth, view):
    """Lift a pixel at a given camera-frame depth to a world point.

    Args:
        pixel: (u, v) pixel coordinates.
        depth: camera-frame z, must be positive.
        view: CameraView.

    Returns:
        3-vector world point with project(point, view) == (u, v, depth).
    """
    if depth <= 0:
        raise ValueError("depth must be positive")
    u, v = float(pixel[0]), float(pixel[1])
    x_cam = depth * (np.linalg.inv(view.K) @ np.array([u, v, 1.0]))
    return view.R.T @ (x_cam - view.t)


def project_points(points, view):
    """Vectorized pinhole projection of [M, 3] world points.

    Returns:
        (uv [M, 2], depth [M]); rows with depth <= 1e-9 carry unusable uv and
        must be masked by the caller.
    """
    pts = _as_f64(points).reshape(-1, 3)
    x_cam = pts @ view.R.T + view.t
    depth = x_cam[:, 2]
    uvw = x_cam @ view.K.T
    w = np.where(np.abs(uvw[:, 2]) > 1e-300, uvw[:, 2], 1.0)
    uv = uvw[:, :2] / w[:, None]
    return uv, depth


def backproject_pixels(uv, depth, view):
    """Vectorized lift of [M, 2] pixels at [M] depths to world points."""
    uv = _as_f64(uv).reshape(-1, 2)
    d = _as_f64(depth).reshape(-1)
    ones = np.ones((uv.shape[0], 1))
    x_cam = d[:, None] * (np.hstack([uv, ones]) @ np.linalg.inv(view.K).T)
    return (x_cam - view.t) @ view.R


def ray_through_pixel(view, pixel):
    """The world-space viewing ray of a pixel, origin at the camera center."""
    far = backproject(pixel, 1.0, view)
    origin = view.center()
    direction = far - origin
    direction = direction / np.linalg.norm(direction)
    return Ray(origin, direction, pixel=(float(pixel[0]), float(pixel[1])))


def rays_through_pixels(view, uv):
    """Vectorized ray construction: returns (origins [M, 3], directions [M, 3])."""
    pts = backproject_pixels(uv, np.ones(len(uv)), view)
    origin = view.center()
    dirs = pts - origin
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.broadcast_to(origin, dirs.shape).copy(), dirs


def ray_depth_scale(view, directions):
    """Camera-frame z advanced per unit of ray-distance travel, per ray."""
    d = _as_f64(directions).reshape(-1, 3)
    return d @ view.R[2]


def bilinear_sample(image, u, v):
    """Sample an image at one subpixel location.

    Args:
        image: Tensor[C, H, W].
        u: horizontal coordinate (0 .. W-1 in bounds).
        v: vertical coordinate (0 .. H-1 in bounds).

    Returns:
        (values [C], in_bounds flag); out-of-bounds samples are zeros.
    """
    vals, valid = bilinear_sample_many(image, np.array([u]), np.array([v]))
    return vals[0], bool(valid[0])


def bilinear_sample_many(image, u, v):
    """Vectorized bilinear sampling.

    Args:
        image: Tensor[C, H, W] with H, W >= 2.
        u, v: coordinate arrays of shape [M].

    Returns:
        (values [M, C], valid [M]); invalid rows are zero-filled.
    """
    image = _as_f64(image)
    C, H, W = image.shape
    if H < 2 or W < 2:
        raise ValueError("image must be at least 2x2")
    u = _as_f64(u).reshape(-1)
    v = _as_f64(v).reshape(-1)
    valid = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.clip(u, 0.0, W - 1.0)
    vc = np.clip(v, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(uc), W - 2).astype(np.int64)
    y0 = np.minimum(np.floor(vc), H - 2).astype(np.int64)
    wx = uc - x0
    wy = vc - y0
    flat = image.reshape(C, H * W)
    i00 = y0 * W + x0
    v00 = flat[:, i00]
    v01 = flat[:, i00 + 1]
    v10 = flat[:, i00 + W]
    v11 = flat[:, i00 + W + 1]
    out = ((1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)).T
    out[~valid] = 0.0
    return out, valid


def bilinear_sample_cache(image_shape, u, v):
    """Precompute indices/weights so repeated samples and scatters skip setup."""
    C, H, W = image_shape
    u = _as_f64(u).reshape(-1)
    v = _as_f64(v).reshape(-1)
    valid = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.clip(u, 0.0, W - 1.0)
    vc = np.clip(v, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(uc), W - 2).astype(np.int64)
    y0 = np.minimum(np.floor(vc), H - 2).astype(np.int64)
    wx = (uc - x0) * valid
    wy = (vc - y0) * valid
    base = y0 * W + x0
    idx = np.stack([base, base + 1, base + W, base + W + 1])
    w = np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx])
    w *= valid  # zero weight everywhere off-image
    return idx, w, valid


def bilinear_apply(image, cache):
    """Sample through a precomputed cache; returns [M, C]."""
    idx, w, _ = cache
    flat = image.reshape(image.shape[0], -1)
    out = np.zeros((idx.shape[1], image.shape[0]))
    for c in range(4):
        out += w[c][:, None] * flat[:, idx[c]].T
    return out


def bilinear_scatter(grad_out, cache, image_shape):
    """Adjoint of bilinear_apply: accumulate [M, C] grads into [C, H, W]."""
    idx, w, _ = cache
    C, H, W = image_shape
    grad = np.zeros(C * H * W)
    ch = np.arange(C, dtype=np.int64)
    for c in range(4):
        combined = (idx[c][:, None] * C + ch).ravel()
        vals = (grad_out * w[c][:, None]).ravel()
        grad += np.bincount(combined, weights=vals, minlength=C * H * W)
    return grad.reshape(H * W, C).T.reshape(C, H, W)


def trilinear_sample(volume, x, y, z):
    """Sample a volume at one fractional lattice location.

    Args:
        volume: Tensor[C, D, H, W]; z indexes D, y indexes H, x indexes W.

    Returns:
        (values [C], in_bounds flag); out-of-bounds samples are zeros.
    """
    vals, valid = trilinear_sample_many(volume, np.array([x]), np.array([y]), np.array([z]))
    return vals[0], bool(valid[0])


def trilinear_cache(vol_shape, x, y, z):
    """Precompute corner indices/weights for trilinear sampling and its adjoint."""
    C, D, H, W = vol_shape
    if D < 2 or H < 2 or W < 2:
        raise ValueError("volume must be at least 2x2x2")
    x = _as_f64(x).reshape(-1)
    y = _as_f64(y).reshape(-1)
    z = _as_f64(z).reshape(-1)
    valid = ((x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
             & (z >= 0) & (z <= D - 1))
    xc = np.clip(x, 0.0, W - 1.0)
    yc = np.clip(y, 0.0, H - 1.0)
    zc = np.clip(z, 0.0, D - 1.0)
    x0 = np.minimum(np.floor(xc), W - 2).astype(np.int64)
    y0 = np.minimum(np.floor(yc), H - 2).astype(np.int64)
    z0 = np.minimum(np.floor(zc), D - 2).astype(np.int64)
    wx, wy, wz = xc - x0, yc - y0, zc - z0
    base = (z0 * H + y0) * W + x0
    idx = np.stack([
        base, base + 1, base + W, base + W + 1,
        base + H * W, base + H * W + 1, base + H * W + W, base + H * W + W + 1,
    ])
    w = np.stack([
        (1 - wz) * (1 - wy) * (1 - wx), (1 - wz) * (1 - wy) * wx,
        (1 - wz) * wy * (1 - wx), (1 - wz) * wy * wx,
        wz * (1 - wy) * (1 - wx), wz * (1 - wy) * wx,
        wz * wy * (1 - wx), wz * wy * wx,
    ])
    w *= valid
    return idx, w, valid


def trilinear_apply(volume, cache):
    """Sample through a precomputed cache; returns [M, C]."""
    idx, w, _ = cache
    flat = volume.reshape(volume.shape[0], -1)
    out = np.zeros((idx.shape[1], volume.shape[0]))
    for c in range(8):
        out += w[c][:, None] * flat[:, idx[c]].T
    return out


def trilinear_scatter(grad_out, cache, vol_shape):
    """Adjoint of trilinear_apply: accumulate [M, C] grads into [C, D, H, W]."""
    idx, w, _ = cache
    C, D, H, W = vol_shape
    n = D * H * W
    grad = np.zeros(n * C)
    ch = np.arange(C, dtype=np.int64)
    for c in range(8):
        combined = (idx[c][:, None] * C + ch).ravel()
        vals = (grad_out * w[c][:, None]).ravel()
        grad += np.bincount(combined, weights=vals, minlength=n * C)
    return grad.reshape(n, C).T.reshape(C, D, H, W)


def trilinear_sample_many(volume, x, y, z):
    """Vectorized trilinear sampling; returns (values [M, C], valid [M])."""
    volume = _as_f64(volume)
    cache = trilinear_cache(volume.shape, x, y, z)
    vals = trilinear_apply(volume, cache)
    vals[~cache[2]] = 0.0
    return vals, cache[2]


def sweep_warp(src, ref, depth, grid=None, depth_range=None):
    """Warp a source view onto a fronto-parallel plane of the reference view.

    Args:
        src: CameraView supplying the image to sample.
        ref: CameraView whose pixel lattice defines the sweep plane.
        depth: plane depth in the reference camera frame.
        grid: optional (H, W) lattice size; defaults to ref.image's.
        depth_range: optional (d_min, d_max) bound that depth must respect.

    Returns:
        (warped [C, H, W], valid [H, W]); out-of-bounds samples are zeros.
    """
    for m in (src.K, src.R, src.t, ref.K, ref.R, ref.t):
        if not np.all(np.isfinite(m)):
            raise ValueError("camera pose contains non-finite values")
    if depth_range is not None and not (depth_range[0] <= depth <= depth_range[1]):
        raise ValueError("depth outside configured range")
    if grid is None:
        if ref.image is None:
            raise ValueError("grid size required when ref has no image")
        grid = ref.image.shape[1:]
    H, W = grid
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    pts = backproject_pixels(uv, np.full(H * W, float(depth)), ref)
    uv_src, z_src = project_points(pts, src)
    vals, valid = bilinear_sample_many(src.image, uv_src[:, 0], uv_src[:, 1])
    in_front = z_src > BEHIND_EPS
    vals[~in_front] = 0.0
    valid = valid & in_front
    C = src.image.shape[0]
    return vals.T.reshape(C, H, W), valid.reshape(H, W)


def epipolar_line(ref_pixel, ref, src, depth_range):
    """Project a reference ray segment into a source view.

    Args:
        ref_pixel: (u, v) in the reference image.
        ref, src: CameraViews.
        depth_range: (d_min, d_max) hypothesis depths along the reference ray.

    Returns:
        [2, 2] array of segment endpoints in source pixels, at d_min and d_max.
        Zero baseline with identical pose degenerates to a repeated point.

    Raises:
        ValueError: if the whole segment lies behind the source camera.
    """
    d_min, d_max = float(depth_range[0]), float(depth_range[1])
    if not (0 < d_min <= d_max):
        raise ValueError("invalid depth range")
    p_near = backproject(ref_pixel, d_min, ref)
    p_far = backproject(ref_pixel, d_max, ref)
    # camera-frame z is affine in depth along the ray
    z_near = (src.R @ p_near + src.t)[2]
    z_far = (src.R @ p_far + src.t)[2]
    if z_near <= BEHIND_EPS and z_far <= BEHIND_EPS:
        raise ValueError("epipolar segment entirely behind source camera")
    lo, hi = d_min, d_max
    if min(z_near, z_far) <= BEHIND_EPS:
        # clip the behind-camera end to where z crosses a small positive margin
        margin = 1e-6
        cross = d_min + (d_max - d_min) * (margin - z_near) / (z_far - z_near)
        if z_near <= BEHIND_EPS:
            lo = cross
        else:
            hi = cross
    ends = []
    for d in (lo, hi):
        u, v, _ = project(backproject(ref_pixel, d, ref), src)
        ends.append([u, v])
    return np.array(ends)


def save_cameras(path, cameras):
    """Write camera blocks: 3 lines of K, 3 of [R|t], one depth-range line.

    Args:
        path: output file.
        cameras: iterable of (K, R, t, (d_min, d_max)).
    """
    lines = []
    for K, R, t, (d_min, d_max) in cameras:
        K, R, t = _as_f64(K), _as_f64(R), _as_f64(t).reshape(3)
        for row in K:
            lines.append(" ".join(f"{x:.17g}" for x in row))
        for row, ti in zip(R, t):
            lines.append(" ".join(f"{x:.17g}" for x in row) + f" {ti:.17g}")
        lines.append(f"{d_min:.17g} {d_max:.17g}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def load_cameras(path):
    """Parse camera blocks written by save_cameras.

    Returns:
        list of (K, R, t, (d_min, d_max)) tuples.
    """
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(rows) % 7 != 0:
        raise ValueError("malformed camera file")
    cameras = []
    for b in range(0, len(rows), 7):
        K = np.array([[float(x) for x in rows[b + i]] for i in range(3)])
        Rt = np.array([[float(x) for x in rows[b + 3 + i]] for i in range(3)])
        rng = rows[b + 6]
        if K.shape != (3, 3) or Rt.shape != (3, 4) or len(rng) != 2:
            raise ValueError("malformed camera block")
        cameras.append((K, Rt[:, :3], Rt[:, 3], (float(rng[0]), float(rng[1]))))
    return cameras
