"""Local-frustum context: neighbor-ray variances, Gumbel gating, and masked feature aggregation."""

from dataclasses import dataclass

import numpy as np

from raymvs import kernels
from raymvs.kernels import mlp_backward, mlp_forward
from raymvs.ray_field import RAY_HIDDEN, init_mlp_head

NEIGHBOR_WIDTH_DEFAULT = 9
GATE_HIDDEN = (16, 8)
GATE_TEMPERATURE_DEFAULT = 1.0
SPARSITY_WEIGHT_DEFAULT = 0.01


def neighbor_count(width):
    """Number of neighbor slots for a window of the given width."""
    return (width + 1) ** 2 - 1


def neighbor_offsets(width):
    """Pixel offsets of a (width+1) x (width+1) window around its center, center excluded.

    The center sits at the window's centroid rounded down, so a width-9 window
    spans offsets -4..+5 on both axes.

    Args:
        width: odd window width parameter.
    Returns:
        [theta, 2] int64 array of (dy, dx) offsets in row-major window order.
    """
    if width < 1 or width % 2 == 0:
        raise ValueError(f"window width must be odd and >= 1, got {width}")
    extent = width + 1
    center = (extent - 1) // 2
    span = range(-center, extent - center)
    offs = [(dy, dx) for dy in span for dx in span if (dy, dx) != (0, 0)]
    return np.asarray(offs, dtype=np.int64)


def frustum_enabled(width):
    """Width 1 turns the whole stage into a no-op."""
    return width > 1


def _shift_window(h, w, dy, dx):
    # center pixels (y, x) whose neighbor (y+dy, x+dx) stays inside the image
    y0, y1 = max(0, -dy), h - max(0, dy)
    x0, x1 = max(0, -dx), w - max(0, dx)
    return y0, max(y0, y1), x0, max(x0, x1)


def neighbor_validity(image_size, width):
    """Which window slots stay inside the image, for every pixel.

    Args:
        image_size: (H, W).
        width: odd window width parameter.
    Returns:
        [H*W, theta] bool mask in row-major pixel order.
    """
    h, w = image_size
    offsets = neighbor_offsets(width)
    valid = np.zeros((h, w, len(offsets)), dtype=bool)
    for i, (dy, dx) in enumerate(offsets):
        y0, y1, x0, x1 = _shift_window(h, w, dy, dx)
        valid[y0:y1, x0:x1, i] = True
    return valid.reshape(h * w, len(offsets))


@dataclass
class FrustumNeighborhood:
    """Ray (and optional point) features of one pixel's window neighbors."""

    center: tuple
    width: int
    ray_features: np.ndarray
    valid: np.ndarray
    point_features: np.ndarray = None

    def __post_init__(self):
        theta = neighbor_count(self.width)
        self.ray_features = np.asarray(self.ray_features, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.ray_features.shape[0] != theta or self.ray_features.ndim != 2:
            raise ValueError(f"expected [{theta}, kappa] ray features, got {self.ray_features.shape}")
        if self.valid.shape != (theta,):
            raise ValueError(f"expected [{theta}] validity mask, got {self.valid.shape}")
        if np.any(self.ray_features[~self.valid] != 0.0):
            raise ValueError("out-of-image neighbors must carry zero features")
        if self.point_features is not None:
            self.point_features = np.asarray(self.point_features, dtype=np.float64)
            if self.point_features.shape[0] != theta:
                raise ValueError("point features must have one row per neighbor slot")
            if np.any(self.point_features[~self.valid] != 0.0):
                raise ValueError("out-of-image neighbors must carry zero features")

    @property
    def theta(self):
        return self.ray_features.shape[0]


@dataclass
class GateDecision:
    """Soft and hard neighbor-selection masks; hard's gradient is defined as soft's."""

    soft: np.ndarray
    hard: np.ndarray

    def __post_init__(self):
        self.soft = np.asarray(self.soft, dtype=np.float64)
        self.hard = np.asarray(self.hard, dtype=np.float64)
        if self.soft.shape != self.hard.shape:
            raise ValueError("soft and hard masks must share a shape")
        if np.any((self.hard != 0.0) & (self.hard != 1.0)):
            raise ValueError("hard mask must be binary")
        if np.any(self.soft < 0.0) or np.any(self.soft > 1.0):
            raise ValueError("soft mask must lie in [0, 1]")

    @property
    def count(self):
        return self.hard.sum(axis=-1)


def build_ray_feature_map(pixels, features, image_size):
    """Scatter per-ray features into a map keyed by each ray's pixel.

    Args:
        pixels: [M, 2] integer (u, v) coordinates covering each pixel exactly once.
        features: [M, C] per-ray features.
        image_size: (H, W) with H*W == M.
    Returns:
        [C, H, W] map with map[:, v, u] equal to the ray's feature.
    """
    h, w = image_size
    pixels = np.asarray(pixels)
    features = np.asarray(features, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != 2 or pixels.shape[0] != features.shape[0]:
        raise ValueError("expected matching [M, 2] pixels and [M, C] features")
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any(u < 0) or np.any(u >= w) or np.any(v < 0) or np.any(v >= h):
        raise ValueError("pixel coordinates fall outside the image")
    counts = np.bincount(v * w + u, minlength=h * w)
    if features.shape[0] != h * w or np.any(counts != 1):
        raise ValueError("each pixel must be covered by exactly one ray")
    out = np.zeros((features.shape[1], h, w))
    out[:, v, u] = features.T
    return out


def gather_neighborhood(ray_map, pixel, width, point_features=None):
    """Collect one pixel's window neighbors from a ray feature map.

    Args:
        ray_map: [C, H, W] map from build_ray_feature_map.
        pixel: (u, v) center coordinates.
        width: odd window width parameter.
        point_features: optional [H*W, K, C_p] per-ray point features, row-major.
    Returns:
        FrustumNeighborhood with zeroed out-of-image slots.
    """
    c, h, w = ray_map.shape
    u, v = int(pixel[0]), int(pixel[1])
    if not (0 <= u < w and 0 <= v < h):
        raise ValueError(f"center pixel {(u, v)} outside a {w}x{h} image")
    offsets = neighbor_offsets(width)
    ny, nx = v + offsets[:, 0], u + offsets[:, 1]
    valid = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    rays = np.zeros((len(offsets), c))
    rays[valid] = ray_map[:, ny[valid], nx[valid]].T
    points = None
    if point_features is not None:
        point_features = np.asarray(point_features, dtype=np.float64)
        points = np.zeros((len(offsets),) + point_features.shape[1:])
        points[valid] = point_features[ny[valid] * w + nx[valid]]
    return FrustumNeighborhood((u, v), width, rays, valid, points)


def neighbor_variance(center_feature, neighbor_features):
    """Per-neighbor difference from the center ray feature.

    Args:
        center_feature: [..., kappa] center feature c_K.
        neighbor_features: [..., theta, kappa] gathered neighbor features.
    Returns:
        [..., theta, kappa] differences c_K^theta - c_K^cen.
    """
    center = np.asarray(center_feature, dtype=np.float64)
    neighbors = np.asarray(neighbor_features, dtype=np.float64)
    return neighbors - center[..., None, :]


def init_gate(rng, feature_dim=RAY_HIDDEN, prefix="gate"):
    """Gating MLP mapping one neighbor difference vector to one logit."""
    return init_mlp_head(rng, feature_dim, GATE_HIDDEN, prefix)


def gate_forward(variances, layers, valid, noise=None, temperature=GATE_TEMPERATURE_DEFAULT):
    """Sigmoid gate over neighbor slots with optional Gumbel noise.

    Args:
        variances: [..., theta, kappa] neighbor differences.
        layers: gating MLP (W, b) pairs producing one logit per slot.
        valid: [..., theta] bool; out-of-image slots are forced off in both masks.
        noise: optional [..., theta] Gumbel draws; None means noise-free.
    Returns:
        (GateDecision, cache).
    """
    raw, mlp_cache = mlp_forward(variances, layers)
    logits = raw[..., 0]
    hard_raw, soft_raw = kernels.gate_forward(logits, 0.0 if noise is None else noise, temperature)
    mask = np.asarray(valid, dtype=np.float64)
    decision = GateDecision(soft_raw * mask, hard_raw * mask)
    return decision, (mlp_cache, soft_raw, mask, temperature)


def gate_backward(grad_hard, grad_soft, cache):
    """Straight-through gradients from either mask back to variances and MLP params.

    Args:
        grad_hard: upstream gradient on the hard mask (may be None).
        grad_soft: upstream gradient on the soft mask (may be None).
    Returns:
        (d variances, MLP parameter grads).
    """
    mlp_cache, soft_raw, mask, temperature = cache
    gh = None if grad_hard is None else grad_hard * mask
    gs = None if grad_soft is None else grad_soft * mask
    dlogits = kernels.gate_backward(gh, gs, soft_raw, temperature)
    return mlp_backward(dlogits[..., None], mlp_cache)


def gate(variances, layers, valid, seed=None, temperature=GATE_TEMPERATURE_DEFAULT):
    """Gate with fresh Gumbel noise when a seed is given, deterministic otherwise."""
    variances = np.asarray(variances, dtype=np.float64)
    noise = None
    if seed is not None:
        noise = kernels.gumbel_noise(variances.shape[:-1], seed)
    decision, _ = gate_forward(variances, layers, valid, noise, temperature)
    return decision


def _sorted_masked_mean(neighbors, hard):
    # summing the selected rows in value order makes the result independent of slot order
    sel = np.asarray(hard, dtype=np.float64) > 0.5
    count = int(sel.sum())
    if count == 0:
        return None
    return np.sort(np.asarray(neighbors, dtype=np.float64)[sel], axis=0).sum(axis=0) / count


def aggregate_ray(center_feature, neighbor_features, hard):
    """Mean of the selected neighbor ray features added onto the center feature.

    Args:
        center_feature: [kappa] center ray feature c_K.
        neighbor_features: [theta, kappa] neighbor ray features.
        hard: [theta] binary selection mask.
    Returns:
        c_K plus the masked mean, or c_K alone when nothing is selected.
    """
    center = np.asarray(center_feature, dtype=np.float64)
    mean = _sorted_masked_mean(neighbor_features, hard)
    return center.copy() if mean is None else center + mean


def aggregate_points(point_features, neighbor_point_features, hard):
    """Per-layer masked neighbor mean added onto the center point features.

    Args:
        point_features: [K, C] center sample-point features.
        neighbor_point_features: [theta, K, C] neighbor point features.
        hard: [theta] binary mask shared by every layer k.
    Returns:
        [K, C] aggregated features, unchanged when nothing is selected.
    """
    center = np.asarray(point_features, dtype=np.float64)
    mean = _sorted_masked_mean(neighbor_point_features, hard)
    return center.copy() if mean is None else center + mean


def sparsity_penalty(soft, valid=None, weight=SPARSITY_WEIGHT_DEFAULT):
    """Penalty pushing the gate away from selecting every selectable neighbor.

    Args:
        soft: [..., theta] soft gate values.
        valid: optional bool mask; only in-image slots enter the mean.
        weight: penalty scale.
    Returns:
        (weight * mean(soft), gradient with respect to soft).
    """
    soft = np.asarray(soft, dtype=np.float64)
    if valid is None:
        valid = np.ones(soft.shape, dtype=bool)
    denom = float(valid.sum())
    if denom == 0.0:
        return 0.0, np.zeros_like(soft)
    value = weight * float((soft * valid).sum()) / denom
    return value, weight * valid.astype(np.float64) / denom


def gather_neighbor_map(features, offsets, image_size):
    """Neighbor features for every pixel of an image at once.

    Args:
        features: [M, D] per-ray features in row-major pixel order.
        offsets: [theta, 2] window offsets.
        image_size: (H, W) with H*W == M.
    Returns:
        [M, theta, D] neighbor values, zero where the slot leaves the image.
    """
    h, w = image_size
    x = np.asarray(features, dtype=np.float64).reshape(h, w, -1)
    out = np.zeros((h, w, len(offsets), x.shape[-1]))
    for i, (dy, dx) in enumerate(offsets):
        y0, y1, x0, x1 = _shift_window(h, w, dy, dx)
        out[y0:y1, x0:x1, i] = x[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
    return out.reshape(h * w, len(offsets), x.shape[-1])


def scatter_neighbor_map(grads, offsets, image_size):
    """Adjoint of gather_neighbor_map: accumulate per-slot grads onto the rays.

    Args:
        grads: [M, theta, D] gradients on gathered neighbor values.
    Returns:
        [M, D] accumulated gradients.
    """
    h, w = image_size
    g = np.asarray(grads, dtype=np.float64).reshape(h, w, grads.shape[1], -1)
    out = np.zeros((h, w, g.shape[-1]))
    for i, (dy, dx) in enumerate(offsets):
        y0, y1, x0, x1 = _shift_window(h, w, dy, dx)
        out[y0 + dy:y1 + dy, x0 + dx:x1 + dx] += g[y0:y1, x0:x1, i]
    return out.reshape(h * w, -1)


def aggregate_map_forward(features, weights, offsets, image_size):
    """Weighted neighbor-mean aggregation over a full image of rays.

    Out-of-image slots are ignored on both the numerator and the denominator;
    rays whose in-image weights sum to zero pass through unchanged.

    Args:
        features: [M, D] per-ray features in row-major pixel order.
        weights: [M, theta] gate values.
        offsets: [theta, 2] window offsets.
        image_size: (H, W) with H*W == M.
    Returns:
        (aggregated [M, D], cache).
    """
    h, w = image_size
    x = np.asarray(features, dtype=np.float64).reshape(h, w, -1)
    wgt = np.asarray(weights, dtype=np.float64).reshape(h, w, -1)
    sums = np.zeros_like(x)
    count = np.zeros((h, w))
    for i, (dy, dx) in enumerate(offsets):
        y0, y1, x0, x1 = _shift_window(h, w, dy, dx)
        sums[y0:y1, x0:x1] += wgt[y0:y1, x0:x1, i:i + 1] * x[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
        count[y0:y1, x0:x1] += wgt[y0:y1, x0:x1, i]
    scale = np.where(count != 0.0, 1.0 / np.where(count != 0.0, count, 1.0), 0.0)
    agg = x + sums * scale[..., None]
    cache = (x, wgt, sums, scale, offsets, (h, w))
    return agg.reshape(h * w, -1), cache


def aggregate_map_backward(grad, cache):
    """Gradients of aggregate_map_forward.

    Args:
        grad: [M, D] upstream gradient on the aggregated features.
    Returns:
        (d features [M, D], d weights [M, theta]).
    """
    x, wgt, sums, scale, offsets, (h, w) = cache
    g = np.asarray(grad, dtype=np.float64).reshape(h, w, -1)
    dx = g.copy()
    dsums = g * scale[..., None]
    dcount = -(g * sums).sum(axis=-1) * scale * scale
    dwgt = np.zeros_like(wgt)
    for i, (dy, dxo) in enumerate(offsets):
        y0, y1, x0, x1 = _shift_window(h, w, dy, dxo)
        src = x[y0 + dy:y1 + dy, x0 + dxo:x1 + dxo]
        dwgt[y0:y1, x0:x1, i] = (dsums[y0:y1, x0:x1] * src).sum(axis=-1) + dcount[y0:y1, x0:x1]
        dx[y0 + dy:y1 + dy, x0 + dxo:x1 + dxo] += wgt[y0:y1, x0:x1, i:i + 1] * dsums[y0:y1, x0:x1]
    return dx.reshape(h * w, -1), dwgt.reshape(h * w, -1)


def frustum_forward(ray_features, point_features, layers, image_size,
                    width=NEIGHBOR_WIDTH_DEFAULT, seed=None,
                    temperature=GATE_TEMPERATURE_DEFAULT, mask_mode="hard"):
    """Gate every ray's window neighbors and aggregate their features.

    Args:
        ray_features: [M, kappa] encoded ray features, row-major pixel order.
        point_features: [M, K, C] per-sample features, or None.
        layers: gating MLP parameters.
        image_size: (H, W) with H*W == M.
        seed: Gumbel noise seed; None keeps the gate noise-free.
        mask_mode: "hard" (straight-through), "soft" (sigmoid weights), or
            "ones" (every in-image neighbor selected, gate MLP unused).
    Returns:
        (aggregated ray features [M, kappa], aggregated point features or None,
         GateDecision, cache).
    """
    if mask_mode not in ("hard", "soft", "ones"):
        raise ValueError(f"unknown mask mode {mask_mode!r}")
    ray_features = np.asarray(ray_features, dtype=np.float64)
    m, kappa = ray_features.shape
    offsets = neighbor_offsets(width)
    valid = neighbor_validity(image_size, width)
    if mask_mode == "ones":
        mask = valid.astype(np.float64)
        decision, gate_cache = GateDecision(mask, mask), None
    else:
        gathered = gather_neighbor_map(ray_features, offsets, image_size)
        variances = neighbor_variance(ray_features, gathered)
        noise = None if seed is None else kernels.gumbel_noise(variances.shape[:-1], seed)
        decision, gate_cache = gate_forward(variances, layers, valid, noise, temperature)
    weights = decision.soft if mask_mode == "soft" else decision.hard
    stacked = ray_features
    points_shape = None
    if point_features is not None:
        point_features = np.asarray(point_features, dtype=np.float64)
        points_shape = point_features.shape
        stacked = np.concatenate([ray_features, point_features.reshape(m, -1)], axis=1)
    agg, agg_cache = aggregate_map_forward(stacked, weights, offsets, image_size)
    agg_ray = agg[:, :kappa]
    agg_points = None if points_shape is None else agg[:, kappa:].reshape(points_shape)
    cache = (gate_cache, agg_cache, offsets, image_size, kappa, points_shape, mask_mode)
    return agg_ray, agg_points, decision, cache


def frustum_backward(grad_ray, grad_points, grad_soft, cache):
    """Gradients of frustum_forward.

    Args:
        grad_ray: [M, kappa] upstream gradient on aggregated ray features.
        grad_points: gradient on aggregated point features, or None.
        grad_soft: extra gradient on the soft mask (sparsity penalty), or None.
    Returns:
        (d ray features [M, kappa], d point features or None, gate MLP grads).
    """
    gate_cache, agg_cache, offsets, image_size, kappa, points_shape, mask_mode = cache
    grad_ray = np.asarray(grad_ray, dtype=np.float64)
    g_stacked = grad_ray
    if points_shape is not None:
        if grad_points is None:
            grad_points = np.zeros(points_shape)
        g_stacked = np.concatenate(
            [grad_ray, np.asarray(grad_points, dtype=np.float64).reshape(grad_ray.shape[0], -1)], axis=1)
    d_stacked, d_weights = aggregate_map_backward(g_stacked, agg_cache)
    d_ray = d_stacked[:, :kappa]
    d_points = None if points_shape is None else d_stacked[:, kappa:].reshape(points_shape)
    if mask_mode == "ones":
        return d_ray, d_points, []
    if mask_mode == "soft":
        total_soft = d_weights if grad_soft is None else d_weights + grad_soft
        d_var, gate_grads = gate_backward(None, total_soft, gate_cache)
    else:
        d_var, gate_grads = gate_backward(d_weights, grad_soft, gate_cache)
    d_ray = d_ray + scatter_neighbor_map(d_var, offsets, image_size)
    d_ray = d_ray - d_var.sum(axis=1)
    return d_ray, d_points, gate_grads


def mask_window_image(hard, width):
    """Lay one ray's neighbor mask out as its window image, center turned on."""
    offsets = neighbor_offsets(width)
    hard = np.asarray(hard)
    if hard.shape != (len(offsets),):
        raise ValueError(f"expected [{len(offsets)}] mask, got {hard.shape}")
    extent = width + 1
    center = (extent - 1) // 2
    img = np.zeros((extent, extent), dtype=bool)
    img[center, center] = True
    img[offsets[:, 0] + center, offsets[:, 1] + center] = hard > 0.5
    return img


def save_mask_pgm(path, mask):
    """Write a binary mask as an 8-bit binary P5 image (0 or 255)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("PGM writer expects [H, W]")
    q = (mask > 0).astype(np.uint8) * np.uint8(255)
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        fh.write(f"{mask.shape[1]} {mask.shape[0]}\n".encode())
        fh.write(b"255\n")
        fh.write(q.tobytes())


def load_mask_pgm(path):
    """Read a binary mask written by save_mask_pgm; returns bool [H, W]."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError("not a binary PGM file")
        w, h = (int(x) for x in fh.readline().split())
        if int(fh.readline()) != 255:
            raise ValueError("expected 8-bit maxval")
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w) > 0
