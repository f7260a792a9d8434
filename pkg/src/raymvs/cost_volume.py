"""Learned 2D features, variance plane-sweep volume, regularization, coarse depth."""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from raymvs.geometry import (
    backproject_pixels,
    bilinear_sample_cache,
    bilinear_apply,
    bilinear_scatter,
    project_points,
    trilinear_apply,
    trilinear_cache,
    trilinear_scatter,
)
from raymvs.kernels import Parameter, softmax, softmax_backward

FEATURE_CHANNELS = 8
VOLUME_STRIDE = 4


@dataclass
class CostVolume:
    """Multi-channel volumetric features over the reference pixel lattice."""

    values: np.ndarray            # [C_v, D, H_c, W_c]
    depth_hypotheses: np.ndarray  # [D] ascending
    valid: np.ndarray             # [D, H_c, W_c] bool
    ref: object = None            # reference CameraView for world lookups
    stride: int = VOLUME_STRIDE

    def __post_init__(self):
        self.depth_hypotheses = np.asarray(self.depth_hypotheses, dtype=np.float64)
        if self.depth_hypotheses.ndim != 1 or len(self.depth_hypotheses) < 2:
            raise ValueError("need at least two depth hypotheses")
        if not np.all(np.diff(self.depth_hypotheses) > 0):
            raise ValueError("depth hypotheses must be strictly increasing")
        if self.values.shape[1] != len(self.depth_hypotheses):
            raise ValueError("values depth axis must match hypotheses")
        if not np.all(np.isfinite(self.values[:, self.valid])):
            raise ValueError("volume has non-finite values at valid voxels")


@dataclass
class CoarseDepth:
    """Low-resolution depth estimate plus its nearest-neighbor upsampling."""

    depth: np.ndarray      # [H_c, W_c]
    upsampled: np.ndarray  # [H, W]
    filled: np.ndarray     # [H_c, W_c] bool, true where neighbor-filled


def make_hypotheses(d_min, d_max, count):
    """Evenly spaced ascending depth hypotheses covering [d_min, d_max]."""
    if not (0 < d_min < d_max) or count < 2:
        raise ValueError("invalid hypothesis range")
    return np.linspace(d_min, d_max, count)


@dataclass
class FeatureNetParams:
    """Three 3x3 conv layers with ReLU between them; weights [3, 3, C_in, C_out]."""

    layers: list

    def all(self):
        out = []
        for w, b in self.layers:
            out.extend([w, b])
        return out


def init_feature_net(rng, in_channels=3, width=FEATURE_CHANNELS, prefix="feat"):
    """Near-identity conv stack: input channels pass through the center taps.

    Random conv features blur the photometric matching cue, so the stack
    starts by copying the input into the first channels (exact through the
    ReLUs for non-negative images) and learns residual structure on top.
    """
    sizes = [(in_channels, width), (width, width), (width, width)]
    layers = []
    for i, (cin, cout) in enumerate(sizes):
        scale = 0.05 * np.sqrt(2.0 / (9 * cin))
        w = rng.normal(size=(3, 3, cin, cout)) * scale
        for c in range(min(cin, cout)):
            w[1, 1, c, c] += 1.0
        layers.append((
            Parameter(w, name=f"{prefix}.w{i}"),
            Parameter(np.zeros(cout), name=f"{prefix}.b{i}"),
        ))
    return FeatureNetParams(layers)


def _im2col(image):
    C, H, W = image.shape
    padded = np.zeros((C, H + 2, W + 2))
    padded[:, 1:-1, 1:-1] = image
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    return win.transpose(1, 2, 3, 4, 0).reshape(H * W, 9 * C)


def _col2im(grad_patches, shape):
    C, H, W = shape
    g = grad_patches.reshape(H, W, 3, 3, C)
    out = np.zeros((C, H + 2, W + 2))
    for ky in range(3):
        for kx in range(3):
            out[:, ky:ky + H, kx:kx + W] += g[:, :, ky, kx, :].transpose(2, 0, 1)
    return out[:, 1:-1, 1:-1]


def conv3x3_forward(image, w, b):
    """Same-padding 3x3 convolution via patch matmul; returns (out, cache)."""
    C, H, W = image.shape
    wv = w.value if isinstance(w, Parameter) else w
    bv = b.value if isinstance(b, Parameter) else b
    patches = _im2col(image)
    out = patches @ wv.reshape(9 * C, -1) + bv
    return out.T.reshape(-1, H, W), (patches, wv.shape, (C, H, W))


def extract_features_forward(image, params):
    """Run the conv stack on an image.

    Args:
        image: Tensor[C, H, W] with H, W >= 16.
        params: FeatureNetParams.

    Returns:
        (features [C_f, H, W], cache for extract_features_backward).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[1] < 16 or image.shape[2] < 16:
        raise ValueError("image must be [C, H, W] with H, W >= 16")
    x = image
    caches = []
    n = len(params.layers)
    for i, (w, b) in enumerate(params.layers):
        x, cache = conv3x3_forward(x, w, b)
        relu_mask = None
        if i < n - 1:
            relu_mask = x > 0
            x = x * relu_mask
        caches.append((cache, relu_mask, (w.value.shape)))
    return x, (caches, params)


def extract_features(image, params):
    """Forward-only feature extraction; see extract_features_forward."""
    return extract_features_forward(image, params)[0]


def extract_features_backward(grad_out, cache):
    """Accumulate parameter gradients; returns grads aligned with params.all()."""
    caches, params = cache
    grads = [None] * (2 * len(params.layers))
    g = grad_out
    for i in range(len(params.layers) - 1, -1, -1):
        conv_cache, relu_mask, _ = caches[i]
        if relu_mask is not None:
            g = g * relu_mask
        patches, wshape, in_shape = conv_cache
        cout = g.shape[0]
        gm = g.reshape(cout, -1).T
        grads[2 * i] = (patches.T @ gm).reshape(wshape)
        grads[2 * i + 1] = gm.sum(axis=0)
        if i > 0:
            w = params.layers[i][0].value
            grad_patches = gm @ w.reshape(-1, cout).T
            g = _col2im(grad_patches, in_shape)
    return grads


def _sorted_sum(stack):
    """Sum over axis 0 in value order, so any view permutation sums identically."""
    return np.sort(stack, axis=0).sum(axis=0)


def build_variance_volume_forward(views, hypotheses):
    """Plane-sweep variance cost volume over featurized views.

    Args:
        views: list of CameraView whose .image holds [C_f, H, W] features;
            views[0] is the reference defining the sweep lattice.
        hypotheses: [D] ascending depths.

    Returns:
        (CostVolume, cache). Voxels with fewer than two valid views are
        invalid and zero-valued. The variance is exactly invariant under
        permutation of the views.
    """
    if len(views) < 2:
        raise ValueError("need at least two views")
    hypotheses = np.asarray(hypotheses, dtype=np.float64)
    if len(hypotheses) < 2:
        raise ValueError("need at least two hypotheses")
    ref = views[0]
    C, H, W = ref.image.shape
    stride = VOLUME_STRIDE
    H_c, W_c = H // stride, W // stride
    D = len(hypotheses)
    jj, ii = np.meshgrid(np.arange(W_c, dtype=np.float64), np.arange(H_c, dtype=np.float64))
    uv = np.stack([jj.ravel() * stride, ii.ravel() * stride], axis=1)
    M = D * H_c * W_c
    uv_all = np.tile(uv, (D, 1))
    depth_all = np.repeat(hypotheses, H_c * W_c)
    points = backproject_pixels(uv_all, depth_all, ref)

    N = len(views)
    warped = np.empty((N, M, C))
    valid = np.empty((N, M), dtype=bool)
    sample_caches = []
    for n, view in enumerate(views):
        uv_v, z_v = project_points(points, view)
        sc = bilinear_sample_cache(view.image.shape, uv_v[:, 0], uv_v[:, 1])
        in_front = z_v > 1e-9
        idx, w, ok = sc
        w = w * in_front
        sc = (idx, w, ok & in_front)
        warped[n] = bilinear_apply(view.image, sc)
        valid[n] = sc[2]
        sample_caches.append(sc)

    count = valid.sum(axis=0)
    voxel_ok = count >= 2
    n_safe = np.maximum(count, 1).astype(np.float64)
    masked = warped * valid[:, :, None]
    mean = _sorted_sum(masked) / n_safe[:, None]
    dev = (warped - mean) * valid[:, :, None]
    var = _sorted_sum(dev ** 2) / n_safe[:, None]
    var[~voxel_ok] = 0.0

    values = var.T.reshape(C, D, H_c, W_c)
    vol = CostVolume(values, hypotheses, voxel_ok.reshape(D, H_c, W_c), ref=ref, stride=stride)
    cache = (sample_caches, valid, dev, n_safe, voxel_ok, [v.image.shape for v in views])
    return vol, cache


def build_variance_volume(views, hypotheses):
    """Forward-only variance volume; see build_variance_volume_forward."""
    return build_variance_volume_forward(views, hypotheses)[0]


def build_variance_volume_backward(grad_values, cache):
    """Returns per-view feature-map gradients [C, H, W] for grad wrt values."""
    sample_caches, valid, dev, n_safe, voxel_ok, shapes = cache
    C = grad_values.shape[0]
    g = grad_values.reshape(C, -1).T * voxel_ok[:, None]
    grads = []
    for n, sc in enumerate(sample_caches):
        # d var / d f_n = 2 (f_n - mean) / n_valid at valid views
        gf = g * 2.0 * dev[n] / n_safe[:, None]
        grads.append(bilinear_scatter(gf * valid[n][:, None], sc, shapes[n]))
    return grads


@dataclass
class RegularizerParams:
    """Three learned pointwise layers around fixed separable box smoothing."""

    layers: list
    smooth_weight: float = 0.5

    def all(self):
        out = []
        for w, b in self.layers:
            out.extend([w, b])
        return out


def init_regularizer(rng, channels=FEATURE_CHANNELS, smooth_weight=0.15, prefix="reg",
                     gain=2400.0):
    """Near-identity pointwise stack whose last layer boosts the channel mean.

    The variance cue in the raw volume is informative from the start but far
    too small for the soft-argmin to resolve, so the stack starts as identity
    plus a rank-one gain on the channel-mean direction and learns channel
    mixing on top of a working signal.
    """
    eye = np.eye(channels)
    scale = 0.05 / np.sqrt(channels)
    layers = []
    for i in range(3):
        w = eye + rng.normal(size=(channels, channels)) * scale
        if i == 2:
            w = w + (gain - 1.0) / channels * np.ones((channels, channels))
        layers.append((
            Parameter(w, name=f"{prefix}.w{i}"),
            Parameter(np.zeros(channels), name=f"{prefix}.b{i}"),
        ))
    return RegularizerParams(layers, smooth_weight)


def identity_regularizer(channels=FEATURE_CHANNELS):
    layers = [(Parameter(np.eye(channels), name=f"reg.w{i}"),
               Parameter(np.zeros(channels), name=f"reg.b{i}")) for i in range(3)]
    return RegularizerParams(layers, smooth_weight=0.0)


def _smooth3(values, weight):
    if weight == 0.0:
        return values
    out = values
    for axis in (1, 2, 3):
        out = ndimage.uniform_filter1d(out, size=3, axis=axis, mode="constant")
    return (1.0 - weight) * values + weight * out


def regularize_volume_forward(vol, params):
    """Pointwise channel mixing interleaved with fixed box smoothing.

    Args:
        vol: CostVolume.
        params: RegularizerParams; smooth_weight blends each box pass.

    Returns:
        (CostVolume of the same shape, cache).
    """
    x = vol.values
    C = x.shape[0]
    caches = []
    for i, (w, b) in enumerate(params.layers):
        flat = x.reshape(C, -1).T
        caches.append(flat)
        y = flat @ w.value + b.value
        x = y.T.reshape(x.shape)
        if i < len(params.layers) - 1:
            x = _smooth3(x, params.smooth_weight)
    out = CostVolume(x, vol.depth_hypotheses, vol.valid, ref=vol.ref, stride=vol.stride)
    return out, (caches, params, vol.values.shape)


def regularize_volume(vol, params):
    """Forward-only regularization; see regularize_volume_forward."""
    return regularize_volume_forward(vol, params)[0]


def regularize_volume_backward(grad_values, cache):
    """Returns (grad wrt input values, grads aligned with params.all())."""
    caches, params, shape = cache
    C = shape[0]
    grads = [None] * (2 * len(params.layers))
    g = grad_values
    for i in range(len(params.layers) - 1, -1, -1):
        if i < len(params.layers) - 1:
            g = _smooth3(g, params.smooth_weight)  # box smoothing is self-adjoint
        w, _ = params.layers[i]
        gm = g.reshape(g.shape[0], -1).T
        flat = caches[i]
        grads[2 * i] = flat.T @ gm
        grads[2 * i + 1] = gm.sum(axis=0)
        g = (gm @ w.value.T).T.reshape((C,) + shape[1:])
    return g, grads


def _fill_from_nearest(depth, ok):
    if ok.all():
        iy, ix = np.meshgrid(np.arange(depth.shape[0]), np.arange(depth.shape[1]),
                             indexing="ij")
        return depth, np.zeros_like(ok), (iy, ix)
    if not ok.any():
        raise ValueError("no valid pixels to fill from")
    _, (iy, ix) = ndimage.distance_transform_edt(~ok, return_indices=True)
    return depth[iy, ix], ~ok, (iy, ix)


def regress_coarse_depth_forward(vol, full_size=None):
    """Soft-argmin depth from a cost volume.

    Args:
        vol: CostVolume; multi-channel values are averaged into one cost.
        full_size: (H, W) for the nearest-neighbor upsampling; defaults to
            stride times the volume lattice.

    Returns:
        (CoarseDepth, cache). A soft-argmin over a mostly unobservable sweep
        is biased toward whatever depths remain visible, so pixels with less
        than half the hypotheses valid take the nearest supported pixel's
        depth instead and are flagged.
    """
    cost = vol.values.mean(axis=0)
    D, H_c, W_c = cost.shape
    neg = np.where(vol.valid, -cost, -np.inf)
    cols = neg.reshape(D, -1).T
    supported = 2 * vol.valid.reshape(D, -1).sum(axis=0) >= D
    safe_cols = np.where(supported[:, None], cols, 0.0)
    p = softmax(safe_cols, axis=-1)
    depth_flat = p @ vol.depth_hypotheses
    depth = depth_flat.reshape(H_c, W_c)
    depth, filled, fill_idx = _fill_from_nearest(depth, supported.reshape(H_c, W_c))
    if full_size is None:
        full_size = (H_c * vol.stride, W_c * vol.stride)
    H, W = full_size
    ry = np.minimum(np.arange(H) // vol.stride, H_c - 1)
    rx = np.minimum(np.arange(W) // vol.stride, W_c - 1)
    upsampled = depth[np.ix_(ry, rx)]
    coarse = CoarseDepth(depth, upsampled, filled)
    cache = (p, vol.depth_hypotheses, vol.valid, supported, fill_idx, vol.values.shape)
    return coarse, cache


def regress_coarse_depth(vol, full_size=None):
    """Forward-only coarse regression; see regress_coarse_depth_forward."""
    return regress_coarse_depth_forward(vol, full_size)[0]


def regress_coarse_depth_backward(grad_depth, cache):
    """Gradient of the low-res depth map wrt the volume values."""
    p, hyps, valid, supported, fill_idx, shape = cache
    C, D, H_c, W_c = shape
    # filled pixels copy their nearest supported neighbor, so route grads there
    iy, ix = fill_idx
    g2 = np.zeros((H_c, W_c))
    np.add.at(g2, (iy, ix), grad_depth)
    g = g2.reshape(-1)
    grad_cols = g[:, None] * hyps[None, :]
    grad_neg = softmax_backward(grad_cols, p, axis=-1)
    grad_neg[~supported] = 0.0
    grad_cost = -grad_neg.T.reshape(D, H_c, W_c)
    grad_cost = np.where(valid, grad_cost, 0.0)
    return np.broadcast_to(grad_cost / C, shape).copy()


def argmin_depth(vol):
    """Winner-take-all depth over valid hypotheses (non-differentiable)."""
    cost = vol.values.mean(axis=0)
    masked = np.where(vol.valid, cost, np.inf)
    flat = masked.reshape(masked.shape[0], -1)
    supported = 2 * vol.valid.reshape(masked.shape[0], -1).sum(axis=0) >= masked.shape[0]
    idx = flat.argmin(axis=0)
    depth = vol.depth_hypotheses[idx].reshape(vol.values.shape[2:])
    depth, _, _ = _fill_from_nearest(depth, supported.reshape(depth.shape))
    return depth


def volume_coordinates(vol, points):
    """World points to fractional (x, y, z-index) volume coordinates."""
    uv, z = project_points(points, vol.ref)
    x = uv[:, 0] / vol.stride
    y = uv[:, 1] / vol.stride
    h = vol.depth_hypotheses
    zi = np.interp(z, h, np.arange(len(h), dtype=np.float64))
    in_depth = (z >= h[0]) & (z <= h[-1]) & (z > 1e-9)
    return x, y, zi, in_depth


def fetch_volume_features_forward(vol, points):
    """Trilinear volume features at world points.

    Args:
        vol: CostVolume (typically regularized).
        points: [M, 3] world points.

    Returns:
        (values [M, C_v], valid [M], cache); out-of-frustum or out-of-range
        points return zeros with valid False.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, zi, in_depth = volume_coordinates(vol, pts)
    cache = trilinear_cache(vol.values.shape, x, y, zi)
    idx, w, ok = cache
    w = w * in_depth
    cache = (idx, w, ok & in_depth)
    vals = trilinear_apply(vol.values, cache)
    return vals, cache[2], (cache, vol.values.shape)


def fetch_volume_feature(vol, point):
    """Single-point wrapper; returns (values [C_v], in_range flag)."""
    vals, valid, _ = fetch_volume_features_forward(vol, np.asarray(point).reshape(1, 3))
    return vals[0], bool(valid[0])


def fetch_volume_features_backward(grad_vals, cache):
    """Scatter [M, C_v] gradients back into the volume values."""
    tri_cache, shape = cache
    return trilinear_scatter(grad_vals, tri_cache, shape)


def save_volume(path, vol):
    """Debug dump: magic, u32 dims, f32 hypotheses, u8 valid, f32 values."""
    C, D, H_c, W_c = vol.values.shape
    with open(path, "wb") as fh:
        fh.write(b"RVOL")
        fh.write(struct.pack("<4I", C, D, H_c, W_c))
        fh.write(vol.depth_hypotheses.astype("<f4").tobytes())
        fh.write(vol.valid.astype(np.uint8).tobytes())
        fh.write(vol.values.astype("<f4").tobytes())


def load_volume(path):
    """Read a save_volume dump; returns a CostVolume without camera binding."""
    blob = Path(path).read_bytes()
    if blob[:4] != b"RVOL":
        raise ValueError("bad volume magic")
    C, D, H_c, W_c = struct.unpack("<4I", blob[4:20])
    off = 20
    hyps = np.frombuffer(blob, dtype="<f4", count=D, offset=off).astype(np.float64)
    off += 4 * D
    valid = np.frombuffer(blob, dtype=np.uint8, count=D * H_c * W_c, offset=off)
    off += D * H_c * W_c
    values = np.frombuffer(blob, dtype="<f4", count=C * D * H_c * W_c, offset=off)
    return CostVolume(values.reshape(C, D, H_c, W_c).astype(np.float64), hyps,
                      valid.reshape(D, H_c, W_c).astype(bool))
