"""Per-ray implicit field: hypothesis sampling, cross-view aggregation, LSTM encoding, SDF and crossing heads."""

import csv
from dataclasses import dataclass

import numpy as np

from raymvs.cost_volume import fetch_volume_features_backward, fetch_volume_features_forward
from raymvs.geometry import BEHIND_EPS, bilinear_apply, bilinear_sample_cache, bilinear_scatter, project_points
from raymvs.kernels import (
    LstmParams,
    LstmState,
    Parameter,
    add_norm_forward,
    layer_norm_backward,
    lstm_step_backward,
    lstm_step_forward,
    mlp_backward,
    mlp_forward,
    self_attention_backward,
    self_attention_forward,
    sigmoid,
)

K_DEFAULT = 16
RAY_HIDDEN = 50
IMAGE_FEATURE_DIM = 8
VOLUME_FEATURE_DIM = 8
ATTENTION_FEATURE_DIM = 3 * IMAGE_FEATURE_DIM
POINT_FEATURE_DIM = ATTENTION_FEATURE_DIM + VOLUME_FEATURE_DIM
LOCATION_LOW = -0.25
LOCATION_SPAN = 1.5
MIN_RAY_DEPTH = 1e-6


# ---------------------------------------------------------------------------
# domain types


@dataclass
class RayBundle:
    """A batch of rays with K uniform samples in a band around the coarse depth."""

    origins: np.ndarray
    directions: np.ndarray
    coarse_depth: np.ndarray
    delta: float
    points: np.ndarray
    sample_depths: np.ndarray
    d_bar: np.ndarray
    clamped: np.ndarray
    point_features: np.ndarray | None = None

    def __post_init__(self):
        m = self.origins.shape[0]
        k = self.sample_depths.shape[1]
        if self.directions.shape != (m, 3) or self.points.shape != (m, k, 3):
            raise ValueError("ray bundle shape mismatch")
        if self.coarse_depth.shape != (m,) or self.d_bar.shape != (k,):
            raise ValueError("ray bundle shape mismatch")

    @property
    def count(self):
        return self.origins.shape[0]

    @property
    def k(self):
        return self.sample_depths.shape[1]


@dataclass
class FieldPrediction:
    """Per-ray outputs: normalized SDF sequence, crossing location, and ray feature."""

    sdf: np.ndarray
    location: np.ndarray
    ray_feature: np.ndarray

    def __post_init__(self):
        if np.any(np.abs(self.sdf) > 1.0 + 1e-6):
            raise ValueError("sdf values must stay within [-1, 1]")
        lo = LOCATION_LOW - 1e-9
        hi = LOCATION_LOW + LOCATION_SPAN + 1e-9
        if np.any(self.location < lo) or np.any(self.location > hi):
            raise ValueError("location outside the head's output interval")


def sample_hypotheses(coarse_depth, origins, directions, delta, k=K_DEFAULT):
    """Sample K points per ray, uniformly covering +-delta around the coarse depth.

    Args:
        coarse_depth: [M] band-center distance along each ray (m).
        origins: [M, 3] ray origins.
        directions: [M, 3] unit ray directions.
        delta: half-range of the band (m).
        k: samples per ray, >= 2.

    Returns:
        RayBundle; rays whose band would start at or behind the origin are
        shifted forward to keep all sample depths positive and flagged in
        `clamped`.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if k < 2:
        raise ValueError("need at least two samples per ray")
    centers = np.asarray(coarse_depth, dtype=np.float64).reshape(-1)
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    clamped = centers - delta <= 0
    centers = np.where(clamped, MIN_RAY_DEPTH + delta, centers)
    offsets = -delta + 2.0 * delta * np.arange(k, dtype=np.float64) / (k - 1)
    depths = centers[:, None] + offsets[None, :]
    points = origins[:, None, :] + depths[:, :, None] * directions[:, None, :]
    d_bar = np.arange(k, dtype=np.float64) / k
    return RayBundle(
        origins=origins,
        directions=directions,
        coarse_depth=centers,
        delta=float(delta),
        points=points,
        sample_depths=depths,
        d_bar=d_bar,
        clamped=clamped,
    )


# ---------------------------------------------------------------------------
# cross-view feature aggregation


@dataclass
class TransformerLayer:
    """One attention block: self-attention, add-norm, feed-forward, add-norm."""

    wq: Parameter
    wk: Parameter
    wv: Parameter
    norm1_gain: Parameter
    norm1_bias: Parameter
    ff_w1: Parameter
    ff_b1: Parameter
    ff_w2: Parameter
    ff_b2: Parameter
    norm2_gain: Parameter
    norm2_bias: Parameter

    def all(self):
        return [self.wq, self.wk, self.wv, self.norm1_gain, self.norm1_bias,
                self.ff_w1, self.ff_b1, self.ff_w2, self.ff_b2,
                self.norm2_gain, self.norm2_bias]


@dataclass
class TransformerParams:
    layers: list

    def all(self):
        return [p for layer in self.layers for p in layer.all()]


def init_transformer(rng, channels=IMAGE_FEATURE_DIM, depth=4, prefix="et"):
    """Random transformer weights: unit gains, zero biases, fan-in scaled matrices."""
    layers = []
    c = channels
    for i in range(depth):
        name = f"{prefix}{i}"
        layers.append(TransformerLayer(
            wq=Parameter(rng.standard_normal((c, c)) / np.sqrt(c), f"{name}_wq"),
            wk=Parameter(rng.standard_normal((c, c)) / np.sqrt(c), f"{name}_wk"),
            wv=Parameter(rng.standard_normal((c, c)) / np.sqrt(c), f"{name}_wv"),
            norm1_gain=Parameter(np.ones(c), f"{name}_n1g"),
            norm1_bias=Parameter(np.zeros(c), f"{name}_n1b"),
            ff_w1=Parameter(rng.standard_normal((c, 2 * c)) * np.sqrt(2.0 / c), f"{name}_fw1"),
            ff_b1=Parameter(np.zeros(2 * c), f"{name}_fb1"),
            ff_w2=Parameter(rng.standard_normal((2 * c, c)) / np.sqrt(2 * c), f"{name}_fw2"),
            ff_b2=Parameter(np.zeros(c), f"{name}_fb2"),
            norm2_gain=Parameter(np.ones(c), f"{name}_n2g"),
            norm2_bias=Parameter(np.zeros(c), f"{name}_n2b"),
        ))
    return TransformerParams(layers=layers)


def transformer_forward(x, params):
    """Stack of attention blocks over token sets.

    Args:
        x: [..., N, C] tokens, one set per leading index.
    Returns:
        (y [..., N, C], cache).
    """
    h = np.asarray(x, dtype=np.float64)
    caches = []
    for layer in params.layers:
        (s, _), att_cache = self_attention_forward(h, layer.wq, layer.wk, layer.wv)
        h1, n1_cache = add_norm_forward(h, s, layer.norm1_gain, layer.norm1_bias)
        ff_layers = [(layer.ff_w1, layer.ff_b1), (layer.ff_w2, layer.ff_b2)]
        f, ff_cache = mlp_forward(h1, ff_layers, activation="relu")
        h, n2_cache = add_norm_forward(h1, f, layer.norm2_gain, layer.norm2_bias)
        caches.append((att_cache, n1_cache, ff_cache, n2_cache))
    return h, caches


def transformer_backward(grad, caches):
    """Returns (dx, grads) with grads aligned with TransformerParams.all()."""
    layer_grads = []
    g = grad
    for att_cache, n1_cache, ff_cache, n2_cache in reversed(caches):
        dsum2, dg2, db2 = layer_norm_backward(g, n2_cache)
        dh1, ff_grads = mlp_backward(dsum2, ff_cache)
        dh1 = dh1 + dsum2
        dsum1, dg1, db1 = layer_norm_backward(dh1, n1_cache)
        dx_att, dwq, dwk, dwv = self_attention_backward(dsum1, att_cache)
        g = dsum1 + dx_att
        layer_grads.append([dwq, dwk, dwv, dg1, db1,
                            ff_grads[0], ff_grads[1], ff_grads[2], ff_grads[3],
                            dg2, db2])
    grads = []
    for chunk in reversed(layer_grads):
        grads.extend(chunk)
    return g, grads


def fetch_view_tokens_forward(points, view, feature_map):
    """Project points into one view and sample its feature map.

    Args:
        points: [P, 3] world points.
        feature_map: [C, H, W] features for that view.
    Returns:
        (tokens [P, C], valid [P], cache); behind-camera or off-image points
        produce zero tokens.
    """
    uv, z = project_points(points, view)
    cache = bilinear_sample_cache(feature_map.shape, uv[:, 0], uv[:, 1])
    idx, w, ok = cache
    in_front = z > BEHIND_EPS
    w = w * in_front
    ok = ok & in_front
    cache = (idx, w, ok)
    tokens = bilinear_apply(feature_map, cache)
    return tokens, ok, (cache, feature_map.shape)


def fetch_view_tokens_backward(grad_tokens, cache):
    """Scatter token gradients back into the view's feature map."""
    sample_cache, shape = cache
    return bilinear_scatter(grad_tokens, sample_cache, shape)


def _canonical_source_order(tokens):
    """Sort source rows by token content so view order cannot leak into sums."""
    src = tokens[:, 1:, :]
    keys = np.ascontiguousarray(src.transpose(2, 0, 1))[::-1]
    return np.lexsort(keys, axis=-1)


def aggregate_point_features_forward(points, views, feature_maps, params, vol=None,
                                     use_transformer=True, use_2d=True, use_3d=True):
    """Per-point features from cross-view attention plus volume lookup.

    Args:
        points: [P, 3] world points.
        views: CameraView list, reference first.
        feature_maps: [C, H, W] arrays aligned with views.
        params: TransformerParams.
        vol: CostVolume for the volume-feature part (required if use_3d).

    Returns:
        (features [P, C_p], valid [P], cache) where the feature layout is
        Concat(mean, variance, reference row, volume feature) with parts
        dropped per the use_* flags. Points not seen by any view come back
        zeroed with valid False.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p = pts.shape[0]
    if not (use_2d or use_3d):
        raise ValueError("at least one feature source must stay enabled")
    parts = []
    cache_2d = None
    valid = np.zeros(p, dtype=bool)
    if use_2d:
        token_list = []
        token_caches = []
        ok_any = np.zeros(p, dtype=bool)
        for view, fmap in zip(views, feature_maps):
            tok, ok, tcache = fetch_view_tokens_forward(pts, view, fmap)
            token_list.append(tok)
            token_caches.append(tcache)
            ok_any |= ok
        tokens = np.stack(token_list, axis=1)
        n = tokens.shape[1]
        if n > 1:
            order = _canonical_source_order(tokens)
            src = np.take_along_axis(tokens[:, 1:, :], order[:, :, None], axis=1)
            x = np.concatenate([tokens[:, :1, :], src], axis=1)
        else:
            order = None
            x = tokens
        if use_transformer:
            y, t_cache = transformer_forward(x, params)
        else:
            y, t_cache = x, None
        mu = y.mean(axis=1)
        dev = y - mu[:, None, :]
        var = np.mean(dev * dev, axis=1)
        ref = y[:, 0, :]
        mask = ok_any[:, None].astype(np.float64)
        parts.append(np.concatenate([mu, var, ref], axis=1) * mask)
        cache_2d = (token_caches, order, t_cache, dev, n, ok_any, use_transformer)
        valid |= ok_any
    vol_cache = None
    if use_3d:
        vol_vals, vol_ok, vol_cache = fetch_volume_features_forward(vol, pts)
        parts.append(vol_vals)
        if not use_2d:
            valid |= vol_ok
    features = np.concatenate(parts, axis=1)
    return features, valid, (cache_2d, vol_cache)


def aggregate_point_features_backward(grad_features, cache):
    """Backward of the point aggregation.

    Args:
        grad_features: [P, C_p] upstream gradient.
        cache: from aggregate_point_features_forward.
    Returns:
        (feature_map_grads or None, volume_grad or None, transformer_grads or None).
    """
    cache_2d, vol_cache = cache
    col = 0
    fmap_grads = None
    t_grads = None
    if cache_2d is not None:
        token_caches, order, t_cache, dev, n, ok_any, used_transformer = cache_2d
        c = dev.shape[2]
        g2d = grad_features[:, :3 * c] * ok_any[:, None]
        col = 3 * c
        gmu = g2d[:, :c]
        gvar = g2d[:, c:2 * c]
        gref = g2d[:, 2 * c:]
        dy = np.repeat(gmu[:, None, :] / n, n, axis=1)
        dy += gvar[:, None, :] * 2.0 * dev / n
        dy[:, 0, :] += gref
        if used_transformer:
            dx, t_grads = transformer_backward(dy, t_cache)
        else:
            dx = dy
        if order is not None:
            dsrc = np.zeros_like(dx[:, 1:, :])
            np.put_along_axis(dsrc, order[:, :, None], dx[:, 1:, :], axis=1)
            dtokens = np.concatenate([dx[:, :1, :], dsrc], axis=1)
        else:
            dtokens = dx
        fmap_grads = [fetch_view_tokens_backward(dtokens[:, i, :], token_caches[i])
                      for i in range(len(token_caches))]
    vol_grad = None
    if vol_cache is not None:
        vol_grad = fetch_volume_features_backward(grad_features[:, col:], vol_cache)
    return fmap_grads, vol_grad, t_grads


def epipolar_aggregate(point, views, feature_maps, params, vol=None, **flags):
    """Single-point aggregation; returns (feature [C_p], valid flag)."""
    f, valid, _ = aggregate_point_features_forward(
        np.asarray(point, dtype=np.float64).reshape(1, 3),
        views, feature_maps, params, vol=vol, **flags)
    return f[0], bool(valid[0])


# ---------------------------------------------------------------------------
# ray encoding


def init_ray_lstm(rng, in_dim=POINT_FEATURE_DIM, hidden=RAY_HIDDEN, prefix="lstm"):
    """LSTM gate weights scaled by fan-in; forget bias starts at one."""
    d = in_dim + hidden
    scale = 1.0 / np.sqrt(d)

    def w(name):
        return Parameter(rng.standard_normal((d, hidden)) * scale, f"{prefix}_{name}")

    return LstmParams(
        w_z=w("wz"), b_z=Parameter(np.zeros(hidden), f"{prefix}_bz"),
        w_f=w("wf"), b_f=Parameter(np.ones(hidden), f"{prefix}_bf"),
        w_u=w("wu"), b_u=Parameter(np.zeros(hidden), f"{prefix}_bu"),
        w_o=w("wo"), b_o=Parameter(np.zeros(hidden), f"{prefix}_bo"),
    )


def encode_ray_forward(features, params):
    """Run the LSTM over the K samples of each ray from a zero state.

    Args:
        features: [..., K, C] per-sample point features.
        params: LstmParams.
    Returns:
        (c_k [..., H] final cell state, h_seq [..., K, H] hidden states, cache).
    """
    features = np.asarray(features, dtype=np.float64)
    k = features.shape[-2]
    hidden = params.w_z.value.shape[1]
    lead = features.shape[:-2]
    state = LstmState(c=np.zeros(lead + (hidden,)), h=np.zeros(lead + (hidden,)))
    h_seq = np.zeros(lead + (k, hidden))
    caches = []
    for i in range(k):
        state, step_cache = lstm_step_forward(features[..., i, :], state, params)
        h_seq[..., i, :] = state.h
        caches.append(step_cache)
    return state.c, h_seq, caches


def encode_ray(features, params):
    """Returns (c_K, hidden-state sequence)."""
    c, h_seq, _ = encode_ray_forward(features, params)
    return c, h_seq


def encode_ray_backward(grad_c, caches, grad_h_seq=None):
    """Reverse accumulation through the step sequence.

    Args:
        grad_c: [..., H] gradient of the final cell state.
        grad_h_seq: optional [..., K, H] gradients of every hidden state.
    Returns:
        (dfeatures [..., K, C], grads 8-list matching LstmParams.all()).
    """
    k = len(caches)
    dc = np.asarray(grad_c, dtype=np.float64)
    dh = np.zeros_like(dc)
    dfeat = None
    totals = None
    for i in range(k - 1, -1, -1):
        if grad_h_seq is not None:
            dh = dh + grad_h_seq[..., i, :]
        df, dc, dh, grads = lstm_step_backward(dc, dh, caches[i])
        if dfeat is None:
            dfeat = np.zeros(df.shape[:-1] + (k, df.shape[-1]))
            totals = list(grads)
        else:
            totals = [t + g for t, g in zip(totals, grads)]
        dfeat[..., i, :] = df
    return dfeat, totals


# ---------------------------------------------------------------------------
# prediction heads


def init_mlp_head(rng, in_dim, hidden, prefix):
    """Affine chain ending in one output unit; relu layers use He scaling."""
    dims = [in_dim] + list(hidden) + [1]
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        scale = np.sqrt(2.0 / fan_in) if i < len(dims) - 2 else 1.0 / np.sqrt(fan_in)
        layers.append((
            Parameter(rng.standard_normal((fan_in, fan_out)) * scale, f"{prefix}_w{i}"),
            Parameter(np.zeros(fan_out), f"{prefix}_b{i}"),
        ))
    return layers


def init_sdf_head(rng, in_dim=RAY_HIDDEN + POINT_FEATURE_DIM + 1, prefix="sdf"):
    return init_mlp_head(rng, in_dim, (48, 24, 12), prefix)


def init_location_head(rng, in_dim=RAY_HIDDEN, prefix="loc"):
    return init_mlp_head(rng, in_dim, (32, 16, 8), prefix)


def predict_sdf_forward(ray_feature, point_features, d_bar, layers):
    """Normalized SDF per sample from the ray feature, point feature, and position.

    Args:
        ray_feature: [M, H] per-ray code, shared across the K samples.
        point_features: [M, K, C_p].
        d_bar: [K] normalized sample positions.
    Returns:
        (sdf [M, K] in [-1, 1], cache).
    """
    m, k, c = point_features.shape
    h = ray_feature.shape[-1]
    inp = np.concatenate([
        np.broadcast_to(ray_feature[:, None, :], (m, k, h)),
        point_features,
        np.broadcast_to(np.asarray(d_bar, dtype=np.float64)[None, :, None], (m, k, 1)),
    ], axis=2)
    raw, mlp_cache = mlp_forward(inp, layers, activation="relu")
    s = np.tanh(raw[..., 0])
    return s, (mlp_cache, s, h, c)


def predict_sdf(ray_feature, point_features, d_bar, layers):
    return predict_sdf_forward(ray_feature, point_features, d_bar, layers)[0]


def predict_sdf_backward(grad_s, cache):
    """Returns (d_ray_feature [M, H], d_point_features [M, K, C_p], mlp grads)."""
    mlp_cache, s, h, c = cache
    graw = (grad_s * (1.0 - s * s))[..., None]
    dinp, grads = mlp_backward(graw, mlp_cache)
    d_ray = dinp[..., :h].sum(axis=-2)
    d_points = dinp[..., h:h + c]
    return d_ray, d_points, grads


def predict_location_forward(ray_feature, layers):
    """Normalized crossing location from the ray feature via a stretched sigmoid.

    Returns:
        (location [M] in (-0.25, 1.25), cache).
    """
    raw, mlp_cache = mlp_forward(ray_feature, layers, activation="relu")
    sig = sigmoid(raw[..., 0])
    loc = LOCATION_LOW + LOCATION_SPAN * sig
    return loc, (mlp_cache, sig)


def predict_location(ray_feature, layers):
    return predict_location_forward(ray_feature, layers)[0]


def predict_location_backward(grad_loc, cache):
    """Returns (d_ray_feature, mlp grads)."""
    mlp_cache, sig = cache
    graw = (grad_loc * LOCATION_SPAN * sig * (1.0 - sig))[..., None]
    d_ray, grads = mlp_backward(graw, mlp_cache)
    return d_ray, grads


# ---------------------------------------------------------------------------
# normalized location <-> metric depth


def location_to_depth(location, coarse_depth, delta):
    """Map a normalized band coordinate to distance along the ray."""
    return coarse_depth - delta + 2.0 * delta * np.asarray(location, dtype=np.float64)


def depth_to_location(depth, coarse_depth, delta):
    """Inverse of location_to_depth."""
    return (np.asarray(depth, dtype=np.float64) - coarse_depth + delta) / (2.0 * delta)


def extract_zero_crossing_from_sdf(sdf, depths):
    """Depth of the first positive-to-nonpositive transition, or None.

    Args:
        sdf: [K] SDF sequence.
        depths: [K] matching sample depths, increasing.
    Returns:
        Linearly interpolated crossing depth, or None without a sign change.
    """
    s = np.asarray(sdf, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    if s.shape[0] < 2:
        raise ValueError("need at least two samples")
    for a in range(s.shape[0] - 1):
        if s[a] > 0 >= s[a + 1]:
            frac = s[a] / (s[a] - s[a + 1])
            return float(d[a] + frac * (d[a + 1] - d[a]))
    return None


def extract_zero_crossings(sdf, depths):
    """Vectorized first-crossing extraction.

    Args:
        sdf: [M, K]; depths: [M, K].
    Returns:
        (crossing depth [M] with NaN where absent, found [M]).
    """
    s = np.asarray(sdf, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    hit = (s[:, :-1] > 0) & (s[:, 1:] <= 0)
    found = hit.any(axis=1)
    idx = hit.argmax(axis=1)
    rows = np.arange(s.shape[0])
    s_a = s[rows, idx]
    s_b = s[rows, idx + 1]
    denom = np.where(found, s_a - s_b, 1.0)
    frac = s_a / denom
    out = d[rows, idx] + frac * (d[rows, idx + 1] - d[rows, idx])
    return np.where(found, out, np.nan), found


def write_ray_debug_csv(path, depths, gt_sdf, pred_sdf):
    """Dump one ray's samples as rows of (k, depth, gt sdf, predicted sdf)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "depth", "gt_sdf", "pred_sdf"])
        for i, (d, g, p) in enumerate(zip(depths, gt_sdf, pred_sdf)):
            writer.writerow([i, f"{d:.17g}", f"{g:.17g}", f"{p:.17g}"])
