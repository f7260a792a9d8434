"""Full multi-view pipeline: coarse sweep, detached ray planning, per-ray field, gated context."""

from dataclasses import dataclass, field

import numpy as np

from raymvs.cost_volume import (
    FEATURE_CHANNELS,
    VOLUME_STRIDE,
    build_variance_volume_backward,
    build_variance_volume_forward,
    extract_features_backward,
    extract_features_forward,
    init_feature_net,
    init_regularizer,
    make_hypotheses,
    regress_coarse_depth_backward,
    regress_coarse_depth_forward,
    regularize_volume_backward,
    regularize_volume_forward,
)
from raymvs.frustum_context import (
    frustum_backward,
    frustum_forward,
    init_gate,
)
from raymvs.geometry import CameraView, ray_depth_scale, rays_through_pixels
from raymvs.kernels import Parameter, linear_backward, linear_forward, load_checkpoint, save_checkpoint
from raymvs.ray_field import (
    RAY_HIDDEN,
    aggregate_point_features_backward,
    aggregate_point_features_forward,
    encode_ray_backward,
    encode_ray_forward,
    init_location_head,
    init_ray_lstm,
    init_sdf_head,
    init_transformer,
    location_to_depth,
    predict_location_backward,
    predict_location_forward,
    predict_sdf_backward,
    predict_sdf_forward,
    sample_hypotheses,
    transformer_backward,
    transformer_forward,
)

RAY_MODELS = ("lstm", "transformer", "avgpool", "maxpool")


@dataclass
class ModelConfig:
    """Shapes and switches for one pipeline instance."""

    image_height: int = 64
    image_width: int = 64
    n_views: int = 3
    samples_per_ray: int = 16
    depth_count: int = 48
    near: float = 1.0
    far: float = 4.0
    delta_frac: float = 0.05
    feature_channels: int = FEATURE_CHANNELS
    frustum_width: int = 9
    gate_temperature: float = 1.0
    sparsity_weight: float = 0.01
    coarse_weight: float = 0.5
    ray_model: str = "lstm"
    use_transformer: bool = True
    use_2d_feature: bool = True
    use_3d_feature: bool = True
    use_frustum: bool = True
    use_gating: bool = True
    use_gumbel: bool = True
    use_sdf_head: bool = True

    def __post_init__(self):
        if self.ray_model not in RAY_MODELS:
            raise ValueError(f"unknown ray model {self.ray_model!r}")
        if not (self.use_2d_feature or self.use_3d_feature):
            raise ValueError("at least one point feature source must stay on")
        if self.image_height % VOLUME_STRIDE or self.image_width % VOLUME_STRIDE:
            raise ValueError("image sides must be multiples of the volume stride")
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    @property
    def image_size(self):
        return (self.image_height, self.image_width)

    @property
    def point_dim(self):
        dim = 3 * self.feature_channels if self.use_2d_feature else 0
        return dim + (self.feature_channels if self.use_3d_feature else 0)

    @property
    def band_delta(self):
        return self.delta_frac * (self.far - self.near)

    @property
    def frustum_active(self):
        return self.use_frustum and self.frustum_width > 1


@dataclass
class ModelParams:
    """Every learnable parameter group of the pipeline."""

    feature: object
    regularizer: object
    transformer: object
    lstm: object
    sdf: list
    location: list
    gate: list
    ray_transformer: object
    ray_lift: tuple

    def all(self):
        out = list(self.feature.all()) + list(self.regularizer.all())
        out += list(self.transformer.all()) + list(self.lstm.all())
        for w, b in self.sdf + self.location + self.gate:
            out.extend([w, b])
        out += list(self.ray_transformer.all()) + list(self.ray_lift)
        return out


def init_model(rng, config):
    """Draw every parameter group in a fixed order.

    Args:
        rng: Generator or integer seed.
        config: ModelConfig fixing the group shapes.
    Returns:
        ModelParams.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    c_f = config.feature_channels
    c_p = config.point_dim
    lift_scale = 1.0 / np.sqrt(c_p)
    return ModelParams(
        feature=init_feature_net(rng, 3, c_f),
        regularizer=init_regularizer(rng, c_f),
        transformer=init_transformer(rng, channels=c_f, depth=4, prefix="et"),
        lstm=init_ray_lstm(rng, in_dim=c_p, hidden=RAY_HIDDEN),
        sdf=init_sdf_head(rng, in_dim=RAY_HIDDEN + c_p + 1),
        location=init_location_head(rng),
        gate=init_gate(rng),
        ray_transformer=init_transformer(rng, channels=c_p, depth=2, prefix="rt"),
        ray_lift=(
            Parameter(rng.standard_normal((c_p, RAY_HIDDEN)) * lift_scale, "lift_w"),
            Parameter(np.zeros(RAY_HIDDEN), "lift_b"),
        ),
    )


def save_model(path, params):
    """Write all parameter groups to one checkpoint file."""
    save_checkpoint(path, params.all())


def load_model(path, params):
    """Fill an initialized ModelParams from a checkpoint, in place."""
    data = load_checkpoint(path)
    for p in params.all():
        if p.name not in data:
            raise ValueError(f"checkpoint is missing parameter {p.name!r}")
        if data[p.name].shape != p.value.shape:
            raise ValueError(
                f"checkpoint shape {data[p.name].shape} for {p.name!r} does not match {p.value.shape}")
        p.value[...] = data[p.name]
    return params


@dataclass
class RayPlan:
    """Frozen per-ray sampling plan derived from the coarse depth."""

    bundle: object
    scale: np.ndarray
    uv: np.ndarray


@dataclass
class ModelOutput:
    """Per-ray predictions plus the coarse branch output."""

    coarse: object
    plan: RayPlan
    sdf: np.ndarray
    location: np.ndarray
    decision: object
    point_valid: np.ndarray

    def depth_map(self, image_size):
        """Camera-frame z depth from the location head, as an image."""
        t = location_to_depth(self.location, self.plan.bundle.coarse_depth, self.plan.bundle.delta)
        return (t * self.plan.scale).reshape(image_size)

    def coarse_depth_map(self):
        return self.coarse.upsampled


@dataclass
class ModelCache:
    """Intermediate state for model_backward."""

    config: object
    feature_caches: list
    volume_cache: object
    regularizer_cache: object
    coarse_cache: object
    point_cache: object
    encoder_cache: object
    frustum_cache: object
    sdf_cache: object
    location_cache: object
    n_rays: int = 0
    extras: dict = field(default_factory=dict)


def plan_rays(coarse, ref_view, config):
    """Freeze the sampling band around the coarse depth; no gradients flow here.

    Args:
        coarse: CoarseDepth for the reference view.
        ref_view: reference CameraView.
        config: ModelConfig.
    Returns:
        RayPlan with band centers converted from z depth to ray distance.
    """
    h, w = config.image_size
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    origins, dirs = rays_through_pixels(ref_view, uv)
    scale = ray_depth_scale(ref_view, dirs)
    centers = coarse.upsampled.ravel() / scale
    bundle = sample_hypotheses(centers, origins, dirs, config.band_delta, config.samples_per_ray)
    return RayPlan(bundle=bundle, scale=scale, uv=uv)


def _encode_rays_forward(point_features, params, config):
    mode = config.ray_model
    if mode == "lstm":
        c, _, caches = encode_ray_forward(point_features, params.lstm)
        return c, (mode, caches)
    if mode == "transformer":
        y, tcache = transformer_forward(point_features, params.ray_transformer)
        pooled = y.mean(axis=1)
        c, lcache = linear_forward(pooled, *params.ray_lift)
        return c, (mode, tcache, lcache, point_features.shape[1])
    if mode == "avgpool":
        pooled = point_features.mean(axis=1)
        c, lcache = linear_forward(pooled, *params.ray_lift)
        return c, (mode, lcache, point_features.shape[1])
    top = point_features.argmax(axis=1)
    pooled = np.take_along_axis(point_features, top[:, None, :], axis=1)[:, 0, :]
    c, lcache = linear_forward(pooled, *params.ray_lift)
    return c, (mode, lcache, top, point_features.shape)


def _encode_rays_backward(grad_c, cache):
    mode = cache[0]
    if mode == "lstm":
        dfeat, lstm_grads = encode_ray_backward(grad_c, cache[1])
        return dfeat, {"lstm": lstm_grads}
    if mode == "transformer":
        _, tcache, lcache, k = cache[1:]
        dpooled, dw, db = linear_backward(grad_c, lcache)
        dy = np.repeat(dpooled[:, None, :] / k, k, axis=1)
        dfeat, t_grads = transformer_backward(dy, tcache)
        return dfeat, {"ray_transformer": t_grads, "ray_lift": [dw, db]}
    if mode == "avgpool":
        _, lcache, k = cache[1:]
        dpooled, dw, db = linear_backward(grad_c, lcache)
        dfeat = np.repeat(dpooled[:, None, :] / k, k, axis=1)
        return dfeat, {"ray_lift": [dw, db]}
    _, lcache, top, shape = cache[1:]
    dpooled, dw, db = linear_backward(grad_c, lcache)
    dfeat = np.zeros(shape)
    np.put_along_axis(dfeat, top[:, None, :], dpooled[:, None, :], axis=1)
    return dfeat, {"ray_lift": [dw, db]}


def model_forward(params, images, cameras, config, noise_seed=None, plan=None):
    """Run the whole pipeline on one multi-view image set.

    Args:
        params: ModelParams.
        images: [N, 3, H, W] view images; index 0 is the reference.
        cameras: list of N CameraView in the same order.
        config: ModelConfig.
        noise_seed: Gumbel seed for the gate; None keeps it noise-free.
        plan: optional RayPlan to reuse; None derives one from the coarse depth.
    Returns:
        (ModelOutput, ModelCache).
    """
    h, w = config.image_size
    fmaps, fcaches = [], []
    for image in images:
        fmap, fcache = extract_features_forward(image, params.feature)
        fmaps.append(fmap)
        fcaches.append(fcache)
    feat_views = [
        CameraView(K=cam.K, R=cam.R, t=cam.t, image=fmap, id=cam.id)
        for cam, fmap in zip(cameras, fmaps)
    ]
    hyps = make_hypotheses(config.near, config.far, config.depth_count)
    vol, vcache = build_variance_volume_forward(feat_views, hyps)
    reg, rcache = regularize_volume_forward(vol, params.regularizer)
    coarse, ccache = regress_coarse_depth_forward(reg, full_size=(h, w))

    # the plan is frozen: band centers, sample points, and projections carry no gradient
    if plan is None:
        plan = plan_rays(coarse, cameras[0], config)
    bundle = plan.bundle
    m = bundle.count

    # 3D point features come from the raw variance volume; the regularized
    # volume carries the amplified cost scale meant only for the soft-argmin
    pts = bundle.points.reshape(-1, 3)
    point_flat, point_valid, pcache = aggregate_point_features_forward(
        pts, feat_views, fmaps, params.transformer, vol=vol,
        use_transformer=config.use_transformer,
        use_2d=config.use_2d_feature, use_3d=config.use_3d_feature)
    point_features = point_flat.reshape(m, config.samples_per_ray, -1)

    ray_feature, ecache = _encode_rays_forward(point_features, params, config)

    if config.frustum_active:
        if not config.use_gating:
            mask_mode = "ones"
        else:
            mask_mode = "hard" if config.use_gumbel else "soft"
        seed = noise_seed if (config.use_gating and config.use_gumbel) else None
        ray_agg, point_agg, decision, frcache = frustum_forward(
            ray_feature, point_features, params.gate, (h, w),
            width=config.frustum_width, seed=seed,
            temperature=config.gate_temperature, mask_mode=mask_mode)
    else:
        ray_agg, point_agg, decision, frcache = ray_feature, point_features, None, None

    sdf, scache = (None, None)
    if config.use_sdf_head:
        sdf, scache = predict_sdf_forward(ray_agg, point_agg, bundle.d_bar, params.sdf)
    location, lcache = predict_location_forward(ray_agg, params.location)

    output = ModelOutput(
        coarse=coarse, plan=plan, sdf=sdf, location=location,
        decision=decision, point_valid=point_valid.reshape(m, -1))
    cache = ModelCache(
        config=config, feature_caches=fcaches, volume_cache=vcache,
        regularizer_cache=rcache, coarse_cache=ccache, point_cache=pcache,
        encoder_cache=ecache, frustum_cache=frcache, sdf_cache=scache,
        location_cache=lcache, n_rays=m)
    return output, cache


def zero_grads(params):
    """A zero gradient array per parameter, keyed by name."""
    return {p.name: np.zeros_like(p.value) for p in params.all()}


def _add_group(grads, group_params, group_grads):
    for p, g in zip(group_params, group_grads):
        grads[p.name] += g


def model_backward(params, cache, d_sdf=None, d_location=None, d_soft=None, d_coarse=None):
    """Gradients of the pipeline for upstream loss gradients.

    Args:
        params: ModelParams the forward ran with.
        cache: ModelCache from model_forward.
        d_sdf: [M, K] gradient on the sdf predictions, or None.
        d_location: [M] gradient on the location predictions, or None.
        d_soft: [M, theta] gradient on the soft gate mask, or None.
        d_coarse: [H, W] gradient on the upsampled coarse depth, or None.
    Returns:
        dict of parameter name to gradient array, covering every parameter.
    """
    config = cache.config
    grads = zero_grads(params)
    m = cache.n_rays

    d_ray_agg = np.zeros((m, RAY_HIDDEN))
    d_point_agg = None
    if d_location is not None:
        d_ray_from_loc, loc_grads = predict_location_backward(
            np.asarray(d_location, dtype=np.float64), cache.location_cache)
        d_ray_agg += d_ray_from_loc
        _add_group(grads, [p for pair in params.location for p in pair], loc_grads)
    if d_sdf is not None and cache.sdf_cache is not None:
        d_ray_from_sdf, d_point_agg, sdf_grads = predict_sdf_backward(
            np.asarray(d_sdf, dtype=np.float64), cache.sdf_cache)
        d_ray_agg += d_ray_from_sdf
        _add_group(grads, [p for pair in params.sdf for p in pair], sdf_grads)

    if cache.frustum_cache is not None:
        d_ray, d_points, gate_grads = frustum_backward(
            d_ray_agg, d_point_agg, d_soft, cache.frustum_cache)
        _add_group(grads, [p for pair in params.gate for p in pair], gate_grads)
    else:
        d_ray, d_points = d_ray_agg, d_point_agg

    d_feat_seq, enc_grads = _encode_rays_backward(d_ray, cache.encoder_cache)
    if "lstm" in enc_grads:
        _add_group(grads, params.lstm.all(), enc_grads["lstm"])
    if "ray_transformer" in enc_grads:
        _add_group(grads, params.ray_transformer.all(), enc_grads["ray_transformer"])
    if "ray_lift" in enc_grads:
        _add_group(grads, list(params.ray_lift), enc_grads["ray_lift"])
    d_point_features = d_feat_seq if d_points is None else d_feat_seq + d_points

    fmap_grads, vol_grad, t_grads = aggregate_point_features_backward(
        d_point_features.reshape(m * config.samples_per_ray, -1), cache.point_cache)
    if t_grads is not None:
        _add_group(grads, params.transformer.all(), t_grads)

    d_reg_values = np.zeros(cache.regularizer_cache[2])
    if d_coarse is not None:
        stride = VOLUME_STRIDE
        h_c = config.image_height // stride
        w_c = config.image_width // stride
        d_lattice = np.asarray(d_coarse, dtype=np.float64).reshape(
            h_c, stride, w_c, stride).sum(axis=(1, 3))
        d_reg_values = d_reg_values + regress_coarse_depth_backward(d_lattice, cache.coarse_cache)
    d_var_values, reg_grads = regularize_volume_backward(d_reg_values, cache.regularizer_cache)
    _add_group(grads, params.regularizer.all(), reg_grads)

    # point features sample the raw variance volume, so their gradient joins
    # the coarse path's below the regularizer
    if vol_grad is not None:
        d_var_values = d_var_values + vol_grad
    view_grads = build_variance_volume_backward(d_var_values, cache.volume_cache)
    for n, fcache in enumerate(cache.feature_caches):
        total = view_grads[n]
        if fmap_grads is not None and fmap_grads[n] is not None:
            total = total + fmap_grads[n]
        feat_grads = extract_features_backward(total, fcache)
        _add_group(grads, params.feature.all(), feat_grads)
    return grads
