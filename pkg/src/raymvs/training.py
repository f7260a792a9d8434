"""Multi-task ray losses, Adam with a stepped schedule, and the joint training loop."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from raymvs.frustum_context import neighbor_validity, sparsity_penalty
from raymvs.model import model_backward, model_forward, save_model, load_model
from raymvs.ray_field import LOCATION_LOW, LOCATION_SPAN
from raymvs.synth_scenes import gt_labels_many, label_consistency_mask


@dataclass
class LossWeights:
    """Weights of the ray-loss terms and the gate sparsity penalty."""

    w_s: float = 0.1
    w_l: float = 0.8
    w_sl: float = 0.1
    lambda_g: float = 0.01

    def __post_init__(self):
        if min(self.w_s, self.w_l, self.w_sl, self.lambda_g) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    """Optimizer schedule and batching knobs."""

    learning_rate: float = 5e-4
    decay: float = 0.9
    decay_every: int = 2
    epochs: int = 12
    batch_rays: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def sdf_loss(pred, gt):
    """Per-ray L1 over the sample sequence, averaged over the batch.

    Args:
        pred, gt: [B, K] normalized sdf values.
    Returns:
        (value, gradient with respect to pred).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"expected matching [B, K] arrays, got {pred.shape} and {gt.shape}")
    diff = pred - gt
    value = float(np.abs(diff).sum(axis=1).mean())
    return value, np.sign(diff) / pred.shape[0]


def location_loss(pred, gt):
    """Batch-averaged L1 between predicted and target crossing locations."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"expected matching shapes, got {pred.shape} and {gt.shape}")
    diff = pred - gt
    return float(np.abs(diff).mean()), np.sign(diff) / pred.size


def consistency_loss(sdf, location):
    """Sign agreement of the two samples bracketing the predicted crossing.

    The reported value is the printed 0/1 indicator (1 when the bracketing
    samples agree in sign, i.e. the field misses a crossing there); the
    gradient comes from the hinge surrogate max(0, s_a * s_b). Locations
    outside the sample grid use the boundary pair.

    Args:
        sdf: [B, K] predicted sdf sequences.
        location: [B] predicted crossing locations.
    Returns:
        (indicator mean, surrogate mean, gradient with respect to sdf).
    """
    sdf = np.asarray(sdf, dtype=np.float64)
    location = np.asarray(location, dtype=np.float64)
    b, k = sdf.shape
    pos = np.clip(np.floor(location * (k - 1)).astype(int), 0, k - 2)
    rows = np.arange(b)
    s_a = sdf[rows, pos]
    s_b = sdf[rows, pos + 1]
    prod = s_a * s_b
    active = prod > 0
    indicator = float(active.mean())
    surrogate = float(np.maximum(prod, 0.0).mean())
    grad = np.zeros_like(sdf)
    grad[rows[active], pos[active]] = s_b[active] / b
    grad[rows[active], pos[active] + 1] = s_a[active] / b
    return indicator, surrogate, grad


def total_loss(parts, weights):
    """Weighted sum of (sdf, location, consistency, gate mean) parts."""
    if len(parts) != 4:
        raise ValueError("expected four loss parts")
    p_s, p_l, p_sl, p_g = (float(p) for p in parts)
    return weights.w_s * p_s + weights.w_l * p_l + weights.w_sl * p_sl + weights.lambda_g * p_g


def masked_l1(pred, gt, mask):
    """Mean absolute error over a pixel mask, with its gradient map."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("mask selects no pixels")
    diff = (np.asarray(pred, dtype=np.float64) - gt) * mask
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def schedule_lr(base, epoch, decay=0.9, every=2):
    """Stepped decay: the base rate multiplied by decay once per `every` epochs."""
    return base * decay ** (epoch // every)


@dataclass
class AdamState:
    """First and second moment accumulators keyed by parameter name."""

    m: dict
    v: dict
    step: int = 0


def init_adam(params):
    return AdamState(
        m={p.name: np.zeros_like(p.value) for p in params},
        v={p.name: np.zeros_like(p.value) for p in params})


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place.

    Args:
        params: Parameter list.
        grads: dict of name to gradient array.
        state: AdamState carried across steps.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = grads[p.name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {p.name!r}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def ray_labels(scene, bundle):
    """Ground-truth targets for a planned ray bundle.

    Returns:
        (s_bar [M, K], location targets [M] clamped to the head's range,
         keep mask [M] of rays safe to supervise, raw crossing labels [M]).
    """
    s_bar, _, l_hat, valid = gt_labels_many(
        scene, bundle.origins, bundle.directions, bundle.coarse_depth,
        np.full(bundle.count, bundle.delta), bundle.k)
    keep = valid & label_consistency_mask(s_bar, l_hat)
    l_target = np.clip(l_hat, LOCATION_LOW, LOCATION_LOW + LOCATION_SPAN)
    return s_bar, l_target, keep, l_hat


def scene_step(params, data, config, weights, rows=None, rng=None, batch_rays=512,
               noise_seed=None, plan=None, labels=None, with_grads=True):
    """Forward, loss assembly, and full parameter gradients for one scene.

    Args:
        data: SceneData with images, cameras, and the GT oracle.
        rows: ray indices entering the ray losses; None samples them from
            the supervisable rays with `rng`.
        plan: optional frozen RayPlan (reused band and sample points).
        labels: optional frozen ray_labels output matching `plan`.
        with_grads: skip the backward pass when False (grads comes back None).
    Returns:
        (parts dict, grads dict, ModelOutput).
    """
    out, cache = model_forward(
        params, data.images, data.scene.cameras, config, noise_seed=noise_seed, plan=plan)
    bundle = out.plan.bundle
    if labels is None:
        labels = ray_labels(data.scene, bundle)
    s_bar, l_target, keep, _ = labels
    if rows is None:
        pool = np.flatnonzero(keep)
        if len(pool) == 0:
            pool = np.arange(bundle.count)
        rows = np.sort(rng.choice(pool, size=min(batch_rays, len(pool)), replace=False))

    m, k = bundle.count, bundle.k
    d_sdf = None
    part_s, indicator, surrogate = 0.0, 0.0, 0.0
    if config.use_sdf_head:
        part_s, g_s = sdf_loss(out.sdf[rows], s_bar[rows])
        indicator, surrogate, g_sl = consistency_loss(out.sdf[rows], out.location[rows])
        d_sdf = np.zeros((m, k))
        d_sdf[rows] = weights.w_s * g_s + weights.w_sl * g_sl
    part_l, g_l = location_loss(out.location[rows], l_target[rows])
    d_location = np.zeros(m)
    d_location[rows] = weights.w_l * g_l

    d_soft, gate_mean, density = None, 0.0, 0.0
    if out.decision is not None and config.use_gating:
        valid = neighbor_validity(config.image_size, config.frustum_width)
        gate_mean, g_gate = sparsity_penalty(out.decision.soft, valid, weight=1.0)
        d_soft = weights.lambda_g * g_gate
        density = float(out.decision.hard.sum() / max(valid.sum(), 1))

    gt_depth = data.depths[0]
    part_c, g_c = masked_l1(out.coarse.upsampled, gt_depth, gt_depth > 0)
    d_coarse = config.coarse_weight * g_c

    total = total_loss((part_s, part_l, surrogate, gate_mean), weights)
    total += config.coarse_weight * part_c
    parts = {
        "total": total, "sdf": part_s, "location": part_l,
        "consistency": indicator, "consistency_surrogate": surrogate,
        "gate": gate_mean, "gate_density": density, "coarse": part_c,
    }
    if not with_grads:
        return parts, None, out
    grads = model_backward(
        params, cache, d_sdf=d_sdf, d_location=d_location, d_soft=d_soft, d_coarse=d_coarse)
    return parts, grads, out


LOG_COLUMNS = ("epoch", "sdf", "location", "consistency", "gate_density", "learning_rate")


def write_training_log(path, history):
    """CSV log with one row per epoch."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in history:
            writer.writerow([f"{row[c]:.17g}" if isinstance(row[c], float) else row[c]
                             for c in LOG_COLUMNS])


@dataclass
class TrainResult:
    """Artifacts and curves from one training run."""

    history: list
    checkpoint_path: str
    log_path: str
    aborted: bool = False
    message: str = ""
    weights: object = field(default=None)


def train(dataset, params, config, train_config, out_dir, weights=None):
    """Joint training over a list of scenes.

    The coarse branch and the per-ray field train together; each step runs
    one whole image through the pipeline and subsamples rays for the loss.
    A non-finite loss aborts and restores the last epoch-end checkpoint.

    Args:
        dataset: list of SceneData.
        params: ModelParams, updated in place.
        config: ModelConfig.
        train_config: TrainConfig.
        out_dir: directory receiving model.ckpt and training_log.csv.
    Returns:
        TrainResult; `aborted` is True when a non-finite loss stopped the run.
    """
    if not dataset:
        raise ValueError("empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if weights is None:
        weights = LossWeights(lambda_g=config.sparsity_weight)
    rng = np.random.default_rng(train_config.seed)
    adam = init_adam(params.all())
    ckpt = out_dir / "model.ckpt"
    log_path = out_dir / "training_log.csv"
    save_model(ckpt, params)

    history = []
    step = 0
    aborted, message = False, ""
    for epoch in range(train_config.epochs):
        lr = schedule_lr(train_config.learning_rate, epoch, train_config.decay,
                         train_config.decay_every)
        sums = None
        for data in dataset:
            step += 1
            noise_seed = (train_config.seed * 1000003 + step) % 2 ** 63
            parts, grads, _ = scene_step(
                params, data, config, weights, rng=rng,
                batch_rays=train_config.batch_rays, noise_seed=noise_seed)
            if not np.isfinite(parts["total"]):
                load_model(ckpt, params)
                aborted = True
                message = (f"non-finite loss at epoch {epoch}, scene {data.name!r}; "
                           f"restored {ckpt}")
                break
            adam_step(params.all(), grads, adam, lr)
            if sums is None:
                sums = {c: 0.0 for c in parts}
            for c in sums:
                sums[c] += parts[c]
        if aborted:
            break
        row = {c: sums[c] / len(dataset) for c in sums}
        row["epoch"] = epoch
        row["learning_rate"] = lr
        history.append(row)
        save_model(ckpt, params)
    write_training_log(log_path, history)
    return TrainResult(history, str(ckpt), str(log_path), aborted, message, weights)
