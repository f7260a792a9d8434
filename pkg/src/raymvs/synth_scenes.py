"""Analytic multi-view scenes with exact depth and signed-distance oracles."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from raymvs.geometry import (
    CameraView,
    load_cameras,
    project_points,
    ray_depth_scale,
    rays_through_pixels,
    save_cameras,
)

HIT_EPS = 1e-9


@dataclass
class Texture:
    """Two-band trigonometric surface color, a pure function of world position."""

    base: np.ndarray  # [3]
    w1: np.ndarray    # [3, 3] wave vectors per channel
    p1: np.ndarray    # [3]
    w2: np.ndarray    # [3, 3]
    p2: np.ndarray    # [3]

    def eval(self, points):
        pts = np.asarray(points, dtype=np.float64)
        out = np.empty((len(pts), 3))
        for c in range(3):
            tex = 0.55 + 0.25 * np.sin(pts @ self.w1[c] + self.p1[c]) \
                + 0.2 * np.sin(pts @ self.w2[c] + self.p2[c])
            out[:, c] = self.base[c] * tex
        return out

    def to_dict(self):
        return {"base": self.base.tolist(), "w1": self.w1.tolist(), "p1": self.p1.tolist(),
                "w2": self.w2.tolist(), "p2": self.p2.tolist()}

    @staticmethod
    def from_dict(d):
        return Texture(*(np.array(d[k]) for k in ("base", "w1", "p1", "w2", "p2")))


def _random_texture(rng):
    return Texture(
        base=rng.uniform(0.6, 1.0, size=3),
        w1=rng.uniform(-6, 6, size=(3, 3)),
        p1=rng.uniform(0, 2 * np.pi, size=3),
        w2=rng.uniform(-3, 3, size=(3, 3)),
        p2=rng.uniform(0, 2 * np.pi, size=3),
    )


@dataclass
class Plane:
    """Infinite plane through `point` with unit `normal`; positive side outside."""

    point: np.ndarray
    normal: np.ndarray
    texture: Texture

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.normal = self.normal / np.linalg.norm(self.normal)

    def sdf(self, pts):
        return (pts - self.point) @ self.normal

    def intersect(self, origins, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origins) @ self.normal) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > HIT_EPS), t, np.inf)
        normals = np.broadcast_to(self.normal, (len(origins), 3))
        return t, normals

    def to_dict(self):
        return {"kind": "plane", "point": self.point.tolist(),
                "normal": self.normal.tolist(), "texture": self.texture.to_dict()}


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.radius = float(self.radius)

    def sdf(self, pts):
        return np.linalg.norm(pts - self.center, axis=-1) - self.radius

    def intersect(self, origins, dirs):
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=1)
        disc = b * b - (np.sum(oc * oc, axis=1) - self.radius ** 2)
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near, t_far = -b - sq, -b + sq
        t = np.where(t_near > HIT_EPS, t_near, t_far)
        t = np.where((disc > 0) & (t > HIT_EPS), t, np.inf)
        pts = origins + t[:, None] * dirs
        with np.errstate(invalid="ignore"):
            normals = (pts - self.center) / self.radius
        return t, np.where(np.isfinite(normals), normals, 0.0)

    def to_dict(self):
        return {"kind": "sphere", "center": self.center.tolist(),
                "radius": self.radius, "texture": self.texture.to_dict()}


@dataclass
class Box:
    """Oriented box; `rot` maps local to world coordinates."""

    center: np.ndarray
    half: np.ndarray
    rot: np.ndarray
    texture: Texture

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half = np.asarray(self.half, dtype=np.float64)
        self.rot = np.asarray(self.rot, dtype=np.float64)

    def sdf(self, pts):
        local = (np.asarray(pts) - self.center) @ self.rot
        q = np.abs(local) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def intersect(self, origins, dirs):
        ol = (origins - self.center) @ self.rot
        dl = dirs @ self.rot
        parallel = np.abs(dl) < 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.where(parallel, 1.0, dl)
        t1 = (-self.half - ol) * inv
        t2 = (self.half - ol) * inv
        t_lo = np.minimum(t1, t2)
        t_hi = np.maximum(t1, t2)
        # parallel axes: inside the slab keeps the interval open, outside kills it
        in_slab = np.abs(ol) <= self.half
        t_lo = np.where(parallel, np.where(in_slab, -np.inf, np.inf), t_lo)
        t_hi = np.where(parallel, np.where(in_slab, np.inf, -np.inf), t_hi)
        tmin = t_lo.max(axis=1)
        tmax = t_hi.min(axis=1)
        hit = tmax >= np.maximum(tmin, HIT_EPS)
        t = np.where(tmin > HIT_EPS, tmin, tmax)
        t = np.where(hit & (t > HIT_EPS), t, np.inf)
        safe_t = np.where(np.isfinite(t), t, 0.0)
        ql = ol + safe_t[:, None] * dl
        ratio = np.abs(ql) / self.half
        axis = ratio.argmax(axis=1)
        n_local = np.zeros((len(origins), 3))
        n_local[np.arange(len(origins)), axis] = np.sign(
            ql[np.arange(len(origins)), axis])
        return t, n_local @ self.rot.T

    def to_dict(self):
        return {"kind": "box", "center": self.center.tolist(), "half": self.half.tolist(),
                "rot": self.rot.tolist(), "texture": self.texture.to_dict()}


def primitive_from_dict(d):
    tex = Texture.from_dict(d["texture"])
    if d["kind"] == "plane":
        return Plane(np.array(d["point"]), np.array(d["normal"]), tex)
    if d["kind"] == "sphere":
        return Sphere(np.array(d["center"]), d["radius"], tex)
    if d["kind"] == "box":
        return Box(np.array(d["center"]), np.array(d["half"]), np.array(d["rot"]), tex)
    raise ValueError(f"unknown primitive kind {d['kind']!r}")


@dataclass
class Degradation:
    """An image corruption: box blur, additive Gaussian noise, or gain."""

    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in ("blur", "noise", "gain"):
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("magnitude must be nonnegative")


@dataclass
class SceneGT:
    """A set of analytic primitives with posed cameras and exact oracles."""

    primitives: list
    cameras: list
    image_size: tuple
    depth_range: tuple
    light: np.ndarray
    designated: int = 0

    def gt_sdf(self, points):
        """Exact signed distance to the nearest surface, positive outside.

        Args:
            points: [..., 3] world points.

        Returns:
            [...] signed distances (min over the primitive union).
        """
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 3)
        best = np.full(len(flat), np.inf)
        for prim in self.primitives:
            best = np.minimum(best, prim.sdf(flat))
        return best.reshape(pts.shape[:-1])

    def cast(self, origins, dirs):
        """First-hit ray cast.

        Returns:
            (t [M] ray distance, inf on miss; prim index [M], -1 on miss;
             surface normals [M, 3]).
        """
        M = len(origins)
        best_t = np.full(M, np.inf)
        best_i = np.full(M, -1, dtype=np.int64)
        best_n = np.zeros((M, 3))
        for i, prim in enumerate(self.primitives):
            t, n = prim.intersect(origins, dirs)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_i = np.where(closer, i, best_i)
            best_n = np.where(closer[:, None], n, best_n)
        return best_t, best_i, best_n

    def gt_depth(self, view, pixel):
        """Exact camera-frame depth of the first surface seen by a pixel (0 on miss)."""
        origins, dirs = rays_through_pixels(view, np.asarray(pixel, dtype=float).reshape(1, 2))
        t, _, _ = self.cast(origins, dirs)
        if not np.isfinite(t[0]):
            return 0.0
        return float(t[0] * ray_depth_scale(view, dirs)[0])

    def gt_depth_map(self, view):
        """Exact depth map [H, W] plus hit mask for a camera."""
        H, W = self.image_size
        uu, vv = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
        uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
        origins, dirs = rays_through_pixels(view, uv)
        t, idx, _ = self.cast(origins, dirs)
        z = t * ray_depth_scale(view, dirs)
        mask = np.isfinite(t)
        z = np.where(mask, z, 0.0)
        return z.reshape(H, W), mask.reshape(H, W), idx.reshape(H, W)

    def to_dict(self):
        return {
            "image_size": list(self.image_size),
            "depth_range": list(self.depth_range),
            "light": self.light.tolist(),
            "designated": self.designated,
            "primitives": [p.to_dict() for p in self.primitives],
        }


@dataclass
class SceneConfig:
    """Knobs for the procedural scene generator."""

    image_size: tuple = (64, 64)
    n_views: int = 3
    n_spheres: int = 2
    n_boxes: int = 1
    backdrop_depth: float = 3.0
    depth_range: tuple = (1.0, 4.0)
    baseline: float = 0.35
    focal_px: float | None = None
    aim_jitter: float = 0.0
    min_backdrop_fraction: float = 0.8


def _look_at(center, target):
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    right = np.cross(np.array([0.0, 1.0, 0.0]), forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraView(np.eye(3), R, -R @ center).R


def generate_scene(config, seed):
    """Build a deterministic analytic scene with overlapping cameras.

    Args:
        config: SceneConfig.
        seed: integer seed; identical seeds yield identical scenes.

    Returns:
        SceneGT whose designated backdrop covers at least the configured
        pixel fraction in every view.

    Raises:
        ValueError: if the camera frusta do not overlap on the backdrop anchor.
    """
    if config.n_views < 2:
        raise ValueError("need at least two cameras")
    rng = np.random.default_rng(seed)
    H, W = config.image_size
    f = config.focal_px if config.focal_px is not None else float(W)
    K = np.array([[f, 0.0, (W - 1) / 2.0], [0.0, f, (H - 1) / 2.0], [0.0, 0.0, 1.0]])

    anchor = np.array([0.0, 0.0, config.backdrop_depth])
    normal = np.array([rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12), -1.0])
    backdrop = Plane(anchor, normal / np.linalg.norm(normal), _random_texture(rng))

    cameras = [CameraView(K, np.eye(3), np.zeros(3), id=1)]
    for i in range(1, config.n_views):
        center = np.array([
            rng.uniform(-1, 1) * config.baseline,
            rng.uniform(-1, 1) * config.baseline,
            rng.uniform(-0.3, 0.3) * config.baseline,
        ])
        R = _look_at(center, anchor)
        if config.aim_jitter > 0:
            a = config.aim_jitter * rng.uniform(-1, 1)
            ca, sa = np.cos(a), np.sin(a)
            R = np.array([[ca, 0, -sa], [0, 1, 0], [sa, 0, ca]]) @ R
        cameras.append(CameraView(K, R, -R @ center, id=i + 1))

    # foreground objects; thicker than the refinement band so a crossing is isolated
    z_span = config.depth_range[1] - config.depth_range[0]
    min_thick = 2.0 * 0.05 * z_span
    fov_half = (W / 2.0) / f
    spheres, boxes = [], []
    for _ in range(config.n_spheres):
        z = rng.uniform(0.55, 0.75) * config.backdrop_depth
        lateral = 0.55 * z * fov_half
        c = np.array([rng.uniform(-lateral, lateral), rng.uniform(-lateral, lateral), z])
        r = max(rng.uniform(0.08, 0.14) * z, min_thick)
        spheres.append(Sphere(c, r, _random_texture(rng)))
    for _ in range(config.n_boxes):
        z = rng.uniform(0.55, 0.75) * config.backdrop_depth
        lateral = 0.5 * z * fov_half
        c = np.array([rng.uniform(-lateral, lateral), rng.uniform(-lateral, lateral), z])
        half = np.maximum(rng.uniform(0.07, 0.12, size=3) * z, min_thick)
        axis = rng.normal(size=3)
        axis = axis / np.linalg.norm(axis)
        a = rng.uniform(-0.4, 0.4)
        Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        rot = np.eye(3) + np.sin(a) * Kx + (1 - np.cos(a)) * (Kx @ Kx)
        boxes.append(Box(c, half, rot, _random_texture(rng)))

    light = np.array([0.3, -0.5, -0.8])
    light = light / np.linalg.norm(light)

    for cam in cameras:
        uv, z = project_points(anchor.reshape(1, 3), cam)
        if z[0] <= 0 or not (0 <= uv[0, 0] <= W - 1 and 0 <= uv[0, 1] <= H - 1):
            raise ValueError("camera frusta do not overlap on the backdrop")

    for _ in range(8):
        scene = SceneGT([backdrop] + spheres + boxes, cameras,
                        config.image_size, config.depth_range, light, designated=0)
        fractions = []
        for cam in cameras:
            _, mask, idx = scene.gt_depth_map(cam)
            fractions.append(np.mean(mask & (idx == 0)))
        if min(fractions) >= config.min_backdrop_fraction:
            return scene
        spheres = [Sphere(s.center, max(s.radius * 0.75, 1e-3), s.texture) for s in spheres]
        boxes = [Box(b.center, np.maximum(b.half * 0.75, 1e-3), b.rot, b.texture) for b in boxes]
    return scene


def render_view(scene, camera):
    """Ray-cast a camera into shaded RGB and exact depth.

    Args:
        scene: SceneGT.
        camera: CameraView among (or compatible with) scene.cameras.

    Returns:
        (image [3, H, W] quantized to the 16-bit grid, depth [H, W] camera-frame z,
         hit mask [H, W]; background pixels carry zero color and depth).
    """
    H, W = scene.image_size
    uu, vv = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    origins, dirs = rays_through_pixels(camera, uv)
    t, idx, normals = scene.cast(origins, dirs)
    mask = np.isfinite(t)
    safe_t = np.where(mask, t, 0.0)
    pts = origins + safe_t[:, None] * dirs
    colors = np.zeros((H * W, 3))
    for i, prim in enumerate(scene.primitives):
        sel = mask & (idx == i)
        if not np.any(sel):
            continue
        shade = 0.55 + 0.45 * np.maximum(normals[sel] @ scene.light, 0.0)
        colors[sel] = np.clip(prim.texture.eval(pts[sel]) * shade[:, None], 0.0, 1.0)
    image = np.round(colors.T.reshape(3, H, W) * 65535.0) / 65535.0
    depth = np.where(mask, t * ray_depth_scale(camera, dirs), 0.0).reshape(H, W)
    return image, depth, mask.reshape(H, W)


def gt_labels_many(scene, origins, dirs, d_c, delta, K):
    """Ground-truth supervision for a batch of rays.

    Args:
        origins, dirs: [M, 3] rays (unit directions).
        d_c: [M] band centers in ray-distance units.
        delta: [M] band half-widths in ray-distance units.
        K: number of hypothesis points per ray.

    Returns:
        (s_bar [M, K] per-ray max-normalized SDFs, s_max [M], l_hat [M]
         possibly outside [0, 1], valid [M] false where the ray hits nothing).
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    d_c = np.asarray(d_c, dtype=np.float64).reshape(-1)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    M = len(origins)
    ks = np.arange(K, dtype=np.float64)
    dist = d_c[:, None] - delta[:, None] + 2.0 * delta[:, None] * ks / (K - 1)
    pts = origins[:, None, :] + dist[..., None] * dirs[:, None, :]
    s = scene.gt_sdf(pts.reshape(-1, 3)).reshape(M, K)
    t_hit, _, _ = scene.cast(origins, dirs)
    valid = np.isfinite(t_hit)
    t_safe = np.where(valid, t_hit, 0.0)
    l_hat = (t_safe - (d_c - delta)) / (2.0 * delta)
    s_max = np.maximum(np.abs(s).max(axis=1), 1e-12)
    return s / s_max[:, None], s_max, l_hat, valid


def label_consistency_mask(s_bar, l_hat):
    """Rays whose in-band label sequence crosses zero exactly once, decreasing.

    Out-of-band rays (l_hat outside [0, 1]) are kept; no crossing is expected
    of them. Edge-grazing rays that pierce a thin silhouette twice inside the
    band are dropped so the monotone-crossing premise holds for training rays.
    """
    s_bar = np.asarray(s_bar)
    l_hat = np.asarray(l_hat)
    signs = np.sign(s_bar)
    changes = np.sum(signs[:, :-1] != signs[:, 1:], axis=1)
    in_band = (l_hat >= 0.0) & (l_hat <= 1.0)
    return np.where(in_band, changes == 1, True)


def gt_labels_along_ray(scene, ray, d_c, delta, K):
    """Single-ray wrapper around gt_labels_many; see that function."""
    s_bar, s_max, l_hat, valid = gt_labels_many(
        scene, ray.origin.reshape(1, 3), ray.direction.reshape(1, 3),
        np.array([d_c]), np.array([delta]), K)
    return s_bar[0], float(s_max[0]), float(l_hat[0]), bool(valid[0])


def degrade(image, degradation, seed=0):
    """Apply one deterministic corruption to an image.

    Args:
        image: [C, H, W] floats.
        degradation: Degradation; blur uses a (2m+1) box with reflected borders,
            noise adds Gaussian sigma=magnitude, gain multiplies by magnitude.
        seed: noise stream seed.

    Returns:
        Corrupted copy of the image.
    """
    image = np.asarray(image, dtype=np.float64)
    if degradation.kind == "gain":
        return image * degradation.magnitude
    if degradation.kind == "blur":
        m = int(round(degradation.magnitude))
        if m <= 0:
            return image.copy()
        size = 2 * m + 1
        return ndimage.uniform_filter(image, size=(1, size, size), mode="reflect")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    return image + degradation.magnitude * rng.standard_normal(image.shape)


def save_pfm(path, data):
    """Write a [H, W] float map as little-endian Pf with bottom-up rows."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("PFM writer expects a single-channel map")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(data[::-1].astype("<f4").tobytes())


def load_pfm(path):
    """Read a Pf depth map written by save_pfm; returns float64 [H, W]."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValueError("not a single-channel PFM file")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(4 * w * h), dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w)[::-1].astype(np.float64)


def save_ppm(path, image):
    """Write a [3, H, W] float image in [0, 1] as 16-bit binary P6."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError("PPM writer expects [3, H, W]")
    q = np.clip(np.round(image * 65535.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(b"P6\n")
        fh.write(f"{image.shape[2]} {image.shape[1]}\n".encode())
        fh.write(b"65535\n")
        fh.write(q.transpose(1, 2, 0).tobytes())


def load_ppm(path):
    """Read a 16-bit P6 image written by save_ppm; returns float64 [3, H, W]."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ValueError("not a binary PPM file")
        w, h = (int(x) for x in fh.readline().split())
        if int(fh.readline()) != 65535:
            raise ValueError("expected 16-bit maxval")
        data = np.frombuffer(fh.read(6 * w * h), dtype=">u2")
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 65535.0


@dataclass
class SceneData:
    """A rendered scene: oracle, per-view images, and float32-rounded depths."""

    name: str
    scene: SceneGT
    images: np.ndarray  # [N, 3, H, W]
    depths: np.ndarray  # [N, H, W]


def build_scene_data(scene, name):
    """Render every camera of a scene into a SceneData bundle."""
    images, depths = [], []
    for cam in scene.cameras:
        img, depth, _ = render_view(scene, cam)
        images.append(img)
        depths.append(depth.astype(np.float32).astype(np.float64))
    return SceneData(name, scene, np.stack(images), np.stack(depths))


def build_dataset(config, n_scenes, seed):
    """Generate and render n_scenes deterministic scenes, seeds seed..seed+n-1."""
    return [build_scene_data(generate_scene(config, seed + i), f"scene_{seed + i:04d}")
            for i in range(n_scenes)]


def export_dataset(scenes, out_dir):
    """Write a dataset directory: manifest, cameras, images, depths, oracles.

    Args:
        scenes: list of SceneData.
        out_dir: target directory, created if missing.

    Layout: manifest.txt at the root; per scene a folder with cams.txt,
    scene.json, view_XX.ppm and depth_XX.pfm files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for data in scenes:
        sdir = out / data.name
        sdir.mkdir(exist_ok=True)
        cams = [(c.K, c.R, c.t, data.scene.depth_range) for c in data.scene.cameras]
        save_cameras(sdir / "cams.txt", cams)
        (sdir / "scene.json").write_text(json.dumps(data.scene.to_dict()))
        for i in range(len(data.scene.cameras)):
            save_ppm(sdir / f"view_{i:02d}.ppm", data.images[i])
            save_pfm(sdir / f"depth_{i:02d}.pfm", data.depths[i])
            role = "reference" if i == 0 else "source"
            manifest.append(f"{data.name} view_{i:02d} {role}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")


def load_dataset(root):
    """Load a dataset directory written by export_dataset."""
    root = Path(root)
    names = []
    for line in (root / "manifest.txt").read_text().splitlines():
        name = line.split()[0]
        if name not in names:
            names.append(name)
    scenes = []
    for name in names:
        sdir = root / name
        meta = json.loads((sdir / "scene.json").read_text())
        cams = load_cameras(sdir / "cams.txt")
        cameras = [CameraView(K, R, t, id=i + 1) for i, (K, R, t, _) in enumerate(cams)]
        scene = SceneGT(
            [primitive_from_dict(p) for p in meta["primitives"]],
            cameras,
            tuple(meta["image_size"]),
            tuple(meta["depth_range"]),
            np.array(meta["light"]),
            meta["designated"],
        )
        images = np.stack([load_ppm(sdir / f"view_{i:02d}.ppm") for i in range(len(cameras))])
        depths = np.stack([load_pfm(sdir / f"depth_{i:02d}.pfm") for i in range(len(cameras))])
        scenes.append(SceneData(name, scene, images, depths))
    return scenes
