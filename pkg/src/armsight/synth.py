"""Synthetic labeled scenes: capsule-rendered robot arms over procedural backgrounds.

Each sample is rendered at 512x424 with a pinhole camera placed on a random
sphere segment around the arm. Links are capsules (sphere-swept segments), so
pixel coverage has a closed form: a pixel is robot if the minimum distance
between its viewing ray and a link segment is at most the link radius, with
the surface point in front of the camera. Camera pose and joint angles are
rejection-sampled until the robot occupies an acceptable fraction of the
image.

Coverage math (mirrored verbatim by the brute-force oracle in the tests):
ray r(t) = t*(mx, my, 1), segment A + s*(B - A), s in [0, 1]:

    a = mx*mx + my*my + 1        c = e.e     b = m.e
    d0 = m.A                     e0 = e.A    denom = a*c - b*b
    s = clip((b*d0 - a*e0) / denom, 0, 1)    (s = 0 when denom == 0)
    t = (d0 + b*s) / a
    dist2 = |t*m - A - s*e|^2
    hit depth = t - sqrt(max(r*r - dist2, 0)) / sqrt(a)
    covered = dist2 <= r*r and hit depth > 0
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import datastore
from .geometry import (KinematicChain, PinholeCamera, RigidTransform,
                       forward_kinematics, rotation_about_axis, to_camera_frame)

RENDER_W, RENDER_H = 512, 424
FG_RANGE = (0.06, 0.18)
MAX_ATTEMPTS = 64
FOCAL = 430.0
N_BACKGROUNDS = 12

# family palettes: (body, accent) RGB; variants get distinct accents
_PALETTES = {
    "ur3like": ((196, 198, 204), (66, 116, 224)),
    "ur5like": ((188, 192, 200), (38, 160, 218)),
    "ur10like": ((176, 180, 192), (104, 84, 204)),
    "kukalike": ((214, 212, 206), (236, 124, 38)),
}
_DEFAULT_PALETTE = ((190, 190, 196), (90, 140, 210))
_LIGHT_DIR = np.array([0.35, -0.25, -0.9])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)


class UnreachableForegroundFraction(RuntimeError):
    """Rejection sampling could not land the robot in the target area range."""


@dataclass(frozen=True)
class SceneConfig:
    camera_distance_range: tuple[float, float]
    camera_elevation_range: tuple[float, float] = (0.12, 0.72)
    background_id: int = 0
    brightness: float = 1.0
    seed: int = 0
    distractor: bool = False

    def __post_init__(self):
        lo, hi = self.camera_distance_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad camera distance range ({lo}, {hi})")
        if not 0.5 <= self.brightness <= 1.5:
            raise ValueError(f"brightness {self.brightness} outside [0.5, 1.5]")


@dataclass
class Sample:
    color: np.ndarray        # (H, W, 3) uint8
    mask: np.ndarray         # (H, W) bool
    joints_3d: np.ndarray    # (n_joints + 1, 3), camera frame, meters
    base_3d: np.ndarray      # (3,), camera frame
    robot_type: int
    angles: np.ndarray


def default_scene(chain: KinematicChain, seed: int = 0, distractor: bool = False) -> SceneConfig:
    """Camera distance range scaled to the chain so the arm fills a sensible area."""
    r = chain.reach
    return SceneConfig(camera_distance_range=(0.62 * r + 0.2, 1.02 * r + 0.42),
                       seed=seed, distractor=distractor)


def joint_angle_limits(chain: KinematicChain) -> np.ndarray:
    """(n, 2) sampling limits: full turns on the base and twist joints,
    +/- 2.1 rad on bending joints."""
    lims = np.empty((chain.n_joints, 2))
    for i, joint in enumerate(chain.joints):
        if i == 0 or abs(joint.axis[2]) > 0.9:
            lims[i] = (-math.pi, math.pi)
        else:
            lims[i] = (-2.1, 2.1)
    return lims


def make_camera(position, target, fx: float = FOCAL,
                width: int = RENDER_W, height: int = RENDER_H) -> PinholeCamera:
    """Camera at `position` looking at `target`, both in the robot base frame.

    Image x points right, y points down, z forward (the usual vision frame).
    """
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    forward = forward / np.linalg.norm(forward)
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return PinholeCamera(fx, fx, width / 2.0, height / 2.0, width, height,
                         RigidTransform(rot, -rot @ position))


def pixel_rays(camera: PinholeCamera) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray slopes (mx, my) for rays t*(mx, my, 1) through pixel centers."""
    u = np.arange(camera.width, dtype=float)
    v = np.arange(camera.height, dtype=float)
    mx = (u - camera.cx) / camera.fx
    my = (v - camera.cy) / camera.fy
    return np.broadcast_to(mx, (camera.height, camera.width)), \
        np.broadcast_to(my[:, None], (camera.height, camera.width))


def rasterize_capsules(points_cam: np.ndarray, radii, camera: PinholeCamera):
    """Z-buffered capsule rasterization.

    points_cam: (k+1, 3) camera-frame capsule endpoints; capsule i spans
    points i..i+1 with radius radii[i]. Returns (depth, link_id, shade):
    depth is +inf where uncovered, link_id is -1 there, and shade is the
    cylindrical falloff sqrt(1 - (dist/r)^2) of the winning link.
    """
    mx, my = pixel_rays(camera)
    a = mx * mx + my * my + 1.0
    sqrt_a = np.sqrt(a)
    depth = np.full(mx.shape, np.inf)
    link_id = np.full(mx.shape, -1, dtype=np.int16)
    shade = np.zeros(mx.shape)
    for k in range(len(points_cam) - 1):
        A, B = points_cam[k], points_cam[k + 1]
        r = float(radii[k])
        ex, ey, ez = float(B[0] - A[0]), float(B[1] - A[1]), float(B[2] - A[2])
        c = ex * ex + ey * ey + ez * ez
        b = mx * ex + my * ey + ez
        d0 = mx * A[0] + my * A[1] + A[2]
        e0 = ex * A[0] + ey * A[1] + ez * A[2]
        denom = a * c - b * b
        safe = np.where(denom > 0.0, denom, 1.0)
        s = np.where(denom > 0.0, (b * d0 - a * e0) / safe, 0.0)
        s = np.clip(s, 0.0, 1.0)
        t = (d0 + b * s) / a
        dx = t * mx - (A[0] + s * ex)
        dy = t * my - (A[1] + s * ey)
        dz = t - (A[2] + s * ez)
        dist2 = dx * dx + dy * dy + dz * dz
        thit = t - np.sqrt(np.maximum(r * r - dist2, 0.0)) / sqrt_a
        covered = (dist2 <= r * r) & (thit > 0.0)
        wins = covered & (thit < depth)
        depth[wins] = thit[wins]
        link_id[wins] = k
        shade[wins] = np.sqrt(np.maximum(1.0 - dist2[wins] / (r * r), 0.0))
    return depth, link_id, shade


def _link_colors(name: str, n_links: int, accent_scale: float = 1.0) -> np.ndarray:
    body, accent = _PALETTES.get(name, _DEFAULT_PALETTE)
    colors = np.empty((n_links, 3))
    for k in range(n_links):
        colors[k] = accent if k % 2 == 1 else body
    return colors * accent_scale


def _shade_links(color_img, depth, link_id, shade, points_cam, colors, brightness):
    """Paint covered pixels with per-link Lambertian-ish shading."""
    covered = np.isfinite(depth)
    if not covered.any():
        return
    # per-link diffuse term from the link axis direction
    n_links = len(colors)
    axis_light = np.empty(n_links)
    for k in range(n_links):
        e = points_cam[k + 1] - points_cam[k]
        e = e / max(np.linalg.norm(e), 1e-12)
        axis_light[k] = 0.75 + 0.25 * abs(float(e @ _LIGHT_DIR))
    lid = link_id[covered]
    lum = brightness * axis_light[lid] * (0.45 + 0.55 * shade[covered])
    color_img[covered] = colors[lid] * lum[:, None]


def _background(height, width, background_id: int, seed: int) -> np.ndarray:
    """Procedural backdrop: gradient, checkerboard or value noise by id."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, background_id, 0xB6)))
    c0 = rng.uniform(60, 215, size=3)
    c1 = rng.uniform(60, 215, size=3)
    kind = background_id % 3
    yy, xx = np.mgrid[0:height, 0:width]
    if kind == 0:
        phi = rng.uniform(0, 2 * math.pi)
        ramp = (xx * math.cos(phi) + yy * math.sin(phi))
        ramp = (ramp - ramp.min()) / max(float(np.ptp(ramp)), 1e-9)
    elif kind == 1:
        cell = int(rng.integers(18, 60))
        ramp = ((xx // cell + yy // cell) % 2).astype(float)
        ramp = 0.25 + 0.5 * ramp
    else:
        gh, gw = 7, 9
        grid = rng.uniform(size=(gh, gw))
        fy = yy * (gh - 1) / (height - 1)
        fx = xx * (gw - 1) / (width - 1)
        y0, x0 = fy.astype(int), fx.astype(int)
        y1, x1 = np.minimum(y0 + 1, gh - 1), np.minimum(x0 + 1, gw - 1)
        wy, wx = fy - y0, fx - x0
        ramp = (grid[y0, x0] * (1 - wy) * (1 - wx) + grid[y1, x0] * wy * (1 - wx)
                + grid[y0, x1] * (1 - wy) * wx + grid[y1, x1] * wy * wx)
    return c0[None, None, :] * (1 - ramp[..., None]) + c1[None, None, :] * ramp[..., None]


def _sample_pose(chain, cfg: SceneConfig, rng) -> tuple[np.ndarray, PinholeCamera, np.ndarray]:
    lims = joint_angle_limits(chain)
    angles = rng.uniform(lims[:, 0], lims[:, 1])
    reach = chain.reach
    target = np.array([0.0, 0.0, 0.38 * reach]) + rng.uniform(-0.07, 0.07, size=3) * reach
    dist = rng.uniform(*cfg.camera_distance_range)
    elev = rng.uniform(*cfg.camera_elevation_range)
    azim = rng.uniform(0.0, 2 * math.pi)
    offset = np.array([math.cos(elev) * math.cos(azim),
                       math.cos(elev) * math.sin(azim),
                       math.sin(elev)])
    camera = make_camera(target + dist * offset, target)
    return angles, camera, target


def render_sample(chain: KinematicChain, robot_type: int, scene: SceneConfig) -> Sample:
    """Deterministic in `scene.seed`; retries pose sampling until the robot
    covers an in-range fraction of the image."""
    rng = np.random.default_rng(np.random.SeedSequence(scene.seed))
    radii = [j.radius for j in chain.joints]
    for _ in range(MAX_ATTEMPTS):
        angles, camera, target = _sample_pose(chain, scene, rng)
        pts_cam = to_camera_frame(forward_kinematics(chain, angles), camera)
        depth, link_id, shade = rasterize_capsules(pts_cam, radii, camera)
        mask = np.isfinite(depth)
        frac = mask.mean()
        if FG_RANGE[0] <= frac <= FG_RANGE[1]:
            break
    else:
        raise UnreachableForegroundFraction(
            f"no pose reached foreground fraction {FG_RANGE} in {MAX_ATTEMPTS} tries "
            f"(seed {scene.seed})")

    color = _background(camera.height, camera.width, scene.background_id, scene.seed)
    color *= 0.6 + 0.4 * scene.brightness

    if scene.distractor:
        # an inert copy of the arm, strictly farther from the camera
        d_angles = rng.uniform(joint_angle_limits(chain)[:, 0], joint_angle_limits(chain)[:, 1])
        yaw = rng.uniform(0, 2 * math.pi)
        cam_pos = camera.extrinsic.inverse().translation
        away = target - cam_pos
        away = away / np.linalg.norm(away)
        side = np.cross(away, [0.0, 0.0, 1.0])
        side = side / max(np.linalg.norm(side), 1e-9)
        base = target + away * chain.reach * rng.uniform(1.1, 1.7) \
            + side * chain.reach * rng.uniform(-0.7, 0.7)
        spin = RigidTransform(rotation_about_axis((0, 0, 1), yaw), base)
        d_pts = to_camera_frame(spin.apply(forward_kinematics(chain, d_angles)), camera)
        d_depth, d_link, d_shade = rasterize_capsules(d_pts, radii, camera)
        d_cover = np.isfinite(d_depth) & ~mask
        dimmed = _link_colors(chain.name, chain.n_joints) * 0.55
        d_img = np.zeros_like(color)
        _shade_links(d_img, np.where(d_cover, d_depth, np.inf), d_link, d_shade,
                     d_pts, dimmed, scene.brightness)
        color[d_cover] = d_img[d_cover]

    _shade_links(color, depth, link_id, shade, pts_cam,
                 _link_colors(chain.name, chain.n_joints), scene.brightness)
    color_u8 = np.clip(np.rint(color), 0, 255).astype(np.uint8)
    return Sample(color=color_u8, mask=mask, joints_3d=pts_cam, base_3d=pts_cam[0].copy(),
                  robot_type=int(robot_type), angles=angles)


def sample_seed(base_seed: int, index: int) -> int:
    """Deterministic per-sample seed derived from the dataset base seed."""
    return int(np.random.SeedSequence((base_seed, index)).generate_state(1, np.uint64)[0])


def generate_mixed_dataset(variants, n: int, base_configs, out_dir,
                           family: str, class_names, split_seed=None):
    """Render `n` samples cycling through (chain, label) variants and write a dataset.

    `base_configs` maps each variant index to its SceneConfig template; the
    per-sample seed, background and brightness are derived from the template's
    seed so reruns are bit-identical.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    n_joints = variants[0][0].n_joints
    if any(ch.n_joints != n_joints for ch, _ in variants):
        raise ValueError("all variants in one dataset must share the joint count")
    records = []
    writer = datastore.DatasetWriter(out_dir)
    for i in range(n):
        chain, label = variants[i % len(variants)]
        cfg = base_configs[i % len(variants)]
        seed_i = sample_seed(cfg.seed, i)
        per_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, i, 0x5C)))
        scene = replace(cfg, seed=seed_i,
                        background_id=int(per_rng.integers(0, N_BACKGROUNDS)),
                        brightness=float(per_rng.uniform(0.5, 1.5)))
        sample = render_sample(chain, label, scene)
        records.append(writer.add(sample, index=i))
    manifest = datastore.DatasetManifest(
        records=records, robot_type=family, n_joints=n_joints,
        n_types=len(class_names), class_names=tuple(class_names),
        split_seed=None, base_seed=int(base_configs[0].seed), root=writer.root)
    if split_seed is not None:
        manifest = datastore.split(manifest, seed=split_seed)
    datastore.save_manifest(manifest)
    return manifest


def generate_dataset(chain: KinematicChain, robot_type: int, n: int,
                     base_config: SceneConfig, out_dir, *,
                     family: str | None = None, class_names=None, split_seed=None):
    """Single-robot dataset; see `generate_mixed_dataset` for the general form."""
    family = family or chain.name
    class_names = class_names or (chain.name,)
    return generate_mixed_dataset([(chain, robot_type)], n, [base_config], out_dir,
                                  family=family, class_names=class_names,
                                  split_seed=split_seed)
