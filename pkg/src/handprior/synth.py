"""Synthetic articulated hand rendered into depth maps.

The hand is an ellipsoid palm plus five fingers of three capsules each.
Sixteen joints are annotated: the palm centre followed by the three
segment end points of the thumb, index, middle, ring and pinky fingers.
Joint angles are a fixed affine function of ``k`` latent variables, so the
poses live near a ``k``-dimensional manifold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .preprocess import DepthFrame, Intrinsics

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
JOINT_NAMES = ["palm"] + [f"{f}_{i}" for f in FINGERS for i in (1, 2, 3)]
NUM_JOINTS = len(JOINT_NAMES)

# hand frame: +x towards the thumb, +y along the fingers, +z out of the back of the hand
PALM_AXES = np.array([40.0, 45.0, 14.0])
FINGER_BASE = np.array([
    [30.0, -18.0, 2.0],
    [24.0, 40.0, 0.0],
    [8.0, 44.0, 0.0],
    [-8.0, 41.0, 0.0],
    [-23.0, 34.0, 0.0],
])
FINGER_YAW = np.array([-0.9, -0.08, 0.0, 0.08, 0.18])   # rest direction about +z
SEGMENT_LENGTHS = np.array([
    [38.0, 32.0, 27.0],
    [40.0, 24.0, 20.0],
    [44.0, 28.0, 22.0],
    [41.0, 26.0, 21.0],
    [32.0, 20.0, 18.0],
])
SEGMENT_RADII = np.array([
    [11.0, 9.5, 8.5],
    [9.0, 8.0, 7.0],
    [9.0, 8.0, 7.0],
    [8.5, 7.5, 6.5],
    [7.5, 6.5, 6.0],
])

# articulation vector: global rotation (3), then per finger: abduction, flex1, flex2, flex3
NUM_ARTICULATIONS = 3 + 4 * len(FINGERS)
REST_ANGLES = np.concatenate([[0.0, 0.0, 0.0], np.tile([0.0, 0.35, 0.35, 0.25], len(FINGERS))])
ANGLE_SPAN = np.concatenate([[0.3, 0.3, 0.4], np.tile([0.05, 0.14, 0.14, 0.09], len(FINGERS))])
_SYNERGY_SEED = 20150101
BACKGROUND_MM = 900.0


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


# fingers up in the image, palm towards the camera
_BASE_ROT = _rot_z(np.pi)


@dataclass
class SynthConfig:
    n_samples: int = 1000
    seed: int = 0
    width: int = 160
    height: int = 120
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(160.0, 160.0, 80.0, 60.0))
    latent_dim: int = 8
    hole_prob: float = 0.0
    label_noise: float = 0.0
    depth_range: tuple[float, float] = (450.0, 550.0)
    lateral_range: float = 30.0

    def __post_init__(self):
        if not 1 <= self.latent_dim <= NUM_ARTICULATIONS:
            raise ValueError(f"latent_dim must lie in [1, {NUM_ARTICULATIONS}]")
        if not 0.0 <= self.hole_prob <= 1.0:
            raise ValueError("hole_prob must lie in [0, 1]")
        if self.label_noise < 0:
            raise ValueError("label_noise must be >= 0")


def synergy_matrix(k: int) -> np.ndarray:
    """Fixed ``[NUM_ARTICULATIONS, k]`` map from latents to angle offsets."""
    rng = np.random.default_rng(_SYNERGY_SEED)
    b = rng.standard_normal((NUM_ARTICULATIONS, NUM_ARTICULATIONS))[:, :k]
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    return ANGLE_SPAN[:, None] * b


def angles_from_latent(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return REST_ANGLES + synergy_matrix(z.shape[-1]) @ z


@dataclass
class HandGeometry:
    joints: np.ndarray       # [16, 3] camera mm
    palm_center: np.ndarray
    palm_rot: np.ndarray     # columns: palm axes in camera frame
    capsules: list           # (a, b, radius, joint index of b)


def pose_hand(angles: np.ndarray, translation: np.ndarray) -> HandGeometry:
    """Forward kinematics for one articulation vector."""
    g = _BASE_ROT @ _rot_z(angles[2]) @ _rot_y(angles[1]) @ _rot_x(angles[0])
    t = np.asarray(translation, dtype=np.float64)
    joints = [t.copy()]
    capsules = []
    for f in range(len(FINGERS)):
        abd, f1, f2, f3 = angles[3 + 4 * f: 7 + 4 * f]
        base = t + g @ FINGER_BASE[f]
        rot = g @ _rot_z(FINGER_YAW[f] + abd)
        if f == 0:
            # the thumb curls across the palm rather than into it
            rot = rot @ _rot_y(-0.6)
        prev = base
        for s, flex in enumerate((f1, f2, f3)):
            # positive flexion curls towards the palm (-z in the hand frame)
            rot = rot @ _rot_x(-flex)
            nxt = prev + rot @ np.array([0.0, SEGMENT_LENGTHS[f, s], 0.0])
            capsules.append((prev, nxt, SEGMENT_RADII[f, s], len(joints)))
            joints.append(nxt)
            prev = nxt
    return HandGeometry(np.array(joints), t, g, capsules)


def joint_radii() -> np.ndarray:
    """Radius of the sphere centred on every joint (palm: largest semi-axis)."""
    return np.concatenate([[PALM_AXES.max()], SEGMENT_RADII.reshape(-1)])


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------


def _rays(us: np.ndarray, vs: np.ndarray, intr: Intrinsics) -> np.ndarray:
    d = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us, dtype=np.float64)], -1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_sphere(rd: np.ndarray, c: np.ndarray, r: float) -> np.ndarray:
    """Distance along unit rays from the origin to a sphere; inf on miss."""
    b = rd @ c
    h = b * b - (c @ c - r * r)
    t = np.full(rd.shape[:-1], np.inf)
    ok = h >= 0
    t[ok] = b[ok] - np.sqrt(h[ok])
    t[t <= 0] = np.inf
    return t


def ray_capsule(rd: np.ndarray, a: np.ndarray, b: np.ndarray, r: float) -> np.ndarray:
    ba = b - a
    oa = -a
    baba = ba @ ba
    bard = rd @ ba
    baoa = ba @ oa
    rdoa = rd @ oa
    oaoa = oa @ oa
    qa = baba - bard * bard
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa * baoa - r * r * baba
    h = qb * qb - qa * qc
    hit = (h >= 0) & (qa > 1e-12)
    tb = (-qb - np.sqrt(np.where(hit, h, 0.0))) / np.where(qa > 1e-12, qa, 1.0)
    y = baoa + tb * bard
    body = hit & (y > 0) & (y < baba) & (tb > 0)
    t = np.where(body, tb, np.inf)
    return np.minimum(t, np.minimum(ray_sphere(rd, a, r), ray_sphere(rd, b, r)))


def ray_ellipsoid(rd: np.ndarray, c: np.ndarray, rot: np.ndarray, axes: np.ndarray) -> np.ndarray:
    o = (rot.T @ -c) / axes
    d = (rd @ rot) / axes
    qa = np.einsum("...i,...i->...", d, d)
    qb = d @ o
    qc = o @ o - 1.0
    h = qb * qb - qa * qc
    t = np.full(rd.shape[:-1], np.inf)
    ok = h >= 0
    t[ok] = (-qb[ok] - np.sqrt(h[ok])) / qa[ok]
    t[t <= 0] = np.inf
    return t


def _bbox(center: np.ndarray, radius: float, intr: Intrinsics, w: int, h: int):
    x, y, z = center
    zn, zf = max(z - radius, 1.0), z + radius
    us = [intr.fx * (x + s * radius) / zz + intr.cx for s in (-1, 1) for zz in (zn, zf)]
    vs = [intr.fy * (y + s * radius) / zz + intr.cy for s in (-1, 1) for zz in (zn, zf)]
    u0, u1 = max(int(np.floor(min(us))), 0), min(int(np.ceil(max(us))) + 1, w)
    v0, v1 = max(int(np.floor(min(vs))), 0), min(int(np.ceil(max(vs))) + 1, h)
    return u0, u1, v0, v1


def render_depth(hand: HandGeometry, intr: Intrinsics, width: int, height: int):
    """Z-buffer of the nearest primitive hit per pixel.

    Returns ``(depth, prim)``: depth in mm (``BACKGROUND_MM`` where nothing
    is hit) and the index of the winning primitive (-1 for background,
    0 for the palm, ``1 + i`` for capsule ``i``).
    """
    zbuf = np.full((height, width), np.inf)
    prim = np.full((height, width), -1, dtype=np.int64)
    bound = float(PALM_AXES.max())
    items = [(hand.palm_center, bound, lambda rd: ray_ellipsoid(rd, hand.palm_center, hand.palm_rot, PALM_AXES))]
    for a, b, r, _ in hand.capsules:
        items.append(((a + b) / 2, np.linalg.norm(b - a) / 2 + r,
                      lambda rd, a=a, b=b, r=r: ray_capsule(rd, a, b, r)))
    for pid, (center, radius, hit) in enumerate(items):
        u0, u1, v0, v1 = _bbox(center, radius, intr, width, height)
        if u0 >= u1 or v0 >= v1:
            continue
        vv, uu = np.mgrid[v0:v1, u0:u1]
        rd = _rays(uu.astype(np.float64), vv.astype(np.float64), intr)
        z = hit(rd) * rd[..., 2]
        sub = zbuf[v0:v1, u0:u1]
        closer = z < sub
        sub[closer] = z[closer]
        prim[v0:v1, u0:u1][closer] = pid
    depth = np.where(np.isfinite(zbuf), zbuf, BACKGROUND_MM)
    return depth, prim


def discontinuity_mask(depth: np.ndarray, jump: float = 20.0) -> np.ndarray:
    m = np.zeros(depth.shape, dtype=bool)
    dy = np.abs(np.diff(depth, axis=0)) > jump
    dx = np.abs(np.diff(depth, axis=1)) > jump
    m[:-1] |= dy
    m[1:] |= dy
    m[:, :-1] |= dx
    m[:, 1:] |= dx
    return m


@dataclass
class SynthSample:
    frame: DepthFrame
    pose: np.ndarray           # annotated pose, mm (label noise applied)
    true_pose: np.ndarray      # noise-free pose, mm
    latent: np.ndarray
    centroid: np.ndarray       # mean 3D surface point of the rendered, non-hole hand pixels
    visible: np.ndarray        # [J] joint's own surface is what its pixel shows


def render_sample(cfg: SynthConfig, rng: np.random.Generator, index: int = 0) -> SynthSample:
    z = rng.uniform(-1.0, 1.0, cfg.latent_dim)
    lat = rng.uniform(-cfg.lateral_range, cfg.lateral_range, 2)
    tz = rng.uniform(*cfg.depth_range)
    hand = pose_hand(angles_from_latent(z), np.array([lat[0], lat[1], tz]))
    intr = cfg.intrinsics
    depth, prim = render_depth(hand, intr, cfg.width, cfg.height)

    if cfg.hole_prob > 0:
        cand = discontinuity_mask(depth) & (prim >= 0)
        holes = cand & (rng.random(depth.shape) < cfg.hole_prob)
        depth[holes] = 0.0
        prim[holes] = -2
    depth = depth.astype(np.float32)

    hand_px = prim >= 0
    vv, uu = np.nonzero(hand_px)
    rd = _rays(uu.astype(np.float64), vv.astype(np.float64), intr)
    pts = rd * (depth[vv, uu].astype(np.float64) / rd[:, 2])[:, None]
    centroid = pts.mean(axis=0) if len(pts) else np.full(3, np.nan)

    visible = np.zeros(NUM_JOINTS, dtype=bool)
    uv = np.rint(intr.project(hand.joints)).astype(int)
    radii = joint_radii()
    for j, (u, v) in enumerate(uv):
        if 0 <= u < cfg.width and 0 <= v < cfg.height and prim[v, u] >= 0:
            ray = _rays(np.array(float(u)), np.array(float(v)), intr)
            p = ray * (float(depth[v, u]) / ray[2])
            visible[j] = np.linalg.norm(p - hand.joints[j]) <= radii[j] + 0.5

    pose = hand.joints.copy()
    if cfg.label_noise > 0:
        pose = pose + rng.normal(0.0, cfg.label_noise, pose.shape)
    frame = DepthFrame(depth=depth, intrinsics=intr, frame_id=f"synth_{cfg.seed}_{index:06d}")
    return SynthSample(frame, pose, hand.joints, z, centroid, visible)


def render_dataset(cfg: SynthConfig):
    """Yield ``cfg.n_samples`` samples; the stream depends only on ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    for i in range(cfg.n_samples):
        yield render_sample(cfg, rng, i)


def synth_generate(cfg: SynthConfig, out_dir) -> None:
    """Render ``cfg`` and write it as an on-disk dataset."""
    from .data import write_dataset

    samples = list(render_dataset(cfg))
    write_dataset(out_dir, [s.frame for s in samples], [s.pose for s in samples],
                  cfg.intrinsics, JOINT_NAMES)
