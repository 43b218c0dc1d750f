"""Synthetic stereo scenes, sequences, and datasets with exact ground truth.

The world is a textured ground plane (procedural value noise, evaluable at
any real coordinate) with a few raised blocks. A nadir stereo camera with
planar pose (x, y, yaw) ray-casts both views, which yields per-pixel true
disparity for free. Relative motions are exactly planar, so every sample's
ground-truth pose is representable as (alpha, beta, gamma) in the camera
frame. Photometric conditions (gain, bias, gamma, vignette, noise) are
applied after geometry, emulating a day's lighting sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import storage
from .errors import InvalidViewpoint
from .geometry import CameraIntrinsics, PlanarPose, wrap_angle

# ---------------------------------------------------------------------------
# photometric conditions


@dataclass(frozen=True)
class PhotometricParams:
    gain: float = 1.0
    bias: float = 0.0
    gamma: float = 1.0
    vignette: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.gain <= 0 or self.gamma <= 0 or self.sigma < 0:
            raise ValueError("need gain > 0, gamma > 0, sigma >= 0")


# Named conditions emulating an hourly lighting sweep, mildest to harshest.
CONDITIONS: dict[str, PhotometricParams] = {
    "identity": PhotometricParams(),
    "dawn": PhotometricParams(gain=0.4, bias=0.02, gamma=1.1, vignette=0.4, sigma=0.03),
    "morning": PhotometricParams(gain=0.8, bias=0.02, gamma=1.05, vignette=0.15, sigma=0.015),
    "noon": PhotometricParams(gain=1.0, bias=0.0, gamma=1.0, vignette=0.0, sigma=0.01),
    "afternoon": PhotometricParams(gain=0.9, bias=0.01, gamma=0.95, vignette=0.1, sigma=0.012),
    "dusk": PhotometricParams(gain=0.5, bias=0.03, gamma=0.9, vignette=0.3, sigma=0.025),
    "evening": PhotometricParams(gain=0.25, bias=0.01, gamma=1.0, vignette=0.5, sigma=0.04),
    "night": PhotometricParams(gain=0.15, bias=0.0, gamma=1.0, vignette=0.6, sigma=0.05),
    "midnight": PhotometricParams(gain=0.12, bias=0.0, gamma=1.0, vignette=0.65, sigma=0.055),
}

# The 8-condition day sweep (excludes the diagnostic "identity" entry).
DAY_SCHEDULE = (
    "dawn", "morning", "noon", "afternoon", "dusk", "evening", "night", "midnight",
)


# ---------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class SceneParams:
    n_blocks: int = 5
    block_extent: float = 0.8  # blocks centered within +-extent in x, scaled in y
    block_size: tuple[float, float] = (0.15, 0.45)
    block_height: tuple[float, float] = (0.1, 0.4)
    camera_height: float = 2.0
    texture_octaves: int = 4
    texture_base_freq: float = 3.0
    texture_contrast: float = 1.6


@dataclass(frozen=True)
class Scene:
    seed: int
    params: SceneParams
    blocks: np.ndarray  # (k, 6): x0, x1, y0, y1, height, albedo

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=float)
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> Scene:
    rng = np.random.default_rng([int(seed), 1])
    blocks = []
    for _ in range(params.n_blocks):
        cx = rng.uniform(-params.block_extent, params.block_extent)
        cy = rng.uniform(-0.7 * params.block_extent, 0.7 * params.block_extent)
        sx = rng.uniform(*params.block_size)
        sy = rng.uniform(*params.block_size)
        h = rng.uniform(*params.block_height)
        albedo = rng.uniform(0.6, 1.3)
        blocks.append([cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2, h, albedo])
    return Scene(int(seed), params, np.array(blocks).reshape(params.n_blocks, 6))


def _hash01(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic lattice noise in [0, 1) from integer coordinates."""
    salt_mix = (int(salt) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        ^ iy.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
        ^ np.uint64(salt_mix)
    )
    h ^= h >> np.uint64(31)
    h *= np.uint64(0xD6E8FEB86659FD93)
    h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(float) / float(1 << 53)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def texture(scene: Scene, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Procedural albedo in (0, 1), defined on the whole plane."""
    p = scene.params
    total = np.zeros_like(np.asarray(x, dtype=float))
    amp_sum = 0.0
    for o in range(p.texture_octaves):
        freq = p.texture_base_freq * (2.0**o)
        amp = 0.5**o
        fx = np.asarray(x, dtype=float) * freq
        fy = np.asarray(y, dtype=float) * freq
        ix = np.floor(fx).astype(np.int64)
        iy = np.floor(fy).astype(np.int64)
        tx = _smoothstep(fx - ix)
        ty = _smoothstep(fy - iy)
        salt = scene.seed * 1000003 + o * 7919
        v00 = _hash01(ix, iy, salt)
        v10 = _hash01(ix + 1, iy, salt)
        v01 = _hash01(ix, iy + 1, salt)
        v11 = _hash01(ix + 1, iy + 1, salt)
        total += amp * ((v00 * (1 - tx) + v10 * tx) * (1 - ty)
                        + (v01 * (1 - tx) + v11 * tx) * ty)
        amp_sum += amp
    norm = total / amp_sum
    return np.clip(0.5 + p.texture_contrast * (norm - 0.5), 0.02, 0.98)


# ---------------------------------------------------------------------------
# camera motion helpers (nadir rig, planar world poses (x, y, yaw))


def _cam_axes(yaw: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c, s = math.cos(yaw), math.sin(yaw)
    return (
        np.array([c, s, 0.0]),
        np.array([s, -c, 0.0]),
        np.array([0.0, 0.0, -1.0]),
    )


def relative_planar(source_pose, target_pose) -> PlanarPose:
    """Camera-frame relative pose mapping source-frame points into the
    target frame, for two planar world poses (x, y, yaw)."""
    sx, sy, syaw = source_pose
    tx, ty, tyaw = target_pose
    dx, dy = sx - tx, sy - ty
    c, s = math.cos(tyaw), math.sin(tyaw)
    return PlanarPose(c * dx + s * dy, s * dx - c * dy, wrap_angle(tyaw - syaw))


def solve_target_pose(source_pose, pp: PlanarPose) -> np.ndarray:
    """World pose of the target camera given the source pose and the desired
    camera-frame relative pose."""
    sx, sy, syaw = source_pose
    tyaw = wrap_angle(syaw + pp.gamma)
    x_c, y_c, _ = _cam_axes(tyaw)
    shift = pp.alpha * x_c + pp.beta * y_c
    return np.array([sx - shift[0], sy - shift[1], tyaw])


def solve_source_pose(target_pose, pp: PlanarPose) -> np.ndarray:
    """World pose of the source camera given the target pose and the desired
    camera-frame relative pose."""
    tx, ty, tyaw = target_pose
    x_c, y_c, _ = _cam_axes(tyaw)
    shift = pp.alpha * x_c + pp.beta * y_c
    return np.array([tx + shift[0], ty + shift[1], wrap_angle(tyaw - pp.gamma)])


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    f = 0.9375 * width
    return CameraIntrinsics(fu=f, fv=f, cu=(width - 1) / 2, cv=(height - 1) / 2, b=0.3)


# ---------------------------------------------------------------------------
# rendering


@dataclass
class StereoFrame:
    """Rectified pair plus ground-truth disparity and (optional) world pose."""

    left: np.ndarray
    right: np.ndarray
    disparity: np.ndarray | None = None
    pose: np.ndarray | None = None  # world (x, y, yaw)
    condition: str | None = None


def cast_rays(
    scene: Scene,
    pose,
    K: CameraIntrinsics,
    uv: np.ndarray,
    right: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intersect pixel rays with the scene.

    Returns (intensity, depth, hit_points). `uv` is (M, 2) sub-pixel image
    coordinates; depth is camera-frame z. The right camera sits one baseline
    along the camera x-axis.
    """
    x, y, yaw = float(pose[0]), float(pose[1]), float(pose[2])
    h_cam = scene.params.camera_height
    if scene.blocks.size and h_cam <= scene.blocks[:, 4].max():
        raise InvalidViewpoint("camera at or below the tallest block")
    x_c, y_c, z_c = _cam_axes(yaw)
    origin = np.array([x, y, h_cam])
    if right:
        origin = origin + K.b * x_c

    uv = np.asarray(uv, dtype=float)
    du = (uv[:, 0] - K.cu) / K.fu
    dv = (uv[:, 1] - K.cv) / K.fv
    dirs = du[:, None] * x_c + dv[:, None] * y_c + z_c  # camera z-component is 1

    # ground plane z=0: depth equals camera height for every ray
    t_best = np.full(len(uv), h_cam)
    albedo = np.ones(len(uv))

    with np.errstate(divide="ignore", invalid="ignore"):
        for x0, x1, y0, y1, bh, alb in scene.blocks:
            tx1 = (x0 - origin[0]) / dirs[:, 0]
            tx2 = (x1 - origin[0]) / dirs[:, 0]
            ty1 = (y0 - origin[1]) / dirs[:, 1]
            ty2 = (y1 - origin[1]) / dirs[:, 1]
            tz_near = h_cam - bh  # top plane (dirs z = -1)
            t_near = np.maximum(np.minimum(tx1, tx2), np.minimum(ty1, ty2))
            t_near = np.maximum(t_near, tz_near)
            t_far = np.minimum(np.maximum(tx1, tx2), np.maximum(ty1, ty2))
            t_far = np.minimum(t_far, h_cam)
            hit = (t_near <= t_far) & (t_near > 0) & (t_near < t_best)
            t_best = np.where(hit, t_near, t_best)
            albedo = np.where(hit, alb, albedo)

    hits = origin + t_best[:, None] * dirs
    intensity = texture(scene, hits[:, 0], hits[:, 1]) * albedo
    return intensity, t_best, hits


def apply_photometrics(
    img: np.ndarray, photo: PhotometricParams, rng: np.random.Generator
) -> np.ndarray:
    """Sensor model applied after geometry: response curve, gain, vignette,
    bias, then additive noise."""
    h, w = img.shape
    out = np.power(np.clip(img, 0.0, None), photo.gamma)
    if photo.vignette > 0.0:
        vu = (np.arange(w) - (w - 1) / 2) / ((w - 1) / 2)
        vv = (np.arange(h) - (h - 1) / 2) / ((h - 1) / 2)
        rho2 = (vu[None, :] ** 2 + vv[:, None] ** 2) / 2.0
        out = out * (1.0 - photo.vignette * rho2)
    out = photo.gain * out + photo.bias
    if photo.sigma > 0.0:
        out = out + photo.sigma * rng.standard_normal((h, w))
    return out


def render_stereo(
    scene: Scene,
    pose,
    K: CameraIntrinsics,
    photo: PhotometricParams = CONDITIONS["identity"],
    size: tuple[int, int] = (48, 64),
    noise_seed: int = 0,
    condition: str | None = None,
) -> StereoFrame:
    """Render a rectified pair with per-pixel true disparity.

    Photometrics never touch geometry: the disparity map is identical across
    conditions. Noise is seeded, so identical arguments render identical
    frames.
    """
    h, w = size
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    uv = np.stack([us.ravel(), vs.ravel()], axis=1)
    left_i, depth, _ = cast_rays(scene, pose, K, uv, right=False)
    right_i, _, _ = cast_rays(scene, pose, K, uv, right=True)
    disparity = (K.fu * K.b / depth).reshape(h, w)
    rng = np.random.default_rng([int(noise_seed), 2])
    left = apply_photometrics(left_i.reshape(h, w), photo, rng)
    right = apply_photometrics(right_i.reshape(h, w), photo, rng)
    return StereoFrame(left, right, disparity, np.asarray(pose, float), condition)


# ---------------------------------------------------------------------------
# block-matching fallback for disparity


def block_match_disparity(
    left: np.ndarray,
    right: np.ndarray,
    window: int = 5,
    max_disparity: int = 16,
    variance_floor: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Integer-disparity SAD block matching on a rectified pair.

    Returns (disparity, valid). Pixels are invalid at the borders, where the
    window's texture variance is below the floor, or where the search range
    is cut off by the image edge.
    """
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    h, w = left.shape
    half = window // 2

    def box_sum(img):
        c = np.cumsum(np.cumsum(np.pad(img, ((1, 0), (1, 0))), axis=0), axis=1)
        k = window
        return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]

    # Columns with no right-image data under a shift get a huge (finite)
    # penalty, so contaminated windows never beat a real candidate.
    best_cost = np.full((h - 2 * half, w - 2 * half), np.inf)
    best_d = np.zeros_like(best_cost, dtype=int)
    for d in range(max_disparity + 1):
        shifted = np.full_like(right, 1e6)
        if d == 0:
            shifted = right
        else:
            shifted[:, d:] = right[:, :-d]
        cost = box_sum(np.abs(left - shifted))
        better = cost < best_cost
        best_cost = np.where(better, cost, best_cost)
        best_d = np.where(better, d, best_d)

    disparity = np.zeros((h, w))
    disparity[half : h - half, half : w - half] = best_d
    valid = np.zeros((h, w), dtype=bool)
    valid[half : h - half, half : w - half] = True

    mu = box_sum(left) / (window * window)
    var = box_sum(left * left) / (window * window) - mu * mu
    valid[half : h - half, half : w - half] &= var > variance_floor
    # search must not run off the left edge
    us = np.arange(w)[None, :]
    valid &= (us - disparity) >= half
    return disparity, valid


# ---------------------------------------------------------------------------
# paths and sequences


@dataclass(frozen=True)
class MotionBounds:
    alpha: float = 0.5
    beta: float = 0.2
    gamma: float = math.radians(10.0)


def path_poses(n: int, span: float = 0.55, sway: float = 0.25) -> np.ndarray:
    """A gentle deterministic S-curve across the scene: (n, 3) world poses."""
    t = np.linspace(-1.0, 1.0, n)
    x = span * t
    y = 0.5 * sway * np.sin(1.5 * np.pi * t)
    yaw = 0.25 * np.sin(2.0 * t)
    return np.stack([x, y, yaw], axis=1)


def offset_poses(
    poses: np.ndarray, seed: int, alpha: float = 0.05, beta: float = 0.05,
    gamma: float = math.radians(2.0),
) -> tuple[np.ndarray, list[PlanarPose]]:
    """Perturb a taught path the way a tracking robot would: each live pose
    sits at a small camera-frame offset from its vertex."""
    rng = np.random.default_rng([int(seed), 3])
    out = []
    offs = []
    for pose in poses:
        pp = PlanarPose(
            rng.uniform(-alpha, alpha),
            rng.uniform(-beta, beta),
            rng.uniform(-gamma, gamma),
        )
        out.append(solve_source_pose(pose, pp))
        offs.append(pp)
    return np.stack(out), offs


def render_sequence(
    scene: Scene,
    poses: np.ndarray,
    condition: str,
    K: CameraIntrinsics,
    size: tuple[int, int],
    seed: int,
) -> list[StereoFrame]:
    photo = CONDITIONS[condition]
    frames = []
    for i, pose in enumerate(poses):
        frames.append(
            render_stereo(scene, pose, K, photo, size,
                          noise_seed=seed * 100003 + i, condition=condition)
        )
    return frames


# ---------------------------------------------------------------------------
# dataset and sequence persistence


@dataclass
class Sample:
    source: StereoFrame
    target: StereoFrame
    gt: PlanarPose


def _frame_blob(frame: StereoFrame) -> np.ndarray:
    return np.concatenate(
        [frame.left.ravel(), frame.right.ravel(), frame.disparity.ravel()]
    )


def _frame_from_blob(blob: np.ndarray, h: int, w: int, pose, condition) -> StereoFrame:
    n = h * w
    return StereoFrame(
        blob[:n].reshape(h, w),
        blob[n : 2 * n].reshape(h, w),
        blob[2 * n :].reshape(h, w),
        np.asarray(pose, float) if pose is not None else None,
        condition,
    )


def _camera_dict(K: CameraIntrinsics) -> dict:
    return {"fu": K.fu, "fv": K.fv, "cu": K.cu, "cv": K.cv, "b": K.b}


def camera_from_dict(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(d["fu"], d["fv"], d["cu"], d["cv"], d["b"])


def make_dataset(
    out_dir: str | Path,
    scene: Scene,
    count: int,
    seed: int,
    size: tuple[int, int] = (48, 64),
    motion: MotionBounds = MotionBounds(),
    schedule: tuple[str, ...] = DAY_SCHEDULE,
    source_extent: tuple[float, float] = (0.5, 0.35),
) -> Path:
    """Write `count` training pairs: random source placements, bounded planar
    relative motions, and source/target conditions drawn from the schedule."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out_dir = Path(out_dir)
    h, w = size
    K = default_intrinsics(w, h)
    rng = np.random.default_rng([int(seed), 4])
    samples = []
    for i in range(count):
        src_pose = np.array([
            rng.uniform(-source_extent[0], source_extent[0]),
            rng.uniform(-source_extent[1], source_extent[1]),
            rng.uniform(-math.pi, math.pi),
        ])
        pp = PlanarPose(
            rng.uniform(-motion.alpha, motion.alpha),
            rng.uniform(-motion.beta, motion.beta),
            rng.uniform(-motion.gamma, motion.gamma),
        )
        tgt_pose = solve_target_pose(src_pose, pp)
        src_cond = schedule[int(rng.integers(len(schedule)))]
        tgt_cond = schedule[int(rng.integers(len(schedule)))]
        src = render_stereo(scene, src_pose, K, CONDITIONS[src_cond], size,
                            noise_seed=seed * 1000003 + 2 * i, condition=src_cond)
        tgt = render_stereo(scene, tgt_pose, K, CONDITIONS[tgt_cond], size,
                            noise_seed=seed * 1000003 + 2 * i + 1, condition=tgt_cond)
        fname = f"sample_{i:05d}.f32"
        storage.write_blob(out_dir / fname, np.concatenate([_frame_blob(src), _frame_blob(tgt)]))
        samples.append({
            "file": fname,
            "pose": [pp.alpha, pp.beta, pp.gamma],
            "src_pose": src_pose.tolist(),
            "tgt_pose": tgt_pose.tolist(),
            "src_condition": src_cond,
            "tgt_condition": tgt_cond,
        })
    storage.write_manifest(out_dir, {
        "kind": "pairs",
        "seed": int(seed),
        "scene_seed": scene.seed,
        "image_size": [h, w],
        "camera": _camera_dict(K),
        "motion_bounds": asdict(motion),
        "schedule": list(schedule),
        "samples": samples,
    })
    return out_dir


def load_dataset(directory: str | Path) -> tuple[list[Sample], dict]:
    directory = Path(directory)
    manifest = storage.read_manifest(directory)
    if manifest.get("kind") != "pairs":
        raise ValueError(f"{directory} is not a pairs dataset")
    h, w = manifest["image_size"]
    n = h * w
    samples = []
    for entry in manifest["samples"]:
        blob = storage.read_blob(directory / entry["file"], (6 * n,))
        src = _frame_from_blob(blob[: 3 * n], h, w, entry["src_pose"], entry["src_condition"])
        tgt = _frame_from_blob(blob[3 * n :], h, w, entry["tgt_pose"], entry["tgt_condition"])
        samples.append(Sample(src, tgt, PlanarPose(*entry["pose"])))
    return samples, manifest


def save_sequence(
    out_dir: str | Path, frames: list[StereoFrame], K: CameraIntrinsics,
    condition: str, seed: int, extra: dict | None = None,
) -> Path:
    out_dir = Path(out_dir)
    entries = []
    for i, frame in enumerate(frames):
        fname = f"frame_{i:05d}.f32"
        storage.write_blob(out_dir / fname, _frame_blob(frame))
        entries.append({"file": fname, "pose": frame.pose.tolist()})
    h, w = frames[0].left.shape
    manifest = {
        "kind": "sequence",
        "condition": condition,
        "seed": int(seed),
        "image_size": [h, w],
        "camera": _camera_dict(K),
        "frames": entries,
    }
    if extra:
        manifest["extra"] = extra
    storage.write_manifest(out_dir, manifest)
    return out_dir


def load_sequence(directory: str | Path) -> tuple[list[StereoFrame], dict]:
    directory = Path(directory)
    manifest = storage.read_manifest(directory)
    if manifest.get("kind") != "sequence":
        raise ValueError(f"{directory} is not a sequence")
    h, w = manifest["image_size"]
    frames = []
    for entry in manifest["frames"]:
        blob = storage.read_blob(directory / entry["file"], (3 * h * w,))
        frames.append(
            _frame_from_blob(blob, h, w, entry["pose"], manifest.get("condition"))
        )
    return frames, manifest
