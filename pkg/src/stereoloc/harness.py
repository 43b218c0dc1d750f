"""Desk-scale teach-and-repeat evaluation.

Teaching runs the extractor over a driven sequence and stores one map
vertex per frame (keypoints, descriptors, scores, 3D lifts, and the frame
itself so dense maps can be rebuilt). Repeating localizes each live frame
against its nearest-by-ground-truth vertex, with the standard failure
rule: a frame fails when RANSAC errors out or the inlier count drops below
the threshold (default 20).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import estimator, features, matching, storage, synth
from .autodiff import Tape
from .errors import (
    DegenerateGeometry,
    InsufficientMatches,
    LocalizationFailure,
    StereolocError,
    TeachFailure,
)
from .geometry import (
    MIN_DISPARITY,
    CameraIntrinsics,
    PlanarPose,
    SE3Pose,
    backproject_points,
    se3_to_planar,
    wrap_angle,
)
from .synth import StereoFrame


@dataclass
class LearnedExtractor:
    weights: features.ExtractorWeights

    @property
    def window(self) -> int:
        return self.weights.config.window

    @property
    def ident(self) -> str:
        return f"learned-{self.weights.config.seed}"

    def features_on(self, tape: Tape, image: np.ndarray) -> features.DenseFeatureMap:
        params = self.weights.bind(tape, trainable=False)
        return features.forward(image, params, self.weights.config, tape)


@dataclass
class AnalyticExtractor:
    window: int = 8

    @property
    def ident(self) -> str:
        return "analytic"

    def features_on(self, tape: Tape, image: np.ndarray) -> features.DenseFeatureMap:
        return features.analytic_features(image, tape)


@dataclass
class MapVertex:
    frame_id: int
    world_pose: np.ndarray  # taught (x, y, yaw)
    coords: np.ndarray  # (N, 2)
    descriptors: np.ndarray  # (N, D)
    scores: np.ndarray  # (N,)
    points3d: np.ndarray  # (N, 3) camera-frame lifts
    frame: StereoFrame
    dense: tuple | None = None  # (extractor ident, desc, scores, disparity)


@dataclass
class TeachMap:
    vertices: list[MapVertex]
    K: CameraIntrinsics
    window: int
    extractor_ident: str


# Inference wants a much sharper softmax than training: the training
# temperature keeps gradients alive across the whole image, while
# localization only cares about the peak.
DEFAULT_LOCALIZE_TAU = 400.0


@dataclass(frozen=True)
class LocalizeParams:
    ransac: estimator.RansacParams = estimator.RansacParams()
    tau: float = DEFAULT_LOCALIZE_TAU
    mode: str = "dense"  # or "sparse"
    failure_inliers: int = 20
    stride: int = 1
    disparity: str = "gt"  # or "block"


@dataclass
class LocalizationResult:
    pose: SE3Pose | None
    planar: PlanarPose | None
    inliers: int
    failure: bool
    timing: float


@dataclass
class RunReport:
    results: list[LocalizationResult]
    gt_offsets: list[PlanarPose]
    mean_inliers: float
    failure_count: int
    failure_fraction: float
    pose_rmse: float  # planar translation RMSE over non-failed frames
    heading_rmse: float


def _frame_disparity(frame: StereoFrame, source: str) -> tuple[np.ndarray, np.ndarray]:
    if source == "gt":
        if frame.disparity is None:
            raise StereolocError("frame carries no ground-truth disparity")
        return frame.disparity, np.ones_like(frame.disparity, dtype=bool)
    if source == "block":
        return synth.block_match_disparity(frame.left, frame.right)
    raise ValueError(f"unknown disparity source {source!r}")


def _keypoints_numpy(extractor, frame: StereoFrame, disparity_source: str):
    """Extract keypoints and their 3D lifts as plain arrays."""
    tape = Tape()
    fmap = extractor.features_on(tape, frame.left)
    kps = features.extract_keypoints(fmap, extractor.window)
    coords = kps.coords.value
    desc = kps.descriptors.value
    scores = kps.scores.value

    dmap, valid = _frame_disparity(frame, disparity_source)
    nearest = np.clip(np.rint(coords).astype(int), 0, None)
    nearest[:, 0] = np.minimum(nearest[:, 0], dmap.shape[1] - 1)
    nearest[:, 1] = np.minimum(nearest[:, 1], dmap.shape[0] - 1)
    d = dmap[nearest[:, 1], nearest[:, 0]]
    ok = valid[nearest[:, 1], nearest[:, 0]] & (d > MIN_DISPARITY)
    return coords, desc, scores, d, ok


def teach(
    frames: list[StereoFrame],
    extractor,
    K: CameraIntrinsics,
    disparity_source: str = "gt",
) -> TeachMap:
    """Build one map vertex per taught frame."""
    if not frames:
        raise TeachFailure("empty teach sequence")
    vertices = []
    for i, frame in enumerate(frames):
        coords, desc, scores, d, ok = _keypoints_numpy(
            extractor, frame, disparity_source
        )
        if int(ok.sum()) < 3:
            raise TeachFailure(f"frame {i}: only {int(ok.sum())} usable keypoints")
        obs = np.concatenate([coords[ok], d[ok, None]], axis=1)
        p3d = backproject_points(obs, K)
        vertices.append(
            MapVertex(i, np.asarray(frame.pose, float), coords[ok], desc[ok],
                      scores[ok], p3d, frame)
        )
    return TeachMap(vertices, K, extractor.window, extractor.ident)


def _vertex_dense(vertex: MapVertex, extractor) -> tuple[np.ndarray, np.ndarray]:
    """Dense descriptor and score maps for a vertex, cached per extractor."""
    if vertex.dense is None or vertex.dense[0] != extractor.ident:
        tape = Tape()
        fmap = extractor.features_on(tape, vertex.frame.left)
        vertex.dense = (
            extractor.ident,
            fmap.descriptors.value.copy(),
            fmap.scores.value.copy(),
        )
    return vertex.dense[1], vertex.dense[2]


def localize(
    frame: StereoFrame,
    vertex: MapVertex,
    extractor,
    params: LocalizeParams,
    K: CameraIntrinsics,
) -> LocalizationResult:
    """Estimate the live frame's pose relative to one map vertex.

    Dense mode soft-matches live keypoints into the vertex's dense feature
    map; sparse mode uses mutual-best ZNCC between the two keypoint sets.
    Estimation failures surface as the failure flag, not exceptions.
    """
    start = time.perf_counter()
    coords, desc, scores, d, ok = _keypoints_numpy(extractor, frame, params.disparity)
    coords, desc, scores, d = coords[ok], desc[ok], scores[ok], d[ok]

    inliers = 0
    pose = None
    try:
        if len(coords) < 3:
            raise InsufficientMatches(f"only {len(coords)} usable live keypoints")
        p_live = backproject_points(
            np.concatenate([coords, d[:, None]], axis=1), K
        )
        if params.mode == "dense":
            p_s, p_t, w = _dense_pairs(
                vertex, extractor, coords, desc, scores, p_live, params, K
            )
        elif params.mode == "sparse":
            p_s, p_t, w = _sparse_pairs(vertex, desc, scores, p_live)
        else:
            raise ValueError(f"unknown mode {params.mode!r}")
        se3, mask = estimator.ransac_pose(p_s, p_t, w, params.ransac)
        inliers = int(mask.sum())
        pose = se3
    except (InsufficientMatches, LocalizationFailure, DegenerateGeometry):
        pose = None

    failure = pose is None or inliers < params.failure_inliers
    return LocalizationResult(
        pose=pose,
        planar=se3_to_planar(pose) if pose is not None else None,
        inliers=inliers,
        failure=failure,
        timing=time.perf_counter() - start,
    )


def _dense_pairs(vertex, extractor, coords, desc, scores, p_live, params, K):
    """Live keypoints soft-matched into the vertex's dense map, then lifted
    through the vertex's disparity."""
    dense_desc, dense_scores = _vertex_dense(vertex, extractor)
    tape = Tape()
    fmap = features.DenseFeatureMap(
        tape.constant(dense_desc),
        tape.constant(dense_scores),
        tape.constant(np.zeros_like(dense_scores)),
    )
    kps = features.KeypointSet(
        tape.constant(coords), tape.constant(desc), tape.constant(scores)
    )
    m = matching.match_all(kps, fmap, tau=params.tau, stride=params.stride)
    pts = m.target_points.value
    weights = m.weights.value

    vd, valid = _frame_disparity(vertex.frame, params.disparity)
    nearest = np.rint(pts).astype(int)
    nearest[:, 0] = np.clip(nearest[:, 0], 0, vd.shape[1] - 1)
    nearest[:, 1] = np.clip(nearest[:, 1], 0, vd.shape[0] - 1)
    d_t = vd[nearest[:, 1], nearest[:, 0]]
    ok = valid[nearest[:, 1], nearest[:, 0]] & (d_t > MIN_DISPARITY)
    if int(ok.sum()) < 3:
        raise InsufficientMatches("too few matches with valid disparity")
    p_t = backproject_points(
        np.concatenate([pts[ok], d_t[ok, None]], axis=1), K
    )
    return p_live[ok], p_t, weights[ok]


def _sparse_pairs(vertex, desc, scores, p_live):
    """Mutual-best ZNCC pairs against the vertex's sparse keypoints."""
    pairs = matching.mutual_best_matches(desc, vertex.descriptors)
    if len(pairs) < 3:
        raise InsufficientMatches(f"only {len(pairs)} mutual matches")
    ai = np.array([i for i, _ in pairs])
    bj = np.array([j for _, j in pairs])
    corr = np.array(
        [matching.zncc(desc[i], vertex.descriptors[j]) for i, j in pairs]
    )
    w = 0.5 * (corr + 1.0) * scores[ai] * vertex.scores[bj]
    return p_live[ai], vertex.points3d[bj], w


def nearest_vertex(teach_map: TeachMap, world_pose) -> MapVertex:
    """Association by ground-truth path position (stand-in for VO priors)."""
    poses = np.stack([v.world_pose[:2] for v in teach_map.vertices])
    i = int(np.argmin(((poses - np.asarray(world_pose)[:2]) ** 2).sum(axis=1)))
    return teach_map.vertices[i]


def repeat(
    frames: list[StereoFrame],
    teach_map: TeachMap,
    extractor,
    params: LocalizeParams,
    K: CameraIntrinsics,
) -> RunReport:
    """Localize every live frame against its nearest vertex and aggregate."""
    results = []
    offsets = []
    for frame in frames:
        vertex = nearest_vertex(teach_map, frame.pose)
        offsets.append(synth.relative_planar(frame.pose, vertex.world_pose))
        results.append(localize(frame, vertex, extractor, params, K))

    failures = [r for r in results if r.failure]
    ok_pairs = [
        (r.planar, gt) for r, gt in zip(results, offsets) if not r.failure
    ]
    if ok_pairs:
        trans_sq = [
            (p.alpha - gt.alpha) ** 2 + (p.beta - gt.beta) ** 2 for p, gt in ok_pairs
        ]
        head_sq = [wrap_angle(p.gamma - gt.gamma) ** 2 for p, gt in ok_pairs]
        pose_rmse = math.sqrt(float(np.mean(trans_sq)))
        heading_rmse = math.sqrt(float(np.mean(head_sq)))
    else:
        pose_rmse = math.nan
        heading_rmse = math.nan
    return RunReport(
        results=results,
        gt_offsets=offsets,
        mean_inliers=float(np.mean([r.inliers for r in results])),
        failure_count=len(failures),
        failure_fraction=len(failures) / len(results),
        pose_rmse=pose_rmse,
        heading_rmse=heading_rmse,
    )


# ---------------------------------------------------------------------------
# reporting

RUN_CSV_FIELDS = ["frame", "inliers", "failure", "pose_error", "heading_error"]


def write_run_csv(report: RunReport, path: str | Path) -> None:
    """Per-frame rows; aggregates in RunReport are all recomputable from
    these columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RUN_CSV_FIELDS)
        for i, (r, gt) in enumerate(zip(report.results, report.gt_offsets)):
            if r.failure or r.planar is None:
                pose_err = math.nan
                head_err = math.nan
            else:
                pose_err = math.hypot(r.planar.alpha - gt.alpha, r.planar.beta - gt.beta)
                head_err = abs(wrap_angle(r.planar.gamma - gt.gamma))
            writer.writerow([i, r.inliers, int(r.failure), repr(pose_err), repr(head_err)])


def read_run_csv(path: str | Path) -> dict:
    """Parse a run CSV back into its aggregate statistics."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            rows.append(row)
    inliers = np.array([int(r["inliers"]) for r in rows])
    failures = np.array([int(r["failure"]) for r in rows], dtype=bool)
    pose_err = np.array([float(r["pose_error"]) for r in rows])
    head_err = np.array([float(r["heading_error"]) for r in rows])
    ok = ~failures
    return {
        "mean_inliers": float(inliers.mean()),
        "failure_count": int(failures.sum()),
        "failure_fraction": float(failures.mean()),
        "pose_rmse": float(np.sqrt(np.mean(pose_err[ok] ** 2))) if ok.any() else math.nan,
        "heading_rmse": float(np.sqrt(np.mean(head_err[ok] ** 2))) if ok.any() else math.nan,
    }


@dataclass
class RunRecord:
    name: str
    teach_condition: str
    repeat_condition: str
    report: RunReport


def emit_report(records: list[RunRecord], out_dir: str | Path) -> list[Path]:
    """Write one per-run CSV per record plus a square condition matrix
    (teach conditions as rows, repeat conditions as columns, mean inliers
    as entries)."""
    if not records:
        raise ValueError("no runs to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        path = out_dir / f"run_{rec.name}.csv"
        write_run_csv(rec.report, path)
        written.append(path)

    teach_conds = sorted({r.teach_condition for r in records})
    repeat_conds = sorted({r.repeat_condition for r in records})
    if teach_conds and repeat_conds:
        by_pair = {
            (r.teach_condition, r.repeat_condition): r.report.mean_inliers
            for r in records
        }
        matrix_path = out_dir / "condition_matrix.csv"
        with open(matrix_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["teach\\repeat"] + repeat_conds)
            for tc in teach_conds:
                row = [tc] + [
                    repr(by_pair.get((tc, rc), math.nan)) for rc in repeat_conds
                ]
                writer.writerow(row)
        written.append(matrix_path)
    return written


# ---------------------------------------------------------------------------
# map persistence


def save_map(directory: str | Path, teach_map: TeachMap) -> None:
    directory = Path(directory)
    entries = []
    for v in teach_map.vertices:
        frame_file = f"vertex_{v.frame_id:05d}_frame.f32"
        feats_file = f"vertex_{v.frame_id:05d}_feats.f32"
        storage.write_blob(directory / frame_file, synth._frame_blob(v.frame))
        feats = np.concatenate(
            [v.coords.ravel(), v.descriptors.ravel(), v.scores.ravel(), v.points3d.ravel()]
        )
        storage.write_blob(directory / feats_file, feats)
        n, dd = v.descriptors.shape
        entries.append({
            "id": v.frame_id,
            "world_pose": v.world_pose.tolist(),
            "frame_file": frame_file,
            "feats_file": feats_file,
            "n": n,
            "d": dd,
        })
    h, w = teach_map.vertices[0].frame.left.shape
    storage.write_manifest(directory, {
        "kind": "map",
        "window": teach_map.window,
        "extractor": teach_map.extractor_ident,
        "image_size": [h, w],
        "camera": synth._camera_dict(teach_map.K),
        "vertices": entries,
    })


def load_map(directory: str | Path) -> TeachMap:
    directory = Path(directory)
    manifest = storage.read_manifest(directory)
    if manifest.get("kind") != "map":
        raise ValueError(f"{directory} is not a map")
    h, w = manifest["image_size"]
    K = synth.camera_from_dict(manifest["camera"])
    vertices = []
    for e in manifest["vertices"]:
        blob = storage.read_blob(directory / e["frame_file"], (3 * h * w,))
        frame = synth._frame_from_blob(blob, h, w, e["world_pose"], None)
        n, dd = e["n"], e["d"]
        feats = storage.read_blob(
            directory / e["feats_file"], (n * 2 + n * dd + n + n * 3,)
        )
        coords = feats[: 2 * n].reshape(n, 2)
        desc = feats[2 * n : 2 * n + n * dd].reshape(n, dd)
        scores = feats[2 * n + n * dd : 2 * n + n * dd + n]
        p3d = feats[2 * n + n * dd + n :].reshape(n, 3)
        vertices.append(
            MapVertex(e["id"], np.asarray(e["world_pose"], float), coords, desc,
                      scores, p3d, frame)
        )
    return TeachMap(vertices, K, manifest["window"], manifest["extractor"])
