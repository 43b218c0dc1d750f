"""Per-pixel descriptors, scores, and windowed-softmax keypoints.

The learnable extractor is a small encoder-decoder: stride-2 encoder blocks
whose feature maps, resized back to input resolution and concatenated,
form the dense descriptors; after the bottleneck two mirrored decoder
branches produce keypoint logits and (through a sigmoid) scores. An
analytic, non-learned extractor with the same output contract supports
pipeline runs without training.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import storage
from .autodiff import Tape, Var
from .errors import ShapeError

ACTIVATIONS = {"tanh": ad.tanh}


@dataclass(frozen=True)
class ExtractorConfig:
    """Desk-scale architecture knobs. Descriptor dimension is the sum of
    encoder channels."""

    channels: tuple[int, ...] = (8, 16, 32)
    window: int = 16
    activation: str = "tanh"
    seed: int = 0

    @property
    def descriptor_dim(self) -> int:
        return sum(self.channels)

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c_prev = 1
        for i, c in enumerate(self.channels, start=1):
            shapes[f"enc{i}.weight"] = (c, c_prev, 3, 3)
            shapes[f"enc{i}.bias"] = (c,)
            c_prev = c
        shapes["bottleneck.weight"] = (c_prev, c_prev, 3, 3)
        shapes["bottleneck.bias"] = (c_prev,)
        for branch in ("kp", "score"):
            cin = c_prev
            outs = list(reversed(self.channels[:-1])) + [1]
            for i, cout in enumerate(outs, start=1):
                shapes[f"{branch}{i}.weight"] = (cout, cin, 3, 3)
                shapes[f"{branch}{i}.bias"] = (cout,)
                cin = cout
        return shapes


@dataclass
class ExtractorWeights:
    """Named weight tensors plus the configuration they belong to."""

    config: ExtractorConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ExtractorWeights":
        return ExtractorWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def bind(self, tape: Tape, trainable: bool = True) -> dict[str, Var]:
        """Register every tensor on a tape, as parameters when training."""
        if trainable:
            return {k: tape.param(v, name=k) for k, v in self.tensors.items()}
        return {k: tape.constant(v) for k, v in self.tensors.items()}


def init_weights(cfg: ExtractorConfig, seed: int | None = None) -> ExtractorWeights:
    """Uniform init in +-sqrt(1/fan_in), seeded."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tensors = {}
    for name, shape in cfg.layer_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ExtractorWeights(cfg, tensors)


@dataclass
class DenseFeatureMap:
    """Per-pixel descriptors (D, H, W), scores in (0, 1) (H, W), and raw
    keypoint logits (H, W), all tape variables."""

    descriptors: Var
    scores: Var
    keypoint_logits: Var

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.value.shape


@dataclass
class KeypointSet:
    """Sub-pixel keypoints with sampled descriptors and scores."""

    coords: Var  # (N, 2) as (u, v)
    descriptors: Var  # (N, D)
    scores: Var  # (N,)


def forward(
    image: np.ndarray | Var,
    params: dict[str, Var],
    cfg: ExtractorConfig,
    tape: Tape,
) -> DenseFeatureMap:
    """Run the encoder-decoder on one intensity image (H, W)."""
    act = ACTIVATIONS[cfg.activation]
    x = image if isinstance(image, Var) else tape.constant(np.asarray(image, dtype=float))
    if x.value.ndim != 2:
        raise ShapeError(f"expected (H, W) image, got {x.value.shape}")
    h, w = x.value.shape
    depth = len(cfg.channels)
    if h % (1 << depth) or w % (1 << depth):
        raise ShapeError(f"image {h}x{w} not divisible by 2^{depth}")

    feat = ad.reshape(x, (1, h, w))
    enc_maps = []
    for i in range(1, depth + 1):
        feat = act(ad.conv2d(feat, params[f"enc{i}.weight"], params[f"enc{i}.bias"]))
        feat = ad.avgpool2(feat)
        enc_maps.append(feat)

    descriptors = ad.concat(
        [ad.upsample_bilinear(m, (h, w)) for m in enc_maps], axis=0
    )

    bottleneck = act(
        ad.conv2d(feat, params["bottleneck.weight"], params["bottleneck.bias"])
    )

    def decode(branch: str) -> Var:
        d = bottleneck
        for i in range(1, depth + 1):
            d = ad.upsample_nearest(d, 2)
            d = ad.conv2d(d, params[f"{branch}{i}.weight"], params[f"{branch}{i}.bias"])
            if i < depth:
                d = act(d)
        return ad.reshape(d, (h, w))

    logits = decode("kp")
    scores = ad.sigmoid(decode("score"))
    return DenseFeatureMap(descriptors, scores, logits)


def detect_keypoints(logits: Var, window: int) -> Var:
    """One sub-pixel keypoint per window: the softmax-weighted average of
    pixel coordinates inside that window. Returns (N, 2) as (u, v)."""
    h, w = logits.value.shape
    if h % window or w % window:
        raise ShapeError(f"window {window} does not divide {h}x{w}")
    ny, nx = h // window, w // window
    n = ny * nx

    blocks = ad.reshape(logits, (ny, window, nx, window))
    blocks = ad.transpose(blocks, (0, 2, 1, 3))
    flat = ad.reshape(blocks, (n, window * window))
    weights = ad.softmax(flat, axis=1)

    ij = np.arange(window)
    in_window = np.stack(
        [np.tile(ij, window), np.repeat(ij, window)], axis=1
    )  # (w*w, 2) as (u, v) offsets within the window
    origins = np.stack(
        [
            np.tile(np.arange(nx) * window, ny),
            np.repeat(np.arange(ny) * window, nx),
        ],
        axis=1,
    ).astype(float)

    rel = ad.matmul(weights, logits.tape.constant(in_window.astype(float)))
    return ad.add(rel, logits.tape.constant(origins))


def sample_at(fmap: DenseFeatureMap, coords: Var) -> tuple[Var, Var]:
    """Bilinearly sample descriptors (N, D) and scores (N,) at points."""
    desc = ad.bilinear_sample(fmap.descriptors, coords)
    h, w = fmap.scores.value.shape
    score_map = ad.reshape(fmap.scores, (1, h, w))
    scores = ad.reshape(ad.bilinear_sample(score_map, coords), (len(coords.value),))
    return desc, scores


def extract_keypoints(fmap: DenseFeatureMap, window: int) -> KeypointSet:
    coords = detect_keypoints(fmap.keypoint_logits, window)
    desc, scores = sample_at(fmap, coords)
    return KeypointSet(coords, desc, scores)


# ---------------------------------------------------------------------------
# analytic (non-learned) features

ANALYTIC_SCALES = (1, 2, 4)


def _box_mean(img: np.ndarray, radius: int) -> np.ndarray:
    """Box filter with edge replication, via padded cumulative sums."""
    k = 2 * radius + 1
    padded = np.pad(img, radius, mode="edge")
    c = np.cumsum(np.cumsum(padded, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    h, w = img.shape
    total = c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
    return total[:h, :w] / (k * k)


def analytic_features(image: np.ndarray, tape: Tape) -> DenseFeatureMap:
    """Hand-built fallback: zero-normalized multi-scale patch statistics as
    descriptors, gradient magnitude as scores, a corner response as logits.

    Every channel is pre-smoothed so descriptors vary on at least the
    smallest patch scale (sub-pixel sampling stays meaningful). Descriptors
    are invariant to global gain/bias changes of the image; recorded on the
    tape as constants (nothing to train).
    """
    img = np.asarray(image, dtype=float)
    channels = []
    for s in ANALYTIC_SCALES:
        mu = _box_mean(img, s)
        wide = _box_mean(img, 2 * s + 1)
        var = np.maximum(_box_mean(img * img, 2 * s + 1) - wide * wide, 0.0)
        sigma = np.sqrt(var)
        # the stabilizer scales with the image so descriptors stay exactly
        # gain/bias invariant
        denom = sigma + (1e-9 * float(sigma.max()) or 1.0)
        bandpass = (mu - wide) / denom
        gx = (np.roll(mu, -1, axis=1) - np.roll(mu, 1, axis=1)) / denom
        gy = (np.roll(mu, -1, axis=0) - np.roll(mu, 1, axis=0)) / denom
        gx[:, 0] = gx[:, 1]
        gx[:, -1] = gx[:, -2]
        gy[0] = gy[1]
        gy[-1] = gy[-2]
        channels.extend([bandpass, gx, gy])
    desc = np.stack(channels, axis=0)

    gx = channels[1]
    gy = channels[2]
    grad_mag = np.sqrt(gx * gx + gy * gy)
    scores = grad_mag / max(float(grad_mag.max()), 1e-12)

    # Harris-style response on the normalized mid-scale gradients
    gx2 = _box_mean(channels[4] * channels[4], 2)
    gy2 = _box_mean(channels[5] * channels[5], 2)
    gxy = _box_mean(channels[4] * channels[5], 2)
    response = gx2 * gy2 - gxy * gxy - 0.05 * (gx2 + gy2) ** 2
    logits = 4.0 * response / max(float(np.abs(response).max()), 1e-12)

    return DenseFeatureMap(
        tape.constant(desc), tape.constant(scores), tape.constant(logits)
    )


# ---------------------------------------------------------------------------
# checkpoint persistence

CHECKPOINT_FORMAT = 1


def save_checkpoint(
    directory: str | Path, weights: ExtractorWeights, extra: dict | None = None
) -> None:
    """Write manifest (shapes, window, activation, seed) plus one raw
    float32 blob per layer."""
    directory = Path(directory)
    cfg = weights.config
    layers = {}
    for name, tensor in sorted(weights.tensors.items()):
        fname = name.replace("/", "_") + ".f32"
        storage.write_blob(directory / fname, tensor)
        layers[name] = {"shape": list(tensor.shape), "file": fname}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": "checkpoint",
        "channels": list(cfg.channels),
        "window": cfg.window,
        "activation": cfg.activation,
        "seed": cfg.seed,
        "layers": layers,
    }
    if extra:
        manifest["extra"] = extra
    storage.write_manifest(directory, manifest)


def load_checkpoint(directory: str | Path) -> tuple[ExtractorWeights, dict]:
    directory = Path(directory)
    manifest = storage.read_manifest(directory)
    if manifest.get("kind") != "checkpoint":
        raise ValueError(f"{directory} is not a checkpoint")
    cfg = ExtractorConfig(
        channels=tuple(manifest["channels"]),
        window=int(manifest["window"]),
        activation=manifest["activation"],
        seed=int(manifest["seed"]),
    )
    expected = cfg.layer_shapes()
    tensors = {}
    for name, entry in manifest["layers"].items():
        shape = tuple(entry["shape"])
        if name not in expected or expected[name] != shape:
            raise ValueError(f"layer {name} with shape {shape} does not fit config")
        tensors[name] = storage.read_blob(directory / entry["file"], shape)
    missing = set(expected) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint missing layers: {sorted(missing)}")
    return ExtractorWeights(cfg, tensors), manifest.get("extra", {})
