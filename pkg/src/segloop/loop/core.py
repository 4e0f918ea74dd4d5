"""Patch plumbing and the train/predict operations of the annotation loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .. import nn
from ..errors import (
    CheckpointStageError, DataError, EmptySupervisionError, ShapeMismatchError,
)
from ..unet import (
    STAGE_FINETUNED, ModelCheckpoint, UNet, UNetConfig, derive_finetune_checkpoint,
)

PATCH = 256


@dataclass
class Tile:
    tile_id: str
    project_id: str
    pixels: np.ndarray  # H x W x 3 uint8
    source_name: str = ""

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def validate(self) -> "Tile":
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise DataError(f"tile pixels must be HxWx3 uint8, got {p.shape} {p.dtype}")
        if not (PATCH <= p.shape[0] <= 8192 and PATCH <= p.shape[1] <= 8192):
            raise DataError(f"tile dims {p.shape[:2]} outside 256..8192")
        return self


@dataclass
class Patch:
    patch_id: str
    tile_id: str
    origin: tuple[int, int]  # (x, y) in the padded tile
    pixels: np.ndarray  # 256 x 256 x 3


@dataclass
class LabelMap:
    """Sparse three-way annotation: 0 unlabeled, 1 negative, 2 positive."""

    values: np.ndarray  # H x W uint8
    tile_id: str = ""
    last_modified: int = field(default_factory=lambda: int(time.time() * 1000))

    def validate(self) -> "LabelMap":
        v = self.values
        if v.ndim != 2:
            raise DataError(f"label map must be 2-d, got shape {v.shape}")
        bad = np.setdiff1d(np.unique(v), [nn.UNLABELED, nn.NEGATIVE, nn.POSITIVE])
        if bad.size:
            raise DataError(f"label map contains invalid values {bad.tolist()}")
        return self


@dataclass(frozen=True)
class TrainConfig:
    edgeweight: float = 1.0
    epochs: int = 1
    batch_size: int = 4
    seed: int = 0
    learning_rate: float = 1e-3

    def validate(self) -> "TrainConfig":
        if self.edgeweight < 1:
            raise DataError(f"edgeweight must be >= 1, got {self.edgeweight}")
        if self.epochs < 0 or self.batch_size < 1:
            raise DataError("epochs must be >= 0 and batch_size >= 1")
        return self


# -- patch extraction ---------------------------------------------------------

def _pad_to_grid(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    ph = (-h) % PATCH
    pw = (-w) % PATCH
    if ph == 0 and pw == 0:
        return arr
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, mode="reflect")


def _pixels_of(tile) -> tuple[np.ndarray, str]:
    if isinstance(tile, Tile):
        tile.validate()
        return tile.pixels, tile.tile_id
    return np.asarray(tile), ""


def make_patches(tile) -> list[Patch]:
    """Cut the reflection-padded tile into a non-overlapping 256-grid.
    Count = ceil(H/256) * ceil(W/256)."""
    pixels, tile_id = _pixels_of(tile)
    padded = _pad_to_grid(pixels)
    patches = []
    for y in range(0, padded.shape[0], PATCH):
        for x in range(0, padded.shape[1], PATCH):
            patches.append(Patch(
                patch_id=f"{tile_id or 'tile'}-p{len(patches):03d}",
                tile_id=tile_id,
                origin=(x, y),
                pixels=padded[y:y + PATCH, x:x + PATCH]))
    return patches


def _stitch_arrays(origins, arrays, height: int, width: int) -> np.ndarray:
    ph = -(-height // PATCH) * PATCH
    pw = -(-width // PATCH) * PATCH
    first = np.asarray(arrays[0])
    canvas = np.zeros((ph, pw) + first.shape[2:], dtype=first.dtype)
    for (x, y), arr in zip(origins, arrays):
        canvas[y:y + PATCH, x:x + PATCH] = arr
    return canvas[:height, :width]


def stitch(patches: list[Patch], height: int, width: int) -> np.ndarray:
    """Inverse of make_patches: reassemble and crop the reflection padding."""
    return _stitch_arrays([p.origin for p in patches],
                          [p.pixels for p in patches], height, width)


def make_patch_pairs(pixels: np.ndarray, labels: np.ndarray):
    """Aligned (image patch, label patch) pairs over the same padded grid."""
    if pixels.shape[:2] != labels.shape:
        raise ShapeMismatchError(
            f"labels {labels.shape} do not match tile {pixels.shape[:2]}")
    imgs = make_patches(pixels)
    labs = make_patches(labels[..., None])
    return [(ip.pixels, lp.pixels[..., 0]) for ip, lp in zip(imgs, labs)]


# -- training -----------------------------------------------------------------

def _as_batch(images) -> np.ndarray:
    """uint8 HWC patches -> float32 NCHW in [0,1]."""
    arr = np.stack([p.pixels if isinstance(p, Patch) else np.asarray(p)
                    for p in images])
    return (arr.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)


def _batched(indices, size):
    for i in range(0, len(indices), size):
        yield indices[i:i + size]


def pretrain(patches, config: TrainConfig,
             net: UNetConfig | None = None,
             progress=None, should_stop=None) -> ModelCheckpoint:
    """Self-supervised reconstruction over all patches. Returns the weights
    with the best running evaluation loss (evaluated every 10 steps on a
    fixed subsample, capped at 64 patches, to keep long runs cheap)."""
    config.validate()
    if len(patches) == 0:
        raise DataError("pretrain needs at least one patch")
    net = net or UNetConfig(out_channels=3)
    if net.out_channels != 3:
        raise CheckpointStageError("pretraining requires the reconstruction head")
    x_all = _as_batch(patches)
    n = x_all.shape[0]

    rng = np.random.default_rng(config.seed)
    model = UNet.build(net, seed=config.seed)
    state = nn.adam_init(model.param_list(), learning_rate=config.learning_rate)
    eval_idx = rng.permutation(n)[:min(n, 64)]

    def eval_loss(m: UNet) -> float:
        total = 0.0
        for chunk in _batched(eval_idx, 8):
            out, _ = m.forward_train(x_all[chunk])
            loss, _ = nn.mse_reconstruction(out, x_all[chunk])
            total += loss * len(chunk)
        return total / len(eval_idx)

    best_loss = eval_loss(model)
    best = [p.copy() for p in model.param_list()]
    params = model.param_list()
    steps = 0
    total_steps = max(1, config.epochs * (-(-n // config.batch_size)))
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for batch in _batched(order, config.batch_size):
            if should_stop is not None and should_stop():
                model = model.with_params(best)
                return ModelCheckpoint(net, dict(model.params), iteration=steps)
            m = model.with_params(params)
            xb = x_all[batch]
            out, cache = m.forward_train(xb)
            _, d = nn.mse_reconstruction(out, xb)
            grads = m.backward(cache, d)
            glist = [grads[name] for name in model.params]
            params, state = nn.adam_step(params, glist, state)
            steps += 1
            if steps % 10 == 0:
                cur = eval_loss(model.with_params(params))
                if cur < best_loss:
                    best_loss = cur
                    best = [p.copy() for p in params]
            if progress is not None:
                progress(steps / total_steps)
    if steps % 10 != 0:
        cur = eval_loss(model.with_params(params))
        if cur < best_loss:
            best = [p.copy() for p in params]
    model = model.with_params(best)
    return ModelCheckpoint(net, dict(model.params), iteration=steps)


def edge_weight_map(labels: np.ndarray, edgeweight: float) -> np.ndarray:
    """Loss weights: edgeweight at labeled pixels with an opposite-class label
    in their 8-neighborhood, 1 at other labeled pixels, 0 where unlabeled."""
    if edgeweight < 1:
        raise DataError(f"edgeweight must be >= 1, got {edgeweight}")
    pos = labels == nn.POSITIVE
    neg = labels == nn.NEGATIVE
    kernel = np.ones((3, 3), dtype=bool)
    near_pos = ndimage.binary_dilation(pos, structure=kernel)
    near_neg = ndimage.binary_dilation(neg, structure=kernel)
    boundary = (pos & near_neg) | (neg & near_pos)
    weights = np.where(pos | neg, 1.0, 0.0)
    weights[boundary] = edgeweight
    return weights


def finetune(base: ModelCheckpoint, samples, config: TrainConfig,
             progress=None, should_stop=None) -> ModelCheckpoint:
    """Supervised training over (patch, label patch) pairs with edge-weighted
    masked cross entropy. A base-stage checkpoint contributes its body and
    gets a fresh segmentation head; a fine-tuned one continues as-is."""
    config.validate()
    pairs = [(np.asarray(img), np.asarray(lab)) for img, lab in samples]
    if not any((lab != nn.UNLABELED).any() for _, lab in pairs):
        raise EmptySupervisionError("no labeled pixels in any training patch")

    start = derive_finetune_checkpoint(base, head_seed=config.seed)
    model = start.model()
    x_all = _as_batch([img for img, _ in pairs])
    labels_all = np.stack([lab for _, lab in pairs]).astype(np.uint8)
    weights_all = np.stack([edge_weight_map(lab, config.edgeweight)
                            for _, lab in pairs])

    rng = np.random.default_rng(config.seed)
    params = model.param_list()
    state = nn.adam_init(params, learning_rate=config.learning_rate)
    steps = 0
    n = x_all.shape[0]
    total_steps = max(1, config.epochs * (-(-n // config.batch_size)))
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for batch in _batched(order, config.batch_size):
            if should_stop is not None and should_stop():
                model = model.with_params(params)
                return ModelCheckpoint(model.config, dict(model.params),
                                       STAGE_FINETUNED, start.iteration + steps)
            m = model.with_params(params)
            out, cache = m.forward_train(x_all[batch])
            loss, d = nn.weighted_masked_ce(out, labels_all[batch], weights_all[batch])
            if loss is None:  # batch hit only unlabeled pixels
                continue
            grads = m.backward(cache, d)
            glist = [grads[name] for name in model.params]
            params, state = nn.adam_step(params, glist, state)
            steps += 1
            if progress is not None:
                progress(steps / total_steps)
    model = model.with_params(params)
    return ModelCheckpoint(model.config, dict(model.params), STAGE_FINETUNED,
                           start.iteration + steps)


# -- inference ----------------------------------------------------------------

def predict_probabilities(ckpt: ModelCheckpoint, pixels: np.ndarray) -> np.ndarray:
    """Stitched positive-class probability map for a whole tile."""
    if ckpt.stage != STAGE_FINETUNED:
        raise CheckpointStageError(
            f"checkpoint stage {ckpt.stage!r} has no segmentation head")
    model = ckpt.model()
    patches = make_patches(pixels)
    probs = []
    for chunk in _batched(patches, 8):
        batch = _as_batch(chunk)
        p = model.forward(batch)  # (B, 2, 256, 256) softmax
        probs.extend(p[:, 1])
    h, w = pixels.shape[:2]
    return _stitch_arrays([p.origin for p in patches],
                          [pr.astype(np.float64) for pr in probs], h, w)


def predict_tile(ckpt: ModelCheckpoint, tile, threshold: float = 0.5):
    """(probability map, suggestion mask) for a tile; mask = prob >= threshold."""
    pixels, _ = _pixels_of(tile)
    prob = predict_probabilities(ckpt, pixels)
    return prob, prob >= threshold


def import_prediction(mask: np.ndarray, existing: np.ndarray) -> np.ndarray:
    """Fill unlabeled pixels from a suggestion mask; user labels are kept."""
    if mask.shape != existing.shape:
        raise ShapeMismatchError(
            f"mask {mask.shape} does not match labels {existing.shape}")
    out = existing.copy()
    un = existing == nn.UNLABELED
    out[un] = np.where(mask[un], nn.POSITIVE, nn.NEGATIVE)
    return out


_EIGHT = np.ones((3, 3), dtype=int)


def count_structures(mask: np.ndarray):
    """(count, centroids) of 8-connected positive components."""
    lab, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return 0, np.zeros((0, 2))
    cents = ndimage.center_of_mass(mask, lab, index=range(1, n + 1))
    return n, np.asarray(cents, dtype=np.float64)


# -- loss evaluation ----------------------------------------------------------

def reconstruction_loss(ckpt: ModelCheckpoint, patches) -> float:
    """Mean reconstruction MSE of a checkpoint over uint8 patches."""
    if ckpt.config.out_channels != 3:
        raise CheckpointStageError("checkpoint has no reconstruction head")
    if len(patches) == 0:
        raise DataError("no patches to evaluate")
    model = ckpt.model()
    x = _as_batch(patches)
    total = 0.0
    for chunk in _batched(np.arange(x.shape[0]), 8):
        out, _ = model.forward_train(x[chunk])
        loss, _ = nn.mse_reconstruction(out, x[chunk])
        total += loss * len(chunk)
    return total / x.shape[0]


def segmentation_loss(ckpt: ModelCheckpoint, samples,
                      edgeweight: float = 1.0) -> float:
    """Mean edge-weighted masked cross entropy of a fine-tuned checkpoint
    over (patch, label patch) pairs. Batches average by patch count."""
    if ckpt.stage != STAGE_FINETUNED:
        raise CheckpointStageError(
            f"checkpoint stage {ckpt.stage!r} has no segmentation head")
    pairs = [(np.asarray(img), np.asarray(lab)) for img, lab in samples]
    if not any((lab != nn.UNLABELED).any() for _, lab in pairs):
        raise EmptySupervisionError("no labeled pixels in any patch")
    model = ckpt.model()
    x = _as_batch([img for img, _ in pairs])
    labels = np.stack([lab for _, lab in pairs]).astype(np.uint8)
    weights = np.stack([edge_weight_map(lab, edgeweight)
                        for _, lab in pairs])
    total, seen = 0.0, 0
    for chunk in _batched(np.arange(x.shape[0]), 4):
        out, _ = model.forward_train(x[chunk])
        loss, _ = nn.weighted_masked_ce(out, labels[chunk], weights[chunk])
        if loss is None:
            continue
        total += loss * len(chunk)
        seen += len(chunk)
    return total / seen
