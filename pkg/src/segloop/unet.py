"""Configurable encoder-decoder segmentation network built from the nn layer set.

Encoder block i: two same-padded 3x3 convs + ReLU at ``base_channels * 2**i``
channels, followed by a 2x2 max pool (except at the deepest block). Decoder
block i: nearest-neighbor upsample, concat with the encoder skip, then two 3x3
convs + ReLU back down to the block's width. A 1x1 conv head maps to 2 class
channels (segmentation) or 3 (reconstruction). The default depth-5 /
base-4 configuration has 123,030 parameters (documented in the README).

Checkpoints serialize to a self-describing "QAMODEL1" binary container.
"""
from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import CheckpointStageError, ShapeMismatchError

STAGE_BASE = "base_autoencoder"
STAGE_FINETUNED = "fine_tuned"
_STAGE_CODES = {STAGE_BASE: 0, STAGE_FINETUNED: 1}
_STAGE_NAMES = {v: k for k, v in _STAGE_CODES.items()}

CHECKPOINT_MAGIC = b"QAMODEL1"


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 5
    base_channels: int = 4
    in_channels: int = 3
    out_channels: int = 2

    def validate(self):
        if self.depth < 1:
            raise ShapeMismatchError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ShapeMismatchError(f"base_channels must be >= 1, got {self.base_channels}")
        if 256 % (2 ** (self.depth - 1)) != 0:
            raise ShapeMismatchError(
                f"depth {self.depth} incompatible with 256x256 patches "
                f"(256 not divisible by 2^{self.depth - 1})")
        if self.out_channels not in (2, 3):
            raise ShapeMismatchError(
                f"out_channels must be 2 (segmentation) or 3 (reconstruction), "
                f"got {self.out_channels}")
        return self

    def channels(self, i: int) -> int:
        return self.base_channels * (2 ** i)


def param_shapes(config: UNetConfig):
    """Yield (name, shape) in the documented serialization order."""
    config.validate()
    ch = config.channels
    for i in range(config.depth):
        cin = config.in_channels if i == 0 else ch(i - 1)
        yield f"enc{i}.c1.w", (ch(i), cin, 3, 3)
        yield f"enc{i}.c1.b", (ch(i),)
        yield f"enc{i}.c2.w", (ch(i), ch(i), 3, 3)
        yield f"enc{i}.c2.b", (ch(i),)
    for i in range(config.depth - 2, -1, -1):
        yield f"dec{i}.c1.w", (ch(i), ch(i + 1) + ch(i), 3, 3)
        yield f"dec{i}.c1.b", (ch(i),)
        yield f"dec{i}.c2.w", (ch(i), ch(i), 3, 3)
        yield f"dec{i}.c2.b", (ch(i),)
    yield "head.w", (config.out_channels, ch(0), 1, 1)
    yield "head.b", (config.out_channels,)


def param_count(config: UNetConfig) -> int:
    """Exact number of weights and biases for a configuration."""
    return sum(int(np.prod(shape)) for _, shape in param_shapes(config))


class UNet:
    """A built model: immutable parameter dict + config. Inference is
    side-effect free, so concurrent forward calls on one instance are safe."""

    def __init__(self, config: UNetConfig, params: dict[str, np.ndarray]):
        config.validate()
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: UNetConfig, seed: int) -> "UNet":
        """He fan-in normal weights, zero biases, drawn in serialization order."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config):
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=np.float32)
            else:
                fan_in = shape[1] * shape[2] * shape[3]
                std = np.sqrt(2.0 / fan_in)
                params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
        return cls(config, params)

    def param_list(self) -> list[np.ndarray]:
        return [self.params[name] for name, _ in param_shapes(self.config)]

    def with_params(self, plist: list[np.ndarray]) -> "UNet":
        names = [name for name, _ in param_shapes(self.config)]
        return UNet(self.config, dict(zip(names, plist)))

    # -- forward / backward ------------------------------------------------

    def _check_input(self, x: np.ndarray):
        nn.check_tensor4(x, "unet input")
        if x.shape[1] != self.config.in_channels:
            raise ShapeMismatchError(
                f"unet input channels {x.shape[1]} != {self.config.in_channels}")
        div = 2 ** (self.config.depth - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeMismatchError(
                f"unet input spatial dims {x.shape[2:]} not divisible by {div}")

    def forward_train(self, x: np.ndarray):
        """Forward pass returning (head logits/output, cache for backward)."""
        self._check_input(x)
        P = self.params
        depth = self.config.depth
        enc, dec = [], []
        h = x
        for i in range(depth):
            rec = {"in1": h}
            rec["pre1"] = nn.conv2d_forward(h, P[f"enc{i}.c1.w"], P[f"enc{i}.c1.b"])
            rec["in2"] = nn.relu_forward(rec["pre1"])
            rec["pre2"] = nn.conv2d_forward(rec["in2"], P[f"enc{i}.c2.w"], P[f"enc{i}.c2.b"])
            rec["out"] = nn.relu_forward(rec["pre2"])
            h = rec["out"]
            if i < depth - 1:
                h, rec["pool_idx"] = nn.maxpool2_forward(h)
            enc.append(rec)
        for i in range(depth - 2, -1, -1):
            up = nn.upsample2_forward(h)
            cat = np.concatenate([up, enc[i]["out"]], axis=1)
            rec = {"i": i, "in1": cat}
            rec["pre1"] = nn.conv2d_forward(cat, P[f"dec{i}.c1.w"], P[f"dec{i}.c1.b"])
            rec["in2"] = nn.relu_forward(rec["pre1"])
            rec["pre2"] = nn.conv2d_forward(rec["in2"], P[f"dec{i}.c2.w"], P[f"dec{i}.c2.b"])
            h = nn.relu_forward(rec["pre2"])
            dec.append(rec)
        out = nn.conv2d_forward(h, P["head.w"], P["head.b"])
        cache = {"enc": enc, "dec": dec, "head_in": h}
        return out, cache

    def backward(self, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every parameter given the cotangent of the head output."""
        P = self.params
        depth = self.config.depth
        grads = {}
        d, grads["head.w"], grads["head.b"] = nn.conv2d_backward(
            cache["head_in"], P["head.w"], d_out)

        skip_grads = {}
        for rec in reversed(cache["dec"]):
            i = rec["i"]
            d = nn.relu_backward(rec["pre2"], d)
            d, grads[f"dec{i}.c2.w"], grads[f"dec{i}.c2.b"] = nn.conv2d_backward(
                rec["in2"], P[f"dec{i}.c2.w"], d)
            d = nn.relu_backward(rec["pre1"], d)
            d, grads[f"dec{i}.c1.w"], grads[f"dec{i}.c1.b"] = nn.conv2d_backward(
                rec["in1"], P[f"dec{i}.c1.w"], d)
            upper = self.config.channels(i + 1)
            skip_grads[i] = d[:, upper:]
            d = nn.upsample2_backward(d[:, :upper])

        for i in range(depth - 1, -1, -1):
            rec = cache["enc"][i]
            if i < depth - 1:
                d = nn.maxpool2_backward(rec["pool_idx"], rec["out"].shape, d)
                d = d + skip_grads[i]
            d = nn.relu_backward(rec["pre2"], d)
            d, grads[f"enc{i}.c2.w"], grads[f"enc{i}.c2.b"] = nn.conv2d_backward(
                rec["in2"], P[f"enc{i}.c2.w"], d)
            d = nn.relu_backward(rec["pre1"], d)
            d, grads[f"enc{i}.c1.w"], grads[f"enc{i}.c1.b"] = nn.conv2d_backward(
                rec["in1"], P[f"enc{i}.c1.w"], d)
        return grads

    def forward(self, x: np.ndarray, head: str = "segmentation") -> np.ndarray:
        """Inference. Segmentation head returns per-pixel softmax over the two
        class channels; reconstruction head returns the raw 3-channel output."""
        if head == "segmentation":
            if self.config.out_channels != 2:
                raise CheckpointStageError(
                    "model has no segmentation head (out_channels != 2)")
            out, _ = self.forward_train(x)
            return nn.softmax_channels(out)
        if head == "reconstruction":
            if self.config.out_channels != 3:
                raise CheckpointStageError(
                    "model has no reconstruction head (out_channels != 3)")
            out, _ = self.forward_train(x)
            return out
        raise ValueError(f"unknown head {head!r}")

    def bottleneck_features(self, x: np.ndarray) -> np.ndarray:
        """Global average pool of the deepest encoder activation, shape
        (batch, base_channels * 2**(depth-1))."""
        self._check_input(x)
        P = self.params
        h = x
        for i in range(self.config.depth):
            h = nn.relu_forward(nn.conv2d_forward(h, P[f"enc{i}.c1.w"], P[f"enc{i}.c1.b"]))
            h = nn.relu_forward(nn.conv2d_forward(h, P[f"enc{i}.c2.w"], P[f"enc{i}.c2.b"]))
            if i < self.config.depth - 1:
                h, _ = nn.maxpool2_forward(h)
        return h.mean(axis=(2, 3))


def fd_probe_margin(model: UNet, x: np.ndarray) -> float:
    """Distance from the nearest relu kink or pool-argmax flip for input x.

    Finite-differencing a piecewise-linear network is only meaningful while
    the probe box stays inside one linear region, so FD-based verification
    should reject inputs whose margin is within a few probe steps of zero.
    Pool windows tied at exactly equal values come from identical dead paths
    and move together under any probe; those are skipped.
    """
    _, cache = model.forward_train(x)
    m = np.inf
    for rec in cache["enc"] + cache["dec"]:
        for k in ("pre1", "pre2"):
            m = min(m, float(np.abs(rec[k]).min()))
    for rec in cache["enc"]:
        if "pool_idx" not in rec:
            continue
        v = rec["out"]
        B, C, H, W = v.shape
        win = (v.reshape(B, C, H // 2, 2, W // 2, 2)
                .transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4))
        top2 = np.sort(win, axis=1)[:, 2:]
        gaps = top2[:, 1] - top2[:, 0]
        strict = gaps[gaps > 0]
        if strict.size:
            m = min(m, float(strict.min()))
    return m


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class ModelCheckpoint:
    """Immutable snapshot of a model: config + weights + lifecycle metadata."""

    config: UNetConfig
    params: dict[str, np.ndarray]
    stage: str = STAGE_BASE
    iteration: int = 0
    created_at_ms: int = field(default_factory=lambda: int(time.time() * 1000))

    @property
    def checkpoint_id(self) -> str:
        return f"{self.stage}-{self.iteration:05d}"

    def model(self) -> UNet:
        return UNet(self.config, self.params)

    def to_bytes(self) -> bytes:
        """QAMODEL1 container: magic, 7 little-endian int64 config/meta fields,
        weight count, then float32 LE weights in param_shapes order."""
        c = self.config
        flat = np.concatenate([
            np.asarray(self.params[name], dtype="<f4").reshape(-1)
            for name, _ in param_shapes(c)
        ])
        header = struct.pack(
            "<8q", c.depth, c.base_channels, c.in_channels, c.out_channels,
            _STAGE_CODES[self.stage], self.iteration, self.created_at_ms, flat.size)
        return CHECKPOINT_MAGIC + header + flat.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelCheckpoint":
        if blob[:8] != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {blob[:8]!r}")
        fields = struct.unpack_from("<8q", blob, 8)
        depth, base_ch, in_ch, out_ch, stage_code, iteration, created, n = fields
        config = UNetConfig(depth, base_ch, in_ch, out_ch)
        expected = param_count(config)
        if n != expected:
            raise ValueError(f"checkpoint holds {n} weights, config needs {expected}")
        flat = np.frombuffer(blob, dtype="<f4", count=n, offset=8 + 64)
        if flat.size != n:
            raise ValueError("checkpoint truncated")
        params, offset = {}, 0
        for name, shape in param_shapes(config):
            size = int(np.prod(shape))
            params[name] = flat[offset:offset + size].reshape(shape).copy()
            offset += size
        return cls(config, params, _STAGE_NAMES[stage_code], iteration, created)

    def content_hash(self) -> str:
        """Digest of config, stage, iteration, and weights. Creation time is
        excluded so identical training runs hash identically."""
        blob = bytearray(self.to_bytes())
        blob[8 + 48:8 + 56] = b"\x00" * 8  # created_at_ms field
        return hashlib.sha256(bytes(blob)).hexdigest()


def derive_finetune_checkpoint(base: ModelCheckpoint, head_seed: int) -> ModelCheckpoint:
    """Start a segmentation checkpoint from a pretrained one: the conv body
    transfers as-is, the 1x1 head is freshly initialized for 2 classes.
    A checkpoint already in the fine-tuned stage passes through unchanged."""
    if base.stage == STAGE_FINETUNED:
        return base
    seg_config = replace(base.config, out_channels=2)
    fresh = UNet.build(seg_config, head_seed)
    params = {}
    for name, _ in param_shapes(seg_config):
        params[name] = (fresh.params[name] if name.startswith("head.")
                        else base.params[name].copy())
    return ModelCheckpoint(seg_config, params, STAGE_FINETUNED, base.iteration,
                           created_at_ms=int(time.time() * 1000))
