"""The DeepBox network: configuration, parameters, crop preprocessing, checkpoints.

Architecture ``conv(11,96,4)-pool(3,2)-conv(5,256,1)-fc(1024)-fc(2)`` with a ReLU
after every layer but the last and a two-way softmax on top. The ``small``
profile divides all channel counts and the fc6 width by four.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._kernels import warp_into
from .errors import ConfigError, DataError, DimensionError, GeometryError
from .geometry import Box
from .tensorcore import Chain, LayerSpec, out_size, softmax

LAYER_NAMES = ("conv1", "conv2", "fc6", "fc7")

MAGIC = b"DBOX"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    profile: str = "paper"
    input_side: int = 140
    conv1: tuple = (11, 96, 4)
    pool: tuple = (3, 2)
    conv2: tuple = (5, 256, 1)
    fc6: int = 1024
    pads: tuple = (0, 2)
    seed: int = 0
    init_std: float = 0.01

    @classmethod
    def for_profile(cls, profile: str = "paper", **overrides) -> "NetConfig":
        if profile == "paper":
            cfg = cls(profile="paper")
        elif profile == "small":
            cfg = cls(profile="small", conv1=(11, 24, 4), conv2=(5, 64, 1), fc6=256)
        else:
            raise ConfigError(f"unknown profile {profile!r} (expected 'paper' or 'small')")
        return replace(cfg, **overrides)

    def __post_init__(self):
        for name in ("conv1", "conv2", "pool", "pads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.profile not in ("paper", "small"):
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.input_side < 1 or self.fc6 < 1 or self.init_std < 0:
            raise ConfigError(f"invalid network configuration {self}")
        if min(self.conv1) < 1 or min(self.conv2) < 1 or min(self.pool) < 1 or min(self.pads) < 0:
            raise ConfigError(f"invalid layer hyperparameters in {self}")
        try:
            self.shape_chain()
        except DimensionError as exc:
            raise ConfigError(str(exc)) from None

    def shape_chain(self) -> list[int]:
        """Spatial side after conv1, pool and conv2 for a crop of ``input_side``."""
        k1, _, s1 = self.conv1
        pk, ps = self.pool
        k2, _, s2 = self.conv2
        a = out_size(self.input_side, k1, s1, self.pads[0])
        b = out_size(a, pk, ps)
        c = out_size(b, k2, s2, self.pads[1])
        if min(a, b, c) < 1:
            raise DimensionError(f"input side {self.input_side} too small for the conv stack")
        return [self.input_side, a, b, c]

    @property
    def feature_side(self) -> int:
        return self.shape_chain()[-1]

    @property
    def feature_channels(self) -> int:
        return self.conv2[1]

    @property
    def total_stride(self) -> int:
        return self.conv1[2] * self.pool[1] * self.conv2[2]

    @property
    def fc6_inputs(self) -> int:
        return self.feature_channels * self.feature_side ** 2

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def trunk_layers(cfg: NetConfig) -> list[LayerSpec]:
    k1, c1, s1 = cfg.conv1
    k2, c2, s2 = cfg.conv2
    return [
        LayerSpec("conv", "conv1", k=k1, s=s1, c=c1, p=cfg.pads[0]),
        LayerSpec("relu"),
        LayerSpec("maxpool", k=cfg.pool[0], s=cfg.pool[1]),
        LayerSpec("conv", "conv2", k=k2, s=s2, c=c2, p=cfg.pads[1]),
        LayerSpec("relu"),
    ]


def head_layers(cfg: NetConfig) -> list[LayerSpec]:
    return [LayerSpec("fc", "fc6", c=cfg.fc6), LayerSpec("relu"), LayerSpec("fc", "fc7", c=2)]


@dataclass
class NetParams:
    """Weights of one DeepBox net plus the metadata stored with a checkpoint."""

    config: NetConfig
    weights: dict
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    stage: int = 0
    iteration: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32).reshape(3)
        expected = expected_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.weights:
                raise ConfigError(f"missing parameter {name}")
            if self.weights[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {self.weights[name].shape}, expected {shape}")

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: v.copy() for k, v in self.weights.items()},
                         self.mean.copy(), self.stage, self.iteration)

    def __getitem__(self, name):
        return self.weights[name]


def expected_shapes(cfg: NetConfig) -> dict:
    k1, c1, _ = cfg.conv1
    k2, c2, _ = cfg.conv2
    return {
        "conv1.w": (c1, 3, k1, k1), "conv1.b": (c1,),
        "conv2.w": (c2, c1, k2, k2), "conv2.b": (c2,),
        "fc6.w": (cfg.fc6_inputs, cfg.fc6), "fc6.b": (cfg.fc6,),
        "fc7.w": (cfg.fc6, 2), "fc7.b": (2,),
    }


def build_net(cfg: NetConfig) -> NetParams:
    """Gaussian(0, init_std) weights, zero biases; deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    weights = {}
    for name, shape in expected_shapes(cfg).items():
        if name.endswith(".w"):
            weights[name] = (rng.standard_normal(shape) * cfg.init_std).astype(np.float32)
        else:
            weights[name] = np.zeros(shape, dtype=np.float32)
    return NetParams(cfg, weights)


class DeepBoxNet:
    """Trainable crop-path net: trunk and head chained, with a shared tape."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        self.chain = Chain(trunk_layers(cfg) + head_layers(cfg))

    def forward(self, params: NetParams, x: np.ndarray, record: bool = True) -> np.ndarray:
        s = self.cfg.input_side
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise DimensionError(f"expected input of shape (N, 3, {s}, {s}), got {x.shape}")
        return self.chain.forward(params.weights, x, record=record)

    def backward(self, dlogits: np.ndarray, need_input_grad: bool = False):
        return self.chain.backward(dlogits, need_input_grad=need_input_grad)


# ------------------------------------------------------------ preprocessing

def bilinear_warp(image: np.ndarray, box, out_h: int, out_w: int) -> np.ndarray:
    """Resample the region ``box`` of an HxWxC image onto an ``out_h x out_w`` grid.

    Output pixel centres map to ``x_min + (j + 0.5) * bw / out_w - 0.5`` in source
    pixel coordinates (centre-aligned sampling), clamped to the image.
    """
    h, w = image.shape[:2]
    x0, y0, x1, y1 = (float(v) for v in box)
    xs = x0 + (np.arange(out_w) + 0.5) * ((x1 - x0) / out_w) - 0.5
    ys = y0 + (np.arange(out_h) + 0.5) * ((y1 - y0) / out_h) - 0.5
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    xl = np.floor(xs).astype(np.intp)
    yl = np.floor(ys).astype(np.intp)
    xr = np.minimum(xl + 1, w - 1)
    yr = np.minimum(yl + 1, h - 1)
    fx = (xs - xl).astype(np.float32)[None, :, None]
    fy = (ys - yl).astype(np.float32)[:, None, None]
    img = image.astype(np.float32, copy=False)
    top = img[yl]
    bot = img[yr]
    rows = top + (bot - top) * fy
    left = rows[:, xl]
    right = rows[:, xr]
    return left + (right - left) * fx


def _check_box_in_image(box, image) -> Box:
    b = box if isinstance(box, Box) else Box(*(float(v) for v in box))
    h, w = image.shape[:2]
    if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
        raise GeometryError(f"box {tuple(b)} extends outside the {w}x{h} image")
    return b


def preprocess_crop(image: np.ndarray, box, side: int = 140, mean=(0.0, 0.0, 0.0),
                    context_pad: int = 0) -> np.ndarray:
    """Crop ``box`` from an HxWx3 RGB image, warp to side x side, subtract the mean.

    Returns a float32 array of shape (1, 3, side, side).
    """
    return preprocess_crops(image, [box], side, mean, context_pad)


def preprocess_crops(image: np.ndarray, boxes, side: int = 140, mean=(0.0, 0.0, 0.0),
                     context_pad: int = 0) -> np.ndarray:
    out = np.empty((len(boxes), 3, side, side), dtype=np.float32)
    mean = np.asarray(mean, dtype=np.float32).reshape(3)
    for i, box in enumerate(boxes):
        b = _check_box_in_image(box, image)
        if context_pad:
            # grow the box so that `context_pad` output pixels of surround appear on each side
            sx = b.width / (side - 2 * context_pad)
            sy = b.height / (side - 2 * context_pad)
            b = Box(b.x_min - context_pad * sx, b.y_min - context_pad * sy,
                    b.x_max + context_pad * sx, b.y_max + context_pad * sy)
        warp_into(out[i], image, b.x_min, b.y_min, b.x_max, b.y_max, mean)
    return out


def forward_objectness(params: NetParams, x: np.ndarray) -> np.ndarray | float:
    """Softmax probability of the object class for preprocessed input(s).

    A single (1,3,S,S) input returns a float; a batch returns an array.
    """
    logits = DeepBoxNet(params.config).forward(params, x, record=False)
    scores = softmax(logits.astype(np.float64))[:, 1]
    return float(scores[0]) if x.shape[0] == 1 else scores


def score_crops(params: NetParams, image: np.ndarray, boxes, chunk: int = 64) -> np.ndarray:
    """Crop-path objectness for many boxes of one image."""
    net = DeepBoxNet(params.config)
    out = np.empty(len(boxes))
    for start in range(0, len(boxes), chunk):
        part = boxes[start:start + chunk]
        x = preprocess_crops(image, part, params.config.input_side, params.mean)
        logits = net.forward(params, x, record=False)
        out[start:start + len(part)] = softmax(logits.astype(np.float64))[:, 1]
    return out


# -------------------------------------------------------------- checkpoints

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(params: NetParams, path) -> None:
    """Little-endian binary checkpoint.

    Header: magic ``DBOX``, u32 version, config hash, profile, u32 input side,
    3 x f32 channel means, then a JSON metadata blob (full config, stage,
    iteration). Strings are u32-length-prefixed UTF-8. Body: u32 layer count,
    then per tensor its name, u32 rank, u32 dims and the f32 payload.
    """
    cfg = params.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(_pack_str(cfg.config_hash()))
    buf.write(_pack_str(cfg.profile))
    buf.write(struct.pack("<I", cfg.input_side))
    buf.write(params.mean.astype("<f4").tobytes())
    meta = {"config": cfg.to_dict(), "stage": params.stage, "iteration": params.iteration}
    buf.write(_pack_str(json.dumps(meta, sort_keys=True)))
    names = sorted(params.weights)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params.weights[name], dtype="<f4")
        buf.write(_pack_str(name))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: checkpoint truncated at byte offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> NetParams:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: not a DeepBox checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    chash = r.string()
    profile = r.string()
    side = r.u32()
    mean = np.frombuffer(r.take(12), dtype="<f4").astype(np.float32)
    meta = json.loads(r.string())
    cfg = NetConfig.from_dict(meta["config"])
    if cfg.config_hash() != chash or cfg.profile != profile or cfg.input_side != side:
        raise DataError(f"{path}: header does not match the stored configuration")
    weights = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        weights[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.data):
        raise DataError(f"{path}: {len(r.data) - r.pos} trailing bytes after the last tensor")
    return NetParams(cfg, weights, mean, meta.get("stage", 0), meta.get("iteration", 0))
