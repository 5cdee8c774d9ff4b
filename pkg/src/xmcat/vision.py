"""Visual cluster encoder: a small conv stack ending in global average pooling
and a sigmoid head, plus class-activation heatmaps, box extraction, and the
binary checkpoint codec.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grad import (
    AdamState,
    Node,
    Tape,
    adam_step,
    backward,
    bce_loss,
    conv2d,
    global_avg_pool,
    linear,
    maxpool2,
    relu,
    sigmoid,
)

CHECKPOINT_MAGIC = b"XMCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture and inference knobs for the visual encoder.

    The head starts non-negative (|He-uniform| * head_init_scale, with a
    sparsity mask of head_init_density) and with zero bias, so a fresh model
    emits probabilities >= 0.5 everywhere and the very first inference
    predicts every cluster. That non-empty first prediction seeds the text
    counts; the spread of initial logits is what lets clusters differentiate
    as they decay through the prediction threshold at different times for
    different images. A positive conv_bias_init keeps relu units alive early,
    slowing the feature collapse that the initial all-zero-target phase
    drives.
    """

    n_clusters: int = 150
    visual_threshold: float = 0.5
    image_size: int = 64
    conv_channels: tuple[int, ...] = (16, 32, 64)
    head_init_scale: float = 0.5
    head_init_density: float = 0.25
    conv_bias_init: float = 0.0

    def validate(self) -> None:
        if self.n_clusters < 2:
            raise ValueError(f"n_clusters must be >= 2, got {self.n_clusters}")
        if not 0.0 < self.visual_threshold < 1.0:
            raise ValueError(f"visual_threshold must be in (0,1), got {self.visual_threshold}")
        if len(self.conv_channels) < 1:
            raise ValueError("conv_channels must name at least one layer")
        if any(c < 1 for c in self.conv_channels):
            raise ValueError(f"conv_channels must be positive, got {self.conv_channels}")
        pools = len(self.conv_channels) - 1
        if self.image_size < 2**pools or self.image_size % (2**pools):
            raise ValueError(
                f"image_size {self.image_size} incompatible with {pools} pooling stages"
            )
        if self.head_init_scale < 0:
            raise ValueError(f"head_init_scale must be >= 0, got {self.head_init_scale}")
        if not 0.0 <= self.head_init_density <= 1.0:
            raise ValueError(f"head_init_density must be in [0,1], got {self.head_init_density}")
        if self.conv_bias_init < 0:
            raise ValueError(f"conv_bias_init must be >= 0, got {self.conv_bias_init}")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box over pixels, inclusive-exclusive: [x_min,x_max) x [y_min,y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min < 0 or self.y_min < 0 or self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(
                f"degenerate box ({self.x_min},{self.y_min},{self.x_max},{self.y_max})"
            )

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass
class Cam:
    """A class-activation map at feature resolution plus its upsampled form."""

    cluster: int
    heatmap: np.ndarray
    upsampled: np.ndarray


class Network:
    """Conv/pool stack -> GAP -> linear head -> sigmoid, on grad-core nodes.

    Forward inference never mutates parameters, so concurrent forward passes
    over a frozen network are safe.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.Generator(np.random.PCG64(seed))
        self.conv_weights: list[Node] = []
        self.conv_biases: list[Node] = []
        in_ch = 3
        for ch in config.conv_channels:
            limit = np.sqrt(6.0 / (in_ch * 9))
            w = rng.uniform(-limit, limit, size=(ch, in_ch, 3, 3))
            self.conv_weights.append(Node(w.astype(self.dtype)))
            self.conv_biases.append(Node(np.full(ch, config.conv_bias_init, dtype=self.dtype)))
            in_ch = ch
        limit = np.sqrt(6.0 / in_ch)
        head = rng.uniform(0.0, limit, size=(config.n_clusters, in_ch))
        if config.head_init_density < 1.0:
            head *= rng.random((config.n_clusters, in_ch)) < config.head_init_density
        head *= config.head_init_scale
        self.head_weight = Node(head.astype(self.dtype))
        self.head_bias = Node(np.zeros(config.n_clusters, dtype=self.dtype))

    def params(self) -> list[tuple[str, Node]]:
        out = []
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            out.append((f"conv{i}.weight", w))
            out.append((f"conv{i}.bias", b))
        out.append(("head.weight", self.head_weight))
        out.append(("head.bias", self.head_bias))
        return out

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        size = self.config.image_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (size, size):
            raise ValueError(
                f"images must be (batch, 3, {size}, {size}), got {images.shape}"
            )
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("images must be normalized to [0,1]")
        return images.astype(self.dtype, copy=False)

    def _forward_nodes(self, tape: Tape, images: np.ndarray) -> dict[str, Node]:
        x = Node(self._check_images(images))
        last = len(self.conv_weights) - 1
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            x = relu(tape, conv2d(tape, x, w, b, stride=1, padding=1))
            if i < last:
                x = maxpool2(tape, x)
        pooled = global_avg_pool(tape, x)
        logits = linear(tape, pooled, self.head_weight, self.head_bias)
        probs = sigmoid(tape, logits)
        return {"features": x, "pooled": pooled, "logits": logits, "probs": probs}

    def forward(self, images: np.ndarray) -> np.ndarray:
        """Per-image cluster membership probabilities, shape (batch, n_clusters)."""
        return self._forward_nodes(Tape(), images)["probs"].data


def predict_clusters(probs: np.ndarray, threshold: float) -> np.ndarray:
    """Binarize membership probabilities; the threshold itself is included."""
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def train_batch(net: Network, images: np.ndarray, targets: np.ndarray, adam: AdamState) -> float:
    """One BCE step against binary cluster targets. Returns the pre-step loss."""
    tape = Tape()
    nodes = net._forward_nodes(tape, images)
    loss = bce_loss(tape, nodes["probs"], targets)
    params = [p for _, p in net.params()]
    for p in params:
        p.grad = None
    backward(tape, loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    adam_step(params, grads, adam)
    return float(loss.data)


def bilinear_upsample(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resize (the align_corners=False convention)."""
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    a = src[np.ix_(y0c, x0c)]
    b = src[np.ix_(y0c, x1c)]
    c = src[np.ix_(y1c, x0c)]
    d = src[np.ix_(y1c, x1c)]
    return (a * (1 - wx) + b * wx) * (1 - wy) + (c * (1 - wx) + d * wx) * wy


def compute_cam(net: Network, image: np.ndarray, cluster: int) -> Cam:
    """Class-activation map for one cluster: head-weighted sum of feature maps.

    The spatial mean of the raw heatmap equals the cluster logit minus its
    bias, which the tests assert as an identity.
    """
    if not 0 <= cluster < net.config.n_clusters:
        raise ValueError(f"cluster {cluster} out of range [0,{net.config.n_clusters})")
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"compute_cam expects one (3,S,S) image, got {image.shape}")
    nodes = net._forward_nodes(Tape(), image[None])
    feats = nodes["features"].data[0].astype(np.float64)
    weights = net.head_weight.data[cluster].astype(np.float64)
    heat = np.tensordot(weights, feats, axes=1)
    size = net.config.image_size
    return Cam(cluster, heat, bilinear_upsample(heat, size, size))


def _components_above(mask: np.ndarray) -> list[tuple[int, int, int, int, int]]:
    """4-connected components of a boolean mask, in row-major first-pixel order.

    Returns (size, y_min, x_min, y_max, x_max) per component.
    """
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            size = 0
            y_min = y_max = sy
            x_min = x_max = sx
            while stack:
                y, x = stack.pop()
                size += 1
                y_min = min(y_min, y)
                y_max = max(y_max, y)
                x_min = min(x_min, x)
                x_max = max(x_max, x)
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            comps.append((size, y_min, x_min, y_max, x_max))
    return comps


def extract_box(cam: Cam) -> BoundingBox | None:
    """Tight box around the largest strong-activation component.

    Pixels strictly above the midpoint of the heatmap's range are segmented;
    the largest 4-connected component wins, ties going to the component whose
    topmost-then-leftmost pixel comes first. A heatmap with non-positive max,
    or one with no pixel strictly above the threshold (e.g. constant), signals
    a degenerate CAM and yields no box.
    """
    heat = cam.upsampled
    peak = heat.max()
    if peak <= 0:
        return None
    threshold = heat.min() + 0.5 * (peak - heat.min())
    mask = heat > threshold
    if not mask.any():
        return None
    comps = _components_above(mask)
    best = max(comps, key=lambda c: c[0])  # max keeps the earliest on ties
    _, y_min, x_min, y_max, x_max = best
    return BoundingBox(x_min, y_min, x_max + 1, y_max + 1)


def save_checkpoint(net: Network, path) -> None:
    """Write all parameters: XMCK magic, version, then name/rank/dims/f32 data."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    params = net.params()
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(params))
    for name, node in params:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(node.data, dtype="<f4")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(
                f"{self.path}: truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path, config: EncoderConfig | None = None, image_size: int = 64, dtype=np.float32) -> Network:
    """Rebuild a Network from an XMCK file, inferring architecture from shapes.

    If ``config`` is given, its architecture must match the stored tensors.
    """
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = struct.unpack("<II", reader.take(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", reader.take(2))
        name = reader.take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", reader.take(1))
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank)) if rank else ()
        n_vals = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(reader.take(4 * n_vals), dtype="<f4").reshape(dims)
        if name in tensors:
            raise ValueError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = arr
        order.append(name)
    if reader.pos != len(reader.data):
        raise ValueError(f"{path}: {len(reader.data) - reader.pos} trailing bytes after last tensor")

    n_convs = sum(1 for name in order if name.startswith("conv") and name.endswith(".weight"))
    expected = []
    for i in range(n_convs):
        expected += [f"conv{i}.weight", f"conv{i}.bias"]
    expected += ["head.weight", "head.bias"]
    if order != expected:
        raise ValueError(f"{path}: unexpected tensor layout {order}")
    channels = []
    in_ch = 3
    for i in range(n_convs):
        w = tensors[f"conv{i}.weight"]
        if w.ndim != 4 or w.shape[1] != in_ch or w.shape[2:] != (3, 3):
            raise ValueError(f"{path}: conv{i}.weight has shape {w.shape}, expected (*, {in_ch}, 3, 3)")
        if tensors[f"conv{i}.bias"].shape != (w.shape[0],):
            raise ValueError(f"{path}: conv{i}.bias shape mismatch")
        channels.append(w.shape[0])
        in_ch = w.shape[0]
    head = tensors["head.weight"]
    if head.ndim != 2 or head.shape[1] != in_ch:
        raise ValueError(f"{path}: head.weight has shape {head.shape}, expected (*, {in_ch})")
    if tensors["head.bias"].shape != (head.shape[0],):
        raise ValueError(f"{path}: head.bias shape mismatch")
    if not all(np.isfinite(t).all() for t in tensors.values()):
        raise ValueError(f"{path}: checkpoint contains non-finite values")

    if config is not None:
        if tuple(channels) != tuple(config.conv_channels) or head.shape[0] != config.n_clusters:
            raise ValueError(
                f"{path}: checkpoint architecture (channels {tuple(channels)}, clusters {head.shape[0]}) "
                f"does not match config (channels {tuple(config.conv_channels)}, clusters {config.n_clusters})"
            )
    else:
        config = EncoderConfig(
            n_clusters=head.shape[0], image_size=image_size, conv_channels=tuple(channels)
        )
    net = Network(config, seed=0, dtype=dtype)
    for name, node in net.params():
        node.data = tensors[name].astype(dtype)
    return net
