"""Full segmentation model: residual encoder with receptive-field channel
reduction, stacked fusion modules, a transposed-conv decoder, and four
deep-supervision heads. Also the binary checkpoint format."""
from __future__ import annotations

import dataclasses
import json
import os
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

from .blocks import ConvBlock, Layer, ResidualStage, RfbBlock
from .errors import ConfigError, CorruptionError, FormatError, ShapeError
from .gmsrf import GmsrfModule
from .tensor import DEFAULT_DTYPE, Tensor, concat_channels, resize_bilinear, sigmoid

CHECKPOINT_MAGIC = b"GMSRF1"


@dataclass
class ModelConfig:
    """Architecture hyperparameters; everything the training protocol leaves
    open is pinned here."""

    input_size: int = 64
    encoder_widths: tuple = (32, 64, 128, 256)
    rfb_channels: int = 32          # bundle width C0 after reduction
    growth: int = 8                 # channels added per dense fusion layer
    layers_per_module: int = 3
    num_modules: int = 2
    se_reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.validate()

    def validate(self):
        if self.input_size % 32 != 0 or self.input_size < 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if len(self.encoder_widths) != 4 or any(w < 1 for w in self.encoder_widths):
            raise ConfigError(f"encoder_widths must be 4 positive ints, got {self.encoder_widths}")
        for field in ("rfb_channels", "growth", "layers_per_module", "num_modules", "se_reduction"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    def scale_size(self, scale):
        """Spatial size of stream `scale`; scale i sits at stride 2^(i+1)."""
        return self.input_size // (2 ** (scale + 1))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @staticmethod
    def from_dict(d):
        return ModelConfig(**{**d, "encoder_widths": tuple(d["encoder_widths"])})


class Encoder(Layer):
    """Stride-2 stem plus four downsampling residual stages producing
    features at strides 4/8/16/32, each reduced to the bundle width."""

    def __init__(self, rng, config, dtype=DEFAULT_DTYPE):
        super().__init__()
        w1, w2, w3, w4 = config.encoder_widths
        c0 = config.rfb_channels
        self.stem = ConvBlock(rng, 3, w1, 3, stride=2, padding=1, dtype=dtype)
        self.stages = [
            ResidualStage(rng, w1, w1, downsample=True, dtype=dtype),
            ResidualStage(rng, w1, w2, downsample=True, dtype=dtype),
            ResidualStage(rng, w2, w3, downsample=True, dtype=dtype),
            ResidualStage(rng, w3, w4, downsample=True, dtype=dtype),
        ]
        self.reducers = [RfbBlock(rng, w, c0, dtype=dtype) for w in (w1, w2, w3, w4)]

    def forward(self, image):
        x = self.stem(image)
        bundle = []
        for stage, reduce in zip(self.stages, self.reducers):
            x = stage(x)
            bundle.append(reduce(x))
        return tuple(bundle)


class Decoder(Layer):
    """Vanilla decoder: D4 is the coarsest stream unchanged; each finer level
    upscales the previous decoder output by a stride-2 transposed conv and
    mixes it with the same-scale bundle feature through a 3x3 conv."""

    def __init__(self, rng, channels, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.up = [
            ConvBlock(rng, channels, channels, 4, stride=2, padding=1, transpose=True, dtype=dtype)
            for _ in range(3)
        ]
        self.mix = [
            ConvBlock(rng, 2 * channels, channels, 3, padding=1, dtype=dtype)
            for _ in range(3)
        ]

    def forward(self, bundle):
        x1, x2, x3, x4 = bundle
        decoded = [x4]
        for step, skip in enumerate((x3, x2, x1)):
            upper = self.up[step](decoded[-1])
            decoded.append(self.mix[step](concat_channels([upper, skip])))
        return decoded  # [D4, D3, D2, D1]


FOREGROUND_PRIOR = 0.1


class SupervisionHeads(Layer):
    """1x1 conv to one channel, bilinear upscale to ground-truth size, then
    sigmoid; one probability map per decoder level.

    Head biases start at the foreground-prior logit so initial predictions
    match the class imbalance instead of 0.5, which substantially speeds up
    early training on sparse masks."""

    def __init__(self, rng, channels, out_size, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.out_size = out_size
        self.convs = [
            ConvBlock(rng, channels, 1, 1, act="linear", norm=False, dtype=dtype)
            for _ in range(4)
        ]
        prior_logit = float(np.log(FOREGROUND_PRIOR / (1.0 - FOREGROUND_PRIOR)))
        for conv in self.convs:
            conv.bias.data[:] = prior_logit

    def forward(self, decoded):
        maps = []
        for conv, d in zip(self.convs, decoded):
            logits = conv(d)
            maps.append(sigmoid(resize_bilinear(logits, self.out_size, self.out_size)))
        return maps  # [P4, P3, P2, P1]


class SegmentationModel(Layer):
    """Encoder -> stacked fusion modules -> decoder -> supervision heads."""

    def __init__(self, config, dtype=DEFAULT_DTYPE, rng=None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.config = config
        self.encoder = Encoder(rng, config, dtype=dtype)
        self.modules = [
            GmsrfModule(rng, config.rfb_channels, config.growth,
                        config.layers_per_module, config.se_reduction, dtype=dtype)
            for _ in range(config.num_modules)
        ]
        self.decoder = Decoder(rng, config.rfb_channels, dtype=dtype)
        self.heads = SupervisionHeads(rng, config.rfb_channels, config.input_size, dtype=dtype)

    def forward(self, image):
        n, c, h, w = image.shape
        if c != 3 or h != self.config.input_size or w != self.config.input_size:
            raise ShapeError(
                f"model expects (N, 3, {self.config.input_size}, {self.config.input_size}), got {image.shape}"
            )
        bundle = self.encoder(image)
        for module in self.modules:
            bundle = module(bundle)
        return self.heads(self.decoder(bundle))


def build_model(config, dtype=DEFAULT_DTYPE):
    return SegmentationModel(config, dtype=dtype)


# -- checkpoint persistence -----------------------------------------------------
#
# layout: magic "GMSRF1" | uint32 LE header length | header JSON
#         | payload (raw little-endian float32 in index order)
#         | uint32 LE CRC-32 of the payload
# header: {"config": {...}, "tensors": {name: {"shape": [...], "offset": n}}}


def _named_state(model):
    state = dict(model.named_parameters())
    for name, buf in model.named_buffers():
        state[name] = buf
    return state


def save_checkpoint(model, path):
    state = _named_state(model)
    index = {}
    chunks = []
    offset = 0
    for name, value in state.items():
        arr = value.data if isinstance(value, Tensor) else value
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"config": model.config.to_dict(), "tensors": index}).encode()

    blob = b"".join([
        CHECKPOINT_MAGIC,
        len(header).to_bytes(4, "little"),
        header,
        payload,
        (zlib.crc32(payload) & 0xFFFFFFFF).to_bytes(4, "little"),
    ])
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, dtype=DEFAULT_DTYPE):
    """Rebuild a model from a checkpoint file; verifies magic, CRC, and the
    agreement between the stored config and every stored tensor shape."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:6]!r}")
    pos = len(CHECKPOINT_MAGIC)
    if len(blob) < pos + 4:
        raise CorruptionError("checkpoint truncated in header length")
    header_len = int.from_bytes(blob[pos : pos + 4], "little")
    pos += 4
    if len(blob) < pos + header_len:
        raise CorruptionError("checkpoint truncated in header")
    try:
        header = json.loads(blob[pos : pos + header_len].decode())
        config = ModelConfig.from_dict(header["config"])
        index = header["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"unreadable checkpoint header: {e}") from e
    pos += header_len

    payload_len = sum(int(np.prod(t["shape"])) * 4 for t in index.values())
    if len(blob) < pos + payload_len + 4:
        raise CorruptionError("checkpoint truncated in payload")
    payload = blob[pos : pos + payload_len]
    stored_crc = int.from_bytes(blob[pos + payload_len : pos + payload_len + 4], "little")
    if (zlib.crc32(payload) & 0xFFFFFFFF) != stored_crc:
        raise CorruptionError("checkpoint payload CRC mismatch")

    model = build_model(config, dtype=dtype)
    state = _named_state(model)
    if set(state) != set(index):
        missing = set(state) ^ set(index)
        raise FormatError(f"checkpoint tensor index does not match config; differs on {sorted(missing)[:5]}")
    for name, entry in index.items():
        target = state[name]
        arr = target.data if isinstance(target, Tensor) else target
        shape = tuple(entry["shape"])
        if shape != arr.shape:
            raise FormatError(f"tensor {name} has shape {shape}, config implies {arr.shape}")
        start = entry["offset"]
        count = int(np.prod(shape))
        values = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arr[...] = values.reshape(shape).astype(arr.dtype)
    return model
