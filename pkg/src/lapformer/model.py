"""Encoder + decoder assembly, named variants, config text files, checkpoints."""

from __future__ import annotations

import dataclasses
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .decoder import ABLATIONS, DecoderConfig, DecoderState, LAPDecoder
from .encoder import EncoderConfig, MixTransformer, mit_config
from .errors import CheckpointError, ConfigError

# variant -> (MiT backbone, decoder width)
VARIANTS = {"S": ("b1", 256), "M": ("b2", 256), "L": ("b3", 256)}


@dataclass
class ModelConfig:
    variant: str = "S"
    encoder: EncoderConfig = field(default_factory=lambda: mit_config("b1"))
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    input_size: tuple[int, int] = (352, 352)

    def validate(self) -> None:
        if self.variant not in (*VARIANTS, "custom"):
            raise ConfigError(f"variant must be one of S, M, L, custom; got {self.variant!r}")
        self.encoder.validate()
        self.decoder.validate()
        if tuple(self.decoder.in_channels) != tuple(self.encoder.stage_channels):
            raise ConfigError(
                f"decoder.in_channels {list(self.decoder.in_channels)} != "
                f"encoder.stage_channels {list(self.encoder.stage_channels)}")
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {h}x{w}")


def variant_config(variant: str = "S", ablation: str | None = None, **decoder_overrides) -> ModelConfig:
    variant = variant.upper()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    backbone, embed = VARIANTS[variant]
    enc = mit_config(backbone)
    if ablation and ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}")
    flags = dict(ABLATIONS[ablation]) if ablation else {}
    flags.update(decoder_overrides)
    flags.setdefault("embed_dim", embed)
    dec = DecoderConfig(in_channels=enc.stage_channels, **flags)
    name = variant if (ablation in (None, "lapformer") and not decoder_overrides) else "custom"
    return ModelConfig(variant=name, encoder=enc, decoder=dec)


# ---------------------------------------------------------------------------
# config text format: one ``dotted.key value...`` per line, '#' comments

def config_to_text(config: ModelConfig) -> str:
    lines = [f"variant {config.variant}", "input_size " + " ".join(map(str, config.input_size))]
    for prefix, sub in (("encoder", config.encoder), ("decoder", config.decoder)):
        for f in dataclasses.fields(sub):
            lines.append(f"{prefix}.{f.name} {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return " ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_lines(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ConfigError(f"config line {lineno}: expected 'key value', got {raw!r}")
        out[parts[0]] = parts[1]
    return out


def _coerce(template, text: str, key: str):
    try:
        if isinstance(template, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return low in ("true", "1")
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, tuple):
            items = text.split()
            kind = type(template[0]) if template else int
            return tuple(kind(x) for x in items)
        return text.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def config_from_dict(values: dict[str, str], base: ModelConfig | None = None) -> ModelConfig:
    """Apply flat dotted overrides on top of ``base`` (or the variant named in
    ``values``) and return a validated config."""
    if base is None:
        base = variant_config(values.get("variant", "S")) if values.get("variant", "S") != "custom" \
            else variant_config("S")
    top = {"variant": base.variant, "input_size": base.input_size}
    enc = dataclasses.asdict(base.encoder)
    dec = dataclasses.asdict(base.decoder)
    for key, text in values.items():
        if key in top:
            top[key] = _coerce(top[key], text, key)
            continue
        section, _, name = key.partition(".")
        target = {"encoder": enc, "decoder": dec}.get(section)
        if target is None or name not in target:
            raise ConfigError(f"unknown config key {key!r}")
        target[name] = _coerce(target[name], text, key)
    cfg = ModelConfig(variant=top["variant"], encoder=EncoderConfig(**enc),
                      decoder=DecoderConfig(**dec), input_size=tuple(top["input_size"]))
    cfg.validate()
    return cfg


def config_from_text(text: str, base: ModelConfig | None = None) -> ModelConfig:
    return config_from_dict(parse_config_lines(text), base)


# ---------------------------------------------------------------------------

class LAPFormer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = MixTransformer(config.encoder)
        self.decoder = LAPDecoder(config.decoder)

    def forward_state(self, image: torch.Tensor) -> DecoderState:
        pyramid = self.encoder(image)
        return self.decoder.forward_state(pyramid.levels, tuple(image.shape[-2:]))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.forward_state(image).logits


def build_model(config: ModelConfig, seed: int = 0) -> LAPFormer:
    config.validate()
    devices = []
    with torch.random.fork_rng(devices=devices):
        torch.manual_seed(seed)
        model = LAPFormer(config)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic      8 bytes  b"LAPFCKPT"
#   version    u32
#   metadata   u32 count, then per entry: u32 len + utf-8 key, u32 len + utf-8 value
#   config     u32 len + utf-8 config text
#   tensors    u32 count, then per entry: u32 len + utf-8 path, u8 rank,
#              rank x u32 dims, raw little-endian float32 data
#
# all integers little-endian.

MAGIC = b"LAPFCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = VERSION


def _put_str(buf, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    buf.write(struct.pack("<I", len(ckpt.metadata)))
    for k in sorted(ckpt.metadata):
        _put_str(buf, k)
        _put_str(buf, str(ckpt.metadata[k]))
    _put_str(buf, config_to_text(ckpt.config))
    buf.write(struct.pack("<I", len(ckpt.params)))
    for path, arr in ckpt.params.items():
        arr = np.array(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        _put_str(buf, path)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"invalid utf-8 string ending at offset {self.pos}") from None


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise CheckpointError("not a lapformer checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    metadata = {}
    for _ in range(r.u32()):
        k = r.string()
        metadata[k] = r.string()
    try:
        config = config_from_text(r.string())
    except ConfigError as e:
        raise CheckpointError(f"checkpoint carries an invalid config: {e}") from None
    params = {}
    for _ in range(r.u32()):
        path = r.string()
        rank = struct.unpack("<B", r.take(1))[0]
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        if path in params:
            raise CheckpointError(f"duplicate parameter path {path!r}")
        params[path] = arr.copy()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last record")
    return Checkpoint(config, params, metadata, version)


def model_to_checkpoint(model: LAPFormer, metadata: dict | None = None) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()}
    return Checkpoint(model.config, params, {k: str(v) for k, v in (metadata or {}).items()})


def save_checkpoint(model: LAPFormer, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    data = encode_checkpoint(model_to_checkpoint(model, metadata))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def state_diff(expected: dict[str, tuple], got: dict[str, tuple]) -> list[str]:
    """Human-readable differences between two path -> shape maps."""
    lines = []
    for k in expected:
        if k not in got:
            lines.append(f"missing {k} {list(expected[k])}")
        elif tuple(expected[k]) != tuple(got[k]):
            lines.append(f"shape {k}: model {list(expected[k])} vs file {list(got[k])}")
    lines += [f"unexpected {k} {list(got[k])}" for k in got if k not in expected]
    return lines


def load_state(model: nn.Module, params: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    diff = state_diff({k: tuple(v.shape) for k, v in state.items()},
                      {k: tuple(v.shape) for k, v in params.items()})
    if diff:
        raise CheckpointError("parameter mismatch:\n  " + "\n  ".join(diff))
    new_state = {k: torch.from_numpy(np.asarray(params[k])).to(state[k].dtype) for k in state}
    model.load_state_dict(new_state)


def load_checkpoint(path, config: ModelConfig | None = None) -> LAPFormer:
    """Load a model; with ``config`` the file must match that architecture."""
    ckpt = read_checkpoint(path)
    model = LAPFormer(config or ckpt.config)
    load_state(model, ckpt.params)
    model.checkpoint_metadata = ckpt.metadata
    return model


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return decode_checkpoint(path.read_bytes())


# ---------------------------------------------------------------------------
# third-party encoder weights

def read_keymap(path) -> dict[str, str]:
    """Key-translation file: one ``src dst`` pair per line, '#' comments."""
    mapping = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected 'src dst', got {raw!r}")
        mapping[parts[0]] = parts[1]
    return mapping


def load_pretrained_encoder(model: LAPFormer, weights, keymap=None) -> list[str]:
    """Load a name -> array map (``.npz`` or a torch state dict file) into the
    encoder. Names are translated through ``keymap`` (a path or dict) and must
    then match ``encoder.*`` paths with the leading ``encoder.`` dropped.
    Returns the source keys that were ignored."""
    if isinstance(weights, (str, Path)):
        p = Path(weights)
        if p.suffix == ".npz":
            with np.load(p) as z:
                weights = {k: z[k] for k in z.files}
        else:
            weights = torch.load(p, map_location="cpu", weights_only=True)
            weights = weights.get("state_dict", weights)
    if isinstance(keymap, (str, Path)):
        keymap = read_keymap(keymap)
    keymap = keymap or {}
    target = model.encoder.state_dict()
    translated, ignored = {}, []
    for k, v in weights.items():
        dst = keymap.get(k, k)
        if dst.startswith("encoder."):
            dst = dst[len("encoder."):]
        if dst in target:
            translated[dst] = np.asarray(v.detach().cpu() if torch.is_tensor(v) else v)
        else:
            ignored.append(k)
    missing = [k for k in target if k not in translated and not k.endswith("num_batches_tracked")]
    if missing:
        raise CheckpointError("pretrained weights miss encoder paths:\n  " + "\n  ".join(missing))
    for k, v in translated.items():
        if tuple(v.shape) != tuple(target[k].shape):
            raise CheckpointError(f"shape {k}: model {list(target[k].shape)} vs file {list(v.shape)}")
    model.encoder.load_state_dict(
        {k: torch.from_numpy(np.array(translated.get(k, target[k]))).to(target[k].dtype)
         for k in target})
    return ignored
