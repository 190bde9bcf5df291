"""Dense FP32 tensors with a precision tag, quantization, init and I/O.

A tensor tagged BF16 or FP16 still stores FP32 values; the tag asserts
that every element is exactly representable in the tagged format, so
FP32 kernels operating on it reproduce the 16-bit-input / FP32-accumulator
arithmetic bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .numerics import (
    BF16_SPEC,
    FP16_SPEC,
    FP32_SPEC,
    FormatSpec,
    RoundingMode,
    quantize_array,
)

__all__ = [
    "Precision",
    "Tensor",
    "ShapeError",
    "TensorIOError",
    "BadMagicError",
    "UnknownVersionError",
    "TruncatedPayloadError",
    "RngStream",
    "Zeros",
    "Uniform",
    "HeNormal",
    "XavierUniform",
    "QuantPolicy",
    "LayerClassRule",
    "LAYER_CLASSES",
    "quantize_tensor",
    "init_tensor",
    "dump_tensor",
    "load_tensor",
    "elementwise_binary",
]


class Precision(Enum):
    FP32 = "fp32"
    BF16 = "bf16"
    FP16 = "fp16"

    @property
    def spec(self) -> FormatSpec:
        return {
            Precision.FP32: FP32_SPEC,
            Precision.BF16: BF16_SPEC,
            Precision.FP16: FP16_SPEC,
        }[self]


class ShapeError(ValueError):
    pass


class TensorIOError(IOError):
    pass


class BadMagicError(TensorIOError):
    pass


class UnknownVersionError(TensorIOError):
    pass


class TruncatedPayloadError(TensorIOError):
    pass


@dataclass
class Tensor:
    """Row-major FP32 array plus the precision its values are exact in."""

    data: np.ndarray
    tag: Precision = Precision.FP32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.tag)

    def reshape(self, *shape) -> "Tensor":
        return Tensor(self.data.reshape(*shape).copy(), self.tag)


def quantize_tensor(t: Tensor, target: Precision,
                    mode: RoundingMode = RoundingMode.NEAREST_EVEN) -> Tensor:
    """Elementwise projection onto ``target``; shape preserved, idempotent."""
    if target is Precision.FP32:
        return Tensor(t.data.copy(), Precision.FP32)
    return Tensor(quantize_array(t.data, target.spec, mode), target)


# ---------------------------------------------------------------------------
# deterministic RNG
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream: same (seed, stream) is reproducible
    on every platform, independent of draw order elsewhere."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(
            np.random.Philox(key=[self.seed & _MASK64, self.stream & _MASK64]))

    def child(self, index: int) -> "RngStream":
        mixed = (self.stream * 0x9E3779B97F4A7C15 + index + 1) & _MASK64
        return RngStream(self.seed, mixed)


# ---------------------------------------------------------------------------
# initialization schemes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Zeros:
    pass


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("Uniform requires low < high")


@dataclass(frozen=True)
class HeNormal:
    fan_in: int

    def __post_init__(self):
        if self.fan_in <= 0:
            raise ValueError("HeNormal requires positive fan_in")


@dataclass(frozen=True)
class XavierUniform:
    fan_in: int
    fan_out: int

    def __post_init__(self):
        if self.fan_in <= 0 or self.fan_out <= 0:
            raise ValueError("XavierUniform requires positive fans")


def init_tensor(shape, scheme, rng: RngStream) -> Tensor:
    """Deterministic FP32 initialization from a counter-based stream."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"invalid shape {shape}")
    if isinstance(scheme, Zeros):
        return Tensor(np.zeros(shape, np.float32))
    gen = rng.generator()
    if isinstance(scheme, Uniform):
        data = gen.uniform(scheme.low, scheme.high, size=shape)
    elif isinstance(scheme, HeNormal):
        std = np.sqrt(2.0 / scheme.fan_in)
        data = gen.normal(0.0, std, size=shape)
    elif isinstance(scheme, XavierUniform):
        limit = np.sqrt(6.0 / (scheme.fan_in + scheme.fan_out))
        data = gen.uniform(-limit, limit, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(np.float32))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"BF16EMU1"
_VERSION = 1
_TAG_CODES = {Precision.FP32: 0, Precision.BF16: 1, Precision.FP16: 2}
_TAG_FROM_CODE = {v: k for k, v in _TAG_CODES.items()}


def dump_tensor(t: Tensor, path) -> None:
    """Write a tensor as magic, version u32, tag u8, rank u32, extents
    u64[rank], then raw little-endian FP32 payload."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IBI", _VERSION, _TAG_CODES[t.tag],
                             t.data.ndim))
        fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        fh.write(t.data.astype("<f4").tobytes())


def load_tensor(path) -> Tensor:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(_MAGIC) or raw[: len(_MAGIC)] != _MAGIC:
        raise BadMagicError(f"{path}: not a tensor dump (bad magic)")
    off = len(_MAGIC)
    head = struct.calcsize("<IBI")
    if len(raw) < off + head:
        raise TruncatedPayloadError(f"{path}: truncated header")
    version, tag_code, rank = struct.unpack_from("<IBI", raw, off)
    if version != _VERSION:
        raise UnknownVersionError(f"{path}: unknown format version {version}")
    if tag_code not in _TAG_FROM_CODE:
        raise TensorIOError(f"{path}: unknown precision tag {tag_code}")
    off += head
    if len(raw) < off + 8 * rank:
        raise TruncatedPayloadError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(raw) != off + 4 * count:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(raw) - off} bytes, expected {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", offset=off).reshape(shape).copy()
    return Tensor(data, _TAG_FROM_CODE[tag_code])


# ---------------------------------------------------------------------------
# elementwise arithmetic (always FP32)
# ---------------------------------------------------------------------------

_BINARY_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise_binary(op: str, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise shapes differ: {a.shape} vs {b.shape}")
    try:
        fn = _BINARY_OPS[op.lower()]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return Tensor(fn(a.data, b.data, dtype=np.float32))


# ---------------------------------------------------------------------------
# quantization policy
# ---------------------------------------------------------------------------

LAYER_CLASSES = (
    "gemm", "conv", "batchnorm", "activation", "pool", "dropout",
    "eltwise", "lstm",
)


@dataclass(frozen=True)
class LayerClassRule:
    quantize_weights: bool = True
    quantize_activations: bool = True
    quantize_error_grads: bool = True


def _default_rules() -> dict[str, LayerClassRule]:
    rules = {name: LayerClassRule() for name in LAYER_CLASSES}
    # Batchnorm keeps everything except its input activations in full
    # precision (scale/shift are affine parameters, not GEMM weights).
    rules["batchnorm"] = LayerClassRule(
        quantize_weights=False, quantize_activations=True,
        quantize_error_grads=False)
    return rules


@dataclass
class QuantPolicy:
    """Which tensors get quantized at layer boundaries, and how."""

    precision: Precision = Precision.FP32
    mode: RoundingMode = RoundingMode.NEAREST_EVEN
    rules: dict[str, LayerClassRule] = field(default_factory=_default_rules)

    def __post_init__(self):
        unknown = set(self.rules) - set(LAYER_CLASSES)
        if unknown:
            raise ValueError(f"unknown layer classes in policy: {unknown}")
        for name in LAYER_CLASSES:
            self.rules.setdefault(name, LayerClassRule())

    def rule(self, layer_class: str) -> LayerClassRule:
        return self.rules[layer_class]

    @property
    def identity(self) -> bool:
        return self.precision is Precision.FP32

    def with_rule(self, layer_class: str, **flags) -> "QuantPolicy":
        if layer_class not in LAYER_CLASSES:
            raise ValueError(f"unknown layer class {layer_class!r}")
        rules = dict(self.rules)
        rules[layer_class] = replace(rules[layer_class], **flags)
        return QuantPolicy(self.precision, self.mode, rules)

    @classmethod
    def fp32(cls) -> "QuantPolicy":
        return cls()

    @classmethod
    def bf16(cls, mode: RoundingMode = RoundingMode.NEAREST_EVEN) -> "QuantPolicy":
        return cls(Precision.BF16, mode)

    @classmethod
    def fp16(cls, mode: RoundingMode = RoundingMode.NEAREST_EVEN) -> "QuantPolicy":
        return cls(Precision.FP16, mode)
