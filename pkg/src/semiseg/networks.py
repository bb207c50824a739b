"""U-Net and residual U-Net built on :mod:`semiseg.autodiff`."""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

UPSAMPLE_MODES = ("transposed_conv", "nearest_plus_conv")

CHECKPOINT_MAGIC = b"SEMISEGCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 3
    base_filters: int = 8
    in_channels: int = 1
    num_classes: int = 4
    residual: bool = True
    upsample_mode: str = "transposed_conv"
    dtype: str = "float64"

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ValueError(f"upsample_mode must be one of {UPSAMPLE_MODES}, got {self.upsample_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def filters(self, level: int) -> int:
        return self.base_filters * 2 ** level

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


class NetworkInstance:
    """Parameters of a built network plus its forward pass.

    Parameters live in an insertion-ordered dict; names encode the position
    in the topology (``enc0.conv1.w``, ``up2.w``, ``head.b`` ...).
    """

    def __init__(self, config: NetworkConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    @property
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    @property
    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def check_input(self, shape: tuple[int, ...]) -> None:
        if len(shape) != 4 or shape[1] != self.config.in_channels:
            raise ad.ShapeError(
                f"expected input (B, {self.config.in_channels}, H, W), got {tuple(shape)}")
        m = 2 ** self.config.depth
        if shape[2] % m or shape[3] % m:
            raise ad.ShapeError(
                f"spatial dims {shape[2]}x{shape[3]} not divisible by 2**depth = {m}")

    def _block(self, prefix: str, x: Tensor) -> Tensor:
        h = ad.relu(ad.conv2d(x, self[f"{prefix}.conv1.w"], self[f"{prefix}.conv1.b"], padding=1))
        h = ad.conv2d(h, self[f"{prefix}.conv2.w"], self[f"{prefix}.conv2.b"], padding=1)
        if self.config.residual:
            if f"{prefix}.proj.w" in self.params:
                skip = ad.conv2d(x, self[f"{prefix}.proj.w"], self[f"{prefix}.proj.b"])
            else:
                skip = x
            # identity mapping: no activation after the sum, so the skip path stays linear
            return ad.add(h, skip)
        return ad.relu(h)

    def _upsample(self, level: int, x: Tensor) -> Tensor:
        w, b = self[f"up{level}.w"], self[f"up{level}.b"]
        if self.config.upsample_mode == "transposed_conv":
            return ad.transposed_conv2d(x, w, b, stride=2)
        # nearest x2 then a 2x2 conv padded bottom/right to keep the size
        x = ad.upsample_nearest(x, 2)
        return ad.conv2d(ad.pad2d(x, 0, 1, 0, 1), w, b)

    def forward(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        self.check_input(x.shape)
        dtype = np.dtype(self.config.dtype)
        if x.dtype != dtype:
            x = Tensor(x.data.astype(dtype))
        skips = []
        for level in range(self.config.depth):
            x = self._block(f"enc{level}", x)
            skips.append(x)
            x = ad.maxpool2d(x, 2, 2)
        x = self._block("bottleneck", x)
        for level in reversed(range(self.config.depth)):
            x = self._upsample(level, x)
            x = ad.concat_channels(skips[level], x)
            x = self._block(f"dec{level}", x)
        return ad.conv2d(x, self["head.w"], self["head.b"])

    __call__ = forward

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise CheckpointError("parameter names do not match the network topology")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise CheckpointError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.tensor.data = state[name].astype(p.data.dtype, copy=True)


def _param_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter in creation order."""
    out: list[tuple[str, tuple[int, ...], int]] = []

    def conv(name, cin, cout, k):
        out.append((f"{name}.w", (cout, cin, k, k), cin * k * k))
        out.append((f"{name}.b", (cout,), cin * k * k))

    def block(prefix, cin, cout):
        conv(f"{prefix}.conv1", cin, cout, 3)
        conv(f"{prefix}.conv2", cout, cout, 3)
        if config.residual and cin != cout:
            conv(f"{prefix}.proj", cin, cout, 1)

    cin = config.in_channels
    for level in range(config.depth):
        block(f"enc{level}", cin, config.filters(level))
        cin = config.filters(level)
    block("bottleneck", cin, config.filters(config.depth))
    for level in reversed(range(config.depth)):
        f_in, f_out = config.filters(level + 1), config.filters(level)
        if config.upsample_mode == "transposed_conv":
            out.append((f"up{level}.w", (f_in, f_out, 2, 2), f_in))
        else:
            out.append((f"up{level}.w", (f_out, f_in, 2, 2), f_in * 4))
        out.append((f"up{level}.b", (f_out,), f_in))
        block(f"dec{level}", 2 * f_out, f_out)
    conv("head", config.filters(0), config.num_classes, 1)
    return out


def build_network(config: NetworkConfig, seed: int = 0) -> NetworkInstance:
    """He-uniform weights from a seeded generator, zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params: dict[str, Parameter] = {}
    # without normalisation layers every identity add grows the activation
    # variance; scaling the last conv of each residual branch by L**-0.5
    # (L = number of blocks, the Fixup rule for two-layer branches) keeps
    # the initial forward pass bounded while every weight still gets gradient
    residual_scale = (2 * config.depth + 1) ** -0.5
    for name, shape, fan_in in _param_shapes(config):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
            if config.residual and name.endswith(".conv2.w"):
                data *= residual_scale
        params[name] = Parameter(name, data.astype(dtype))
    return NetworkInstance(config, params)


def count_upsampling_stages(net: NetworkInstance) -> int:
    return sum(1 for n in net.params if n.startswith("up") and n.endswith(".w"))


def count_pooling_stages(net: NetworkInstance) -> int:
    return sum(1 for n in net.params if n.startswith("enc") and n.endswith(".conv1.w"))


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic | u32 version | u32 header length | JSON header | blobs
# The header lists each parameter's name, shape, byte offset and length
# relative to the start of the blob section, plus a CRC32 over all blobs.


def save_checkpoint(net: NetworkInstance, path: str | os.PathLike, extra: dict | None = None) -> None:
    blobs = []
    entries = []
    offset = 0
    for name, p in net.params.items():
        raw = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "dtype": p.data.dtype.name,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "parameters": entries,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)


_HEADER_KEYS = ("format_version", "config", "parameters", "payload_bytes", "payload_crc32")


def read_checkpoint_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)[0]


def _read_header(fh) -> tuple[dict, int]:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("not a semiseg checkpoint (bad magic)")
    fixed = fh.read(8)
    if len(fixed) != 8:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<II", fixed)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    raw = fh.read(hlen)
    if len(raw) != hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    missing = [k for k in _HEADER_KEYS if not isinstance(header, dict) or k not in header]
    if missing:
        raise CheckpointError(f"corrupt checkpoint header: missing {missing}")
    return header, len(CHECKPOINT_MAGIC) + 8 + hlen


def load_checkpoint(path: str | os.PathLike) -> NetworkInstance:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh)
        payload = fh.read()
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError("format version mismatch between preamble and header")
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"truncated checkpoint: expected {header['payload_bytes']} payload bytes, found {len(payload)}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError("checkpoint payload checksum mismatch")
    try:
        config = NetworkConfig.from_dict(header["config"])
        config.validate()
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid network config in checkpoint: {exc}") from None
    net = build_network(config, seed=0)
    state = {}
    for e in header["parameters"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=dt)
        if arr.size != int(np.prod(e["shape"])):
            raise CheckpointError(f"{e['name']}: blob size does not match shape {e['shape']}")
        state[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    net.load_state(state)
    return net
