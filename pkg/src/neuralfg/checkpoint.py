"""Binary checkpoint format.

Layout (all little-endian)::

    b"NFG1"  u32 version
    u8 variant  u32 n_risks  u32 n_features  f64 t_scale
    f64[n_features] mean  f64[n_features] std
    net embedding
    u32 n_monotonic  net * n_monotonic
    u8 has_balancing  [net balancing]

    net := u32 n_in  u32 n_layers  u8 final_activation  u8 positive  f64 dropout
           (u32 out  u32 in  f64[out*in] weights  f64[out] biases) * n_layers
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .layers import FINAL_ACTIVATIONS, DenseLayer, Mlp, MlpSpec, PositiveDenseLayer
from .model import VARIANTS, NfgModel

MAGIC = b"NFG1"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class UnsupportedVersionError(CheckpointError):
    pass


def _write_net(buf: io.BytesIO, net: Mlp) -> None:
    spec = net.spec
    buf.write(struct.pack("<IIBBd", spec.widths[0], len(net.layers),
                          FINAL_ACTIVATIONS.index(spec.final_activation), int(spec.positive),
                          spec.dropout_rate))
    for layer in net.layers:
        w = layer.raw_weights if spec.positive else layer.weights
        buf.write(struct.pack("<II", *w.shape))
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())


def dumps(model: NfgModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<BIId", VARIANTS.index(model.variant), model.n_risks,
                          model.n_features, model.t_scale))
    buf.write(np.asarray(model.mean, dtype="<f8").tobytes())
    buf.write(np.asarray(model.std, dtype="<f8").tobytes())
    _write_net(buf, model.embedding)
    buf.write(struct.pack("<I", len(model.monotonic)))
    for net in model.monotonic:
        _write_net(buf, net)
    buf.write(struct.pack("<B", model.balancing is not None))
    if model.balancing is not None:
        _write_net(buf, model.balancing)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated checkpoint", self.pos)
        out = struct.unpack_from("<" + fmt, self.data, self.pos)
        self.pos += size
        return out

    def floats(self, count: int) -> np.ndarray:
        size = 8 * count
        if self.pos + size > len(self.data):
            raise CheckpointError(f"truncated checkpoint: expected {count} floats", self.pos)
        out = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos).astype(np.float64)
        self.pos += size
        return out


def _read_net(rd: _Reader) -> Mlp:
    start = rd.pos
    n_in, n_layers, act, positive, dropout = rd.unpack("IIBBd")
    if act >= len(FINAL_ACTIVATIONS) or positive > 1:
        raise CheckpointError("invalid network header", start)
    widths = [n_in]
    layers = []
    for _ in range(n_layers):
        at = rd.pos
        n_out, n_prev = rd.unpack("II")
        if n_prev != widths[-1]:
            raise CheckpointError(f"layer input width {n_prev} does not match previous width "
                                  f"{widths[-1]}", at)
        w = rd.floats(n_out * n_prev).reshape(n_out, n_prev)
        b = rd.floats(n_out)
        layers.append(PositiveDenseLayer(w, b) if positive else DenseLayer(w, b))
        widths.append(n_out)
    try:
        spec = MlpSpec(widths, dropout_rate=dropout, final_activation=FINAL_ACTIVATIONS[act],
                       positive=bool(positive))
    except ValueError as exc:
        raise CheckpointError(str(exc), start) from None
    return Mlp(spec, layers)


def loads(data: bytes) -> NfgModel:
    rd = _Reader(data)
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic bytes, not an NFG checkpoint", 0)
    rd.pos = 4
    (version,) = rd.unpack("I")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    at = rd.pos
    variant_code, n_risks, n_features, t_scale = rd.unpack("BIId")
    if variant_code >= len(VARIANTS):
        raise CheckpointError(f"unknown variant code {variant_code}", at)
    variant = VARIANTS[variant_code]
    mean = rd.floats(n_features)
    std = rd.floats(n_features)
    embedding = _read_net(rd)
    at = rd.pos
    (n_mono,) = rd.unpack("I")
    monotonic = [_read_net(rd) for _ in range(n_mono)]
    expected = 1 if variant == "monofg" else n_risks
    if n_mono != expected:
        raise CheckpointError(f"declared {n_risks} risks but found {n_mono} monotonic networks", at)
    heads = {net.spec.widths[-1] for net in monotonic}
    if heads != ({n_risks} if variant == "monofg" else {1}):
        raise CheckpointError(f"monotonic output widths {sorted(heads)} inconsistent with "
                              f"{n_risks} risks", at)
    at = rd.pos
    (has_bal,) = rd.unpack("B")
    balancing = _read_net(rd) if has_bal else None
    if balancing is not None and balancing.spec.widths[-1] != n_risks:
        raise CheckpointError(f"balancing head has {balancing.spec.widths[-1]} outputs, "
                              f"declared {n_risks} risks", at)
    if embedding.spec.widths[0] != n_features:
        raise CheckpointError("embedding input width disagrees with the feature count", at)
    if rd.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint", rd.pos)
    try:
        return NfgModel(embedding, monotonic, balancing, variant, t_scale, mean, std)
    except ValueError as exc:
        raise CheckpointError(str(exc), at) from None


def save(model: NfgModel, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> NfgModel:
    return loads(Path(path).read_bytes())
