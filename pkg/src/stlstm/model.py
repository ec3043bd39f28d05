"""Network assembly: the recurrent spatiotemporal model and the 2D-CNN baseline.

The recurrent model consumes a 3-frame clip and stacks four ConvLSTM layers
(each followed by batch normalization and returning full sequences), one
temporally-collapsing 3D convolution, then a dense regression head. The
baseline consumes only the newest frame of each clip through a strided 2D
convolution stack with the same head, so the two models share data and
evaluation pipelines.

Models regress the steering angle in internal units of 100 degrees
(LABEL_SCALE) to keep the squared-error loss well conditioned; callers
convert with `predictions_to_degrees` / `degrees_to_labels`.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    HeaderMismatchError,
    MagicMismatchError,
    TruncatedFileError,
    UsageError,
    VersionMismatchError,
)
from .layers import (
    BatchNormLayer,
    Conv2DLayer,
    Conv3DLayer,
    ConvLSTMLayer,
    DenseLayer,
    DropoutLayer,
    FlattenLayer,
    LeakyReLULayer,
)

LABEL_SCALE = 0.01          # degrees -> internal regression units
DEG_PER_UNIT = 100.0

MODEL_KINDS = ("spatiotemporal_lstm", "baseline_cnn2d")

# Baseline 2D-CNN stack: (filters, kernel, stride) per layer, same padding.
BASELINE_CONV_STACK = ((16, 8, 4), (32, 5, 2), (48, 5, 2), (64, 3, 1))


def degrees_to_labels(deg):
    return np.asarray(deg, np.float32) * np.float32(LABEL_SCALE)


def predictions_to_degrees(pred):
    return np.asarray(pred) * pred.dtype.type(DEG_PER_UNIT)


@dataclass
class NetworkSpec:
    """Architecture description; the default values are the trained configuration."""

    input_shape: tuple = (3, 3, 32, 64)            # (T, C, H, W)
    conv_lstm_filters: tuple = (64, 32, 16, 8)
    conv_lstm_kernel: int = 3
    conv3d_filters: int = 3
    conv3d_kernel: int = 3
    dense_hidden: int = 512
    dropout_rate: float = 0.5
    leaky_slope: float = 0.2
    model_kind: str = "spatiotemporal_lstm"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv_lstm_filters = tuple(int(v) for v in self.conv_lstm_filters)
        if self.model_kind not in MODEL_KINDS:
            raise ConfigurationError(f"model_kind must be one of {MODEL_KINDS}")
        if len(self.input_shape) != 4 or any(v < 1 for v in self.input_shape):
            raise ConfigurationError(f"input_shape must be 4 positive extents, got {self.input_shape}")
        if any(f < 1 for f in self.conv_lstm_filters):
            raise ConfigurationError("all filter counts must be >= 1")
        if self.model_kind == "spatiotemporal_lstm" and self.input_shape[0] != self.conv3d_kernel:
            raise ConfigurationError(
                "temporal-valid 3D convolution needs clip length == conv3d kernel depth "
                f"({self.input_shape[0]} != {self.conv3d_kernel})")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigurationError("leaky_slope must lie in (0, 1)")

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "conv_lstm_filters": list(self.conv_lstm_filters),
            "conv_lstm_kernel": self.conv_lstm_kernel,
            "conv3d_filters": self.conv3d_filters,
            "conv3d_kernel": self.conv3d_kernel,
            "dense_hidden": self.dense_hidden,
            "dropout_rate": self.dropout_rate,
            "leaky_slope": self.leaky_slope,
            "model_kind": self.model_kind,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Model:
    """An ordered layer stack with batched forward/backward and named params."""

    def __init__(self, spec, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        self.spec = spec
        self.dtype = dtype
        t, c, h, w = spec.input_shape
        self.layers = []
        if spec.model_kind == "spatiotemporal_lstm":
            cin = c
            for idx, f in enumerate(spec.conv_lstm_filters, start=1):
                self.layers.append((f"clstm{idx}", ConvLSTMLayer(
                    cin, f, h, w, spec.conv_lstm_kernel, rng, dtype)))
                self.layers.append((f"bn{idx}", BatchNormLayer(f, dtype=dtype)))
                cin = f
            self.layers.append(("conv3d", Conv3DLayer(
                cin, spec.conv3d_filters, spec.conv3d_kernel, rng, dtype)))
            head_in = spec.conv3d_filters * h * w
        else:
            cin = c
            hh, ww = h, w
            for idx, (f, k, s) in enumerate(BASELINE_CONV_STACK, start=1):
                conv = Conv2DLayer(cin, f, k, s, rng, dtype)
                self.layers.append((f"conv{idx}", conv))
                self.layers.append((f"act{idx}", LeakyReLULayer(spec.leaky_slope)))
                hh, ww = conv.spec.out_extent(hh, 0), conv.spec.out_extent(ww, 1)
                cin = f
            head_in = cin * hh * ww
        self.layers.append(("flatten", FlattenLayer()))
        self.layers.append(("dense1", DenseLayer(head_in, spec.dense_hidden, rng, dtype)))
        self.layers.append(("head_act", LeakyReLULayer(spec.leaky_slope)))
        self.layers.append(("dropout", DropoutLayer(spec.dropout_rate)))
        self.layers.append(("dense2", DenseLayer(spec.dense_hidden, 1, rng, dtype)))
        self._fwd_mode = None

    # -- parameter plumbing ------------------------------------------------

    def named_params(self):
        """(qualified name, array) pairs in a fixed order; arrays are live."""
        for lname, layer in self.layers:
            for pname, arr in layer.params.items():
                yield f"{lname}.{pname}", arr

    def named_state(self):
        """Non-trained state tensors (batch-norm running statistics)."""
        for lname, layer in self.layers:
            if isinstance(layer, BatchNormLayer):
                for sname, arr in layer.running_stats.items():
                    yield f"{lname}.{sname}", arr

    def named_grads(self):
        for lname, layer in self.layers:
            for pname in layer.params:
                yield f"{lname}.{pname}", layer.grads[pname]

    def param_count(self):
        return sum(arr.size for _, arr in self.named_params())

    # -- forward / backward -------------------------------------------------

    def _to_internal(self, batch):
        batch = np.asarray(batch, self.dtype)
        t, c, h, w = self.spec.input_shape
        if batch.ndim != 5 or batch.shape[1:] != (t, c, h, w):
            raise DimensionError(
                f"batch shape: expected (B, {t}, {c}, {h}, {w}), got {batch.shape}")
        if self.spec.model_kind == "spatiotemporal_lstm":
            return np.ascontiguousarray(batch.transpose(0, 1, 3, 4, 2))  # (B,T,H,W,C)
        return np.ascontiguousarray(batch[:, t - 1].transpose(0, 2, 3, 1))  # newest frame

    def forward(self, batch, mode="infer", rng=None):
        """batch (B,T,C,H,W) -> predictions (B,) in internal label units."""
        if mode not in ("train", "infer"):
            raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode}")
        x = self._to_internal(batch)
        if mode == "train" and x.shape[0] < 2:
            raise ConfigurationError("train-mode batches need >= 2 samples (batch norm)")
        for _, layer in self.layers:
            x = layer.forward(x, mode=mode, rng=rng)
        self._fwd_mode = mode
        return x.reshape(-1)

    def backward(self, dpred):
        """Backpropagate d(loss)/d(predictions); gradients land in layer.grads."""
        if self._fwd_mode != "train":
            raise UsageError("backward requires a preceding train-mode forward")
        d = np.asarray(dpred).reshape(-1, 1)
        for _, layer in reversed(self.layers):
            d = layer.backward(d)
        self._fwd_mode = None

    def predict_degrees(self, batch):
        return self.forward(batch, mode="infer") * DEG_PER_UNIT

    # -- shape bookkeeping ---------------------------------------------------

    def stage_shapes(self):
        """Channels-first shape of the main pipeline stages (excluding batch)."""
        t, c, h, w = self.spec.input_shape
        stages = [("input", (t, c, h, w))]
        if self.spec.model_kind == "spatiotemporal_lstm":
            for idx, f in enumerate(self.spec.conv_lstm_filters, start=1):
                stages.append((f"conv_lstm_{idx}", (t, f, h, w)))
            stages.append(("conv3d", (self.spec.conv3d_filters, t - self.spec.conv3d_kernel + 1, h, w)))
            flat = self.spec.conv3d_filters * h * w
        else:
            hh, ww = h, w
            for idx, (f, k, s) in enumerate(BASELINE_CONV_STACK, start=1):
                layer = dict(self.layers)[f"conv{idx}"]
                hh, ww = layer.spec.out_extent(hh, 0), layer.spec.out_extent(ww, 1)
                stages.append((f"conv_{idx}", (f, hh, ww)))
            flat = self.spec.conv_lstm_filters and BASELINE_CONV_STACK[-1][0] * hh * ww
        stages.append(("flatten", (flat,)))
        stages.append(("dense_hidden", (self.spec.dense_hidden,)))
        stages.append(("output", (1,)))
        return stages


def build_spatiotemporal(spec, seed=0):
    """Assemble the recurrent model; identical seeds give identical parameters."""
    if spec.model_kind != "spatiotemporal_lstm":
        raise ConfigurationError(f"spec.model_kind is {spec.model_kind!r}")
    return Model(spec, np.random.default_rng(np.random.SeedSequence(seed)))


def build_baseline_cnn2d(spec, seed=0):
    """Assemble the single-frame 2D-CNN baseline."""
    if spec.model_kind != "baseline_cnn2d":
        raise ConfigurationError(f"spec.model_kind is {spec.model_kind!r}")
    return Model(spec, np.random.default_rng(np.random.SeedSequence(seed)))


def build_model(spec, seed=0):
    if spec.model_kind == "spatiotemporal_lstm":
        return build_spatiotemporal(spec, seed)
    return build_baseline_cnn2d(spec, seed)


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------
# magic "STCK", u32 version, u64 JSON header length, UTF-8 JSON header
# {spec, step, tensors: [[name, shape, byte offset]], optimizer}, then raw
# little-endian float32 tensor data in table order. Offsets are relative to
# the start of the data section.

CHECKPOINT_MAGIC = b"STCK"
CHECKPOINT_VERSION = 1


def _checkpoint_tensors(model, optimizer_state=None):
    tensors = list(model.named_params()) + list(model.named_state())
    if optimizer_state is not None:
        for pname, arr in optimizer_state.moments1.items():
            tensors.append((f"adam.m.{pname}", arr))
        for pname, arr in optimizer_state.moments2.items():
            tensors.append((f"adam.v.{pname}", arr))
    return tensors


def save_checkpoint(model, path, step=0, optimizer_state=None):
    """Serialize params + running stats (+ optional optimizer moments) atomically."""
    tensors = _checkpoint_tensors(model, optimizer_state)
    table = []
    offset = 0
    for name, arr in tensors:
        table.append([name, list(arr.shape), offset])
        offset += arr.size * 4
    header = {
        "spec": model.spec.to_dict(),
        "step": int(step),
        "tensors": table,
        "optimizer": None if optimizer_state is None else {"t": int(optimizer_state.t)},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    bn_counts = [layer.bn.batches_seen for _, layer in model.layers
                 if isinstance(layer, BatchNormLayer)]
    header["bn_batches_seen"] = bn_counts
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, np.float32).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Rebuild a model from an STCK file.

    Returns (model, step, adam_moments) where adam_moments is None or a dict
    {"t": int, "m": {name: array}, "v": {name: array}}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack_from("<Q", blob, 8)[0]
    if len(blob) < 16 + hlen:
        raise TruncatedFileError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderMismatchError(f"{path}: unreadable header ({exc})") from exc
    spec = NetworkSpec.from_dict(header["spec"])
    model = build_model(spec, seed=0)
    data = blob[16 + hlen:]
    expected = {name: arr for name, arr in model.named_params()}
    expected.update({name: arr for name, arr in model.named_state()})
    moments = None
    if header.get("optimizer") is not None:
        moments = {"t": header["optimizer"]["t"], "m": {}, "v": {}}
    seen = set()
    for name, shape, offset in header["tensors"]:
        shape = tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        end = offset + size * 4
        if end > len(data):
            raise TruncatedFileError(f"{path}: tensor '{name}' extends past end of file")
        arr = np.frombuffer(data, np.dtype("<f4"), count=size, offset=offset).reshape(shape)
        if name.startswith("adam.m.") or name.startswith("adam.v."):
            if moments is None:
                raise HeaderMismatchError(f"{path}: optimizer tensors without optimizer header")
            kind, pname = name[5], name[7:]
            moments["m" if kind == "m" else "v"][pname] = arr.copy()
            continue
        if name not in expected:
            raise HeaderMismatchError(f"{path}: unknown tensor '{name}'")
        if expected[name].shape != shape:
            raise HeaderMismatchError(
                f"{path}: tensor '{name}' shape {shape} != spec shape {expected[name].shape}")
        expected[name][...] = arr
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise HeaderMismatchError(f"{path}: missing tensors {sorted(missing)}")
    counts = header.get("bn_batches_seen")
    bn_layers = [layer for _, layer in model.layers if isinstance(layer, BatchNormLayer)]
    if counts is not None:
        for layer, n in zip(bn_layers, counts):
            layer.bn.batches_seen = int(n)
    return model, header.get("step", 0), moments
