"""LeNet-5 teacher / LeNet-5-Half student networks and their checkpoint files.

Checkpoint byte layout (all integers little-endian)::

    0      8 bytes   magic b"ZSKDCKPT"
    8      u32       format version (currently 1)
    12     u32       manifest length L
    16     L bytes   manifest, UTF-8 JSON (sorted keys): name, input_shape,
                     num_classes, seed, layers, params=[{name, shape}, ...]
    16+L   ...       each parameter as raw float64, C order, manifest order
    end-4  u32       CRC-32 of every preceding byte
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ChecksumError, DimensionError, FormatError, ParameterError, TruncatedError, VersionError

CKPT_MAGIC = b"ZSKDCKPT"
CKPT_VERSION = 1

LAYER_KINDS = ("conv", "maxpool", "relu", "flatten", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    input_shape: tuple = ()
    kernel: int = 0
    filters: int = 0
    stride: int = 1
    padding: str = "valid"
    units: int = 0
    init: str = ""

    def output_shape(self) -> tuple:
        shape = tuple(self.input_shape)
        if self.kind == "conv":
            h, w, _ = shape
            if self.padding == "same":
                return (-(-h // self.stride), -(-w // self.stride), self.filters)
            if h < self.kernel or w < self.kernel:
                raise DimensionError(f"{self.name}: input {shape} smaller than kernel {self.kernel}")
            return ((h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1, self.filters)
        if self.kind == "maxpool":
            h, w, c = shape
            if self.kernel > h or self.kernel > w:
                raise DimensionError(f"{self.name}: pool {self.kernel} exceeds input {shape}")
            return ((h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1, c)
        if self.kind == "relu":
            return shape
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        if self.kind == "dense":
            if len(shape) != 1:
                raise DimensionError(f"{self.name}: dense layer needs a flat input, got {shape}")
            return (self.units,)
        raise ParameterError(f"unknown layer kind {self.kind!r}")

    def param_shapes(self) -> dict:
        if self.kind == "conv":
            cin = self.input_shape[2]
            return {f"{self.name}/kernel": (self.kernel, self.kernel, cin, self.filters),
                    f"{self.name}/bias": (self.filters,)}
        if self.kind == "dense":
            return {f"{self.name}/weight": (self.input_shape[0], self.units),
                    f"{self.name}/bias": (self.units,)}
        return {}


def validate_chain(input_shape: tuple, layers) -> tuple:
    """Check every layer's declared input against its predecessor; return the final shape."""
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        if layer.kind not in LAYER_KINDS:
            raise ParameterError(f"layer {i}: unknown kind {layer.kind!r}")
        if tuple(layer.input_shape) != shape:
            raise DimensionError(
                f"layer {i} ({layer.name or layer.kind}) declares input {tuple(layer.input_shape)}, "
                f"previous layer produces {shape}")
        shape = layer.output_shape()
    return shape


@dataclass
class Network:
    name: str
    input_shape: tuple
    layers: list
    params: dict = field(default_factory=dict)
    num_classes: int = 10
    seed: int | None = None

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if not self.layers:
            return
        final = validate_chain(self.input_shape, self.layers)
        if final != (self.num_classes,):
            raise DimensionError(f"network output {final} does not match {self.num_classes} classes")
        if [l for l in self.layers if l.kind != "relu"][-1].kind != "dense":
            raise DimensionError("the final non-activation layer must be dense")
        for layer in self.layers:
            for pname, pshape in layer.param_shapes().items():
                if pname not in self.params:
                    raise ParameterError(f"missing parameter {pname}")
                if self.params[pname].shape != pshape:
                    raise DimensionError(f"{pname}: shape {self.params[pname].shape}, expected {pshape}")

    def param_names(self) -> list:
        return [n for layer in self.layers for n in layer.param_shapes()]

    def parameters(self) -> list:
        return [self.params[n] for n in self.param_names()]

    def final_dense(self) -> LayerSpec:
        return [l for l in self.layers if l.kind == "dense"][-1]

    def class_templates(self) -> np.ndarray:
        """Final-layer weight matrix; column k is the template of class k."""
        return self.params[f"{self.final_dense().name}/weight"].data

    def logits(self, x) -> T.Tensor:
        x = x if isinstance(x, T.Tensor) else T.Tensor(x)
        if x.ndim not in (3, 4) or tuple(x.shape[-3:]) != self.input_shape:
            raise DimensionError(f"{self.name} expects input {self.input_shape}, got {x.shape}")
        h = x
        for layer in self.layers:
            if layer.kind == "conv":
                h = T.conv2d(h, self.params[f"{layer.name}/kernel"], self.params[f"{layer.name}/bias"],
                             stride=layer.stride, padding=layer.padding)
            elif layer.kind == "maxpool":
                h = T.maxpool2d(h, layer.kernel, layer.stride)
            elif layer.kind == "relu":
                h = T.relu(h)
            elif layer.kind == "flatten":
                h = T.flatten(h)
            elif layer.kind == "dense":
                h = T.dense(h, self.params[f"{layer.name}/weight"], self.params[f"{layer.name}/bias"])
        return h

    def predict_logits(self, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Graph-free logits for a large image array, evaluated in chunks."""
        with self.frozen():
            return np.concatenate([self.logits(images[i:i + batch_size]).data
                                   for i in range(0, len(images), batch_size)])

    def requires_grad_(self, flag: bool = True) -> "Network":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    @contextlib.contextmanager
    def frozen(self):
        saved = {n: p.requires_grad for n, p in self.params.items()}
        self.requires_grad_(False)
        try:
            yield self
        finally:
            for n, flag in saved.items():
                self.params[n].requires_grad = flag

    def copy(self) -> "Network":
        params = {n: T.Tensor(p.data.copy(), requires_grad=p.requires_grad) for n, p in self.params.items()}
        return Network(self.name, self.input_shape, list(self.layers), params, self.num_classes, self.seed)

    def state(self) -> dict:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict) -> None:
        for n, arr in state.items():
            self.params[n].data[...] = arr


def forward(net: Network, batch, tau: float = 1.0) -> tuple:
    """Return ``(logits, probs)`` with ``probs = softmax(logits / tau)`` row-wise."""
    logits = net.logits(batch)
    return logits, T.softmax_t(logits, tau)


def param_count(net: Network) -> int:
    return int(sum(p.size for p in net.params.values()))


def parameter_hash(net: Network) -> str:
    """SHA-256 over parameter names, shapes and float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(net.params):
        arr = np.ascontiguousarray(net.params[name].data, dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.1, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples, redrawing any that fall outside ``bound * std``."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def _lenet(name: str, filters1: int, filters2: int, seed: int, num_classes: int = 10,
           channels: int = 1) -> Network:
    init = "truncated_normal(std=0.1, bound=2std); bias=0"
    inp = (32, 32, channels)
    layers = []

    def add(**kw):
        shape = layers[-1].output_shape() if layers else inp
        layers.append(LayerSpec(input_shape=shape, **kw))

    add(kind="conv", name="conv1", kernel=5, filters=filters1, init=init)
    add(kind="relu")
    add(kind="maxpool", name="pool1", kernel=2, stride=2)
    add(kind="conv", name="conv2", kernel=5, filters=filters2, init=init)
    add(kind="relu")
    add(kind="maxpool", name="pool2", kernel=2, stride=2)
    add(kind="flatten")
    add(kind="dense", name="fc1", units=120, init=init)
    add(kind="relu")
    add(kind="dense", name="fc2", units=84, init=init)
    add(kind="relu")
    add(kind="dense", name="fc3", units=num_classes, init=init)

    rng = np.random.default_rng(seed)
    params = {}
    for layer in layers:
        for pname, pshape in layer.param_shapes().items():
            if pname.endswith("/bias"):
                params[pname] = T.Tensor(np.zeros(pshape), requires_grad=True)
            else:
                params[pname] = T.Tensor(truncated_normal(rng, pshape), requires_grad=True)
    return Network(name, inp, layers, params, num_classes, seed)


def build_lenet5(seed: int = 0, num_classes: int = 10) -> Network:
    return _lenet("lenet5", 6, 16, seed, num_classes)


def build_lenet5_half(seed: int = 0, num_classes: int = 10) -> Network:
    return _lenet("lenet5_half", 3, 8, seed, num_classes)


BUILDERS = {"lenet5": build_lenet5, "lenet5_half": build_lenet5_half}


# ---------------------------------------------------------------- checkpoints

def _manifest(net: Network) -> dict:
    return {
        "name": net.name,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "seed": net.seed,
        "layers": [dict(asdict(l), input_shape=list(l.input_shape)) for l in net.layers],
        "params": [{"name": n, "shape": list(net.params[n].shape)} for n in net.param_names()],
    }


def checkpoint_bytes(net: Network) -> bytes:
    manifest = json.dumps(_manifest(net), sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(manifest)), manifest]
    for name in net.param_names():
        parts.append(np.ascontiguousarray(net.params[name].data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(net: Network, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(net))
    tmp.replace(path)
    return path


def checkpoint_from_bytes(blob: bytes) -> Network:
    if len(blob) < 8 or blob[:8] != CKPT_MAGIC:
        raise FormatError("not a zskd checkpoint (bad magic)")
    if len(blob) < 16:
        raise TruncatedError("checkpoint header truncated")
    version, mlen = struct.unpack_from("<II", blob, 8)
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    if len(blob) < 16 + mlen:
        raise TruncatedError("checkpoint manifest truncated")
    try:
        manifest = json.loads(blob[16:16 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        if zlib.crc32(blob[:-4]) != struct.unpack_from("<I", blob, len(blob) - 4)[0]:
            raise ChecksumError("checkpoint checksum mismatch") from exc
        raise FormatError("checkpoint manifest is not valid JSON") from exc
    sizes = [int(np.prod(p["shape"])) for p in manifest["params"]]
    expected = 16 + mlen + 8 * sum(sizes) + 4
    if len(blob) < expected:
        raise TruncatedError(f"checkpoint has {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise FormatError(f"checkpoint has {len(blob) - expected} trailing bytes")
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if zlib.crc32(blob[:expected - 4]) != crc:
        raise ChecksumError("checkpoint checksum mismatch")

    params = {}
    offset = 16 + mlen
    for p, n in zip(manifest["params"], sizes):
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(p["shape"])
        params[p["name"]] = T.Tensor(arr.astype(np.float64), requires_grad=True)
        offset += 8 * n
    layers = [LayerSpec(**dict(l, input_shape=tuple(l["input_shape"]))) for l in manifest["layers"]]
    return Network(manifest["name"], tuple(manifest["input_shape"]), layers, params,
                   manifest["num_classes"], manifest["seed"])


def load_checkpoint(path) -> Network:
    return checkpoint_from_bytes(Path(path).read_bytes())
