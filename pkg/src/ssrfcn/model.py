"""The five-layer fully convolutional backbone and its weight file format.

Four ``conv 3x3 / stride 2 -> batchnorm -> ReLU`` blocks reduce the input by
16 in each direction; a 3x3 stride-1 head maps the 512 features to a single
channel score map.  The per-image logit is the spatial mean of that map.
"""

from __future__ import annotations

import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, FormatError, InputSizeError

FORMAT_MAGIC = "SSRFCN-WEIGHTS"
FORMAT_VERSION = 1
WEIGHTS_SUFFIX = ".ssrfcn"
CANONICAL_CONV_PARAMS = 1_555_585


@dataclass(frozen=True)
class FcnConfig:
    channels: tuple[int, ...] = (64, 128, 256, 512, 1)
    strides: tuple[int, ...] = (2, 2, 2, 2, 1)
    kernel: int = 3
    input_channels: int = 3

    def __post_init__(self):
        if len(self.channels) != len(self.strides) or len(self.channels) < 2:
            raise ConfigurationError("channels and strides must have the same length (>= 2)")
        if self.channels[-1] != 1:
            raise ConfigurationError("the head layer must have exactly one output channel")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigurationError(f"strides must be 1 or 2, got {self.strides}")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))

    @property
    def num_blocks(self) -> int:
        """Number of conv -> BN -> ReLU blocks (every layer but the head)."""
        return len(self.channels) - 1

    def conv_shapes(self) -> list[tuple[int, int, int, int]]:
        cins = (self.input_channels,) + tuple(self.channels[:-1])
        return [(self.kernel, self.kernel, cin, cout) for cin, cout in zip(cins, self.channels)]

    def score_map_shape(self, height: int, width: int) -> tuple[int, int]:
        for s in self.strides:
            height, width = -(-height // s), -(-width // s)
        return height, width


@dataclass
class FcnModel:
    config: FcnConfig
    convs: list[T.ConvParams]
    bns: list[T.BatchNormParams]
    adam: T.AdamState = field(default_factory=T.AdamState)

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        """Name -> array views; updating them in place updates the model."""
        params = {}
        for i, conv in enumerate(self.convs, 1):
            params[f"conv{i}.weight"] = conv.weights
            params[f"conv{i}.bias"] = conv.bias
        for i, bn in enumerate(self.bns, 1):
            params[f"bn{i}.gamma"] = bn.gamma
            params[f"bn{i}.beta"] = bn.beta
        return params

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Every tensor that defines inference behaviour, in file order."""
        tensors = {}
        for i, conv in enumerate(self.convs, 1):
            tensors[f"conv{i}.weight"] = conv.weights
            tensors[f"conv{i}.bias"] = conv.bias
        for i, bn in enumerate(self.bns, 1):
            tensors[f"bn{i}.gamma"] = bn.gamma
            tensors[f"bn{i}.beta"] = bn.beta
            tensors[f"bn{i}.running_mean"] = bn.running_mean
            tensors[f"bn{i}.running_var"] = bn.running_var
        return tensors

    def conv_parameter_count(self) -> int:
        return sum(c.weights.size + c.bias.size for c in self.convs)

    def batchnorm_parameter_count(self) -> int:
        return sum(b.gamma.size + b.beta.size for b in self.bns)


@dataclass
class ScoreMap:
    """Raw (pre-sigmoid) local decisions for one image."""

    values: np.ndarray  # (h_s, w_s)
    image_shape: tuple[int, int]


def _expected_shapes(config: FcnConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, shape in enumerate(config.conv_shapes(), 1):
        shapes[f"conv{i}.weight"] = shape
        shapes[f"conv{i}.bias"] = (shape[3],)
    for i, c in enumerate(config.channels[:-1], 1):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"bn{i}.{name}"] = (c,)
    return shapes


def init_model(
    seed: int,
    config: FcnConfig | None = None,
    *,
    weight_std: float = 0.02,
    bn_momentum: float = 0.9,
    bn_epsilon: float = 1e-5,
) -> FcnModel:
    """Conv weights ~ N(0, weight_std^2) from a seeded PCG64 stream; biases 0."""
    config = config or FcnConfig()
    rng = np.random.default_rng(seed)
    convs = []
    for shape, stride in zip(config.conv_shapes(), config.strides):
        w = rng.normal(0.0, weight_std, size=shape).astype(np.float32)
        convs.append(T.ConvParams(w, np.zeros(shape[3], np.float32), stride))
    bns = [
        T.BatchNormParams.identity(c, momentum=bn_momentum, epsilon=bn_epsilon)
        for c in config.channels[:-1]
    ]
    return FcnModel(config, convs, bns)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    block_inputs: list[np.ndarray]
    bn_outputs: list[np.ndarray]
    bn_caches: list[T.BatchNormCache]
    head_input: np.ndarray
    score_shape: tuple[int, ...]


def _check_batch(model: FcnModel, batch: np.ndarray) -> None:
    if batch.ndim != 4:
        raise InputSizeError(f"expected an NHWC batch, got shape {batch.shape}")
    if batch.shape[3] != model.config.input_channels:
        raise InputSizeError(
            f"expected {model.config.input_channels} input channels, got {batch.shape[3]}"
        )
    d = model.config.downsample
    if batch.shape[1] < d or batch.shape[2] < d:
        raise InputSizeError(
            f"input {batch.shape[1]}x{batch.shape[2]} is smaller than the minimum {d}x{d}"
        )


def forward(model: FcnModel, batch: np.ndarray, mode: T.Mode = "infer", *, keep_cache: bool = False):
    """Run the backbone on an NHWC batch.

    Returns ``(score_maps, logits)`` with score maps shaped ``(n, h_s, w_s)``,
    or ``(score_maps, logits, cache)`` when ``keep_cache`` is set (train mode
    only; the cache feeds :func:`backward`).
    """
    _check_batch(model, batch)
    if keep_cache and mode != "train":
        raise ConfigurationError("a backward cache is only available in train mode")
    dtype = model.convs[0].weights.dtype
    a = batch if batch.dtype == dtype else batch.astype(dtype)
    inputs, bn_outs, bn_caches = [], [], []
    for conv, bn in zip(model.convs[:-1], model.bns):
        inputs.append(a)
        z = T.conv2d_forward(a, conv)
        b, c = T.batchnorm_forward(z, bn, mode)
        bn_outs.append(b)
        bn_caches.append(c)
        a = T.relu_forward(b)
    scores = T.conv2d_forward(a, model.convs[-1])
    logits = T.global_average_pool(scores)
    maps = scores[..., 0]
    if keep_cache:
        return maps, logits, ForwardCache(inputs, bn_outs, bn_caches, a, scores.shape)
    return maps, logits


def backward(model: FcnModel, cache: ForwardCache, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar objective w.r.t. every trainable parameter."""
    grads = {}
    g = T.global_average_pool_backward(cache.score_shape, grad_logits.astype(model.convs[0].weights.dtype))
    nb = len(model.bns)
    g, grads[f"conv{nb + 1}.weight"], grads[f"conv{nb + 1}.bias"] = T.conv2d_backward(
        cache.head_input, model.convs[-1], g
    )
    for i in reversed(range(nb)):
        g = T.relu_backward(cache.bn_outputs[i], g)
        g, grads[f"bn{i + 1}.gamma"], grads[f"bn{i + 1}.beta"] = T.batchnorm_backward(
            cache.bn_caches[i], g
        )
        g, grads[f"conv{i + 1}.weight"], grads[f"conv{i + 1}.bias"] = T.conv2d_backward(
            cache.block_inputs[i], model.convs[i], g
        )
    return grads


def score_map(model: FcnModel, image: np.ndarray) -> ScoreMap:
    maps, _ = forward(model, image[None], "infer")
    return ScoreMap(maps[0], image.shape[:2])


def spoofness(model: FcnModel, image: np.ndarray):
    """sigmoid(mean score) for one (h, w, 3) image or an NHWC batch; infer mode."""
    batch = image[None] if image.ndim == 3 else image
    _, logits = forward(model, batch, "infer")
    p = T.sigmoid(logits)
    return float(p[0]) if image.ndim == 3 else p


def is_spoof(score: float, threshold: float = 0.5) -> bool:
    return score >= threshold


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _ints(values) -> str:
    return ",".join(str(int(v)) for v in values)


def save_model(model: FcnModel, path, *, include_optimizer: bool = True) -> None:
    """Write a textual header followed by little-endian float32 payload, atomically."""
    tensors = dict(model.state_tensors())
    if include_optimizer:
        for name in model.trainable_parameters():
            if name in model.adam.m:
                tensors[f"adam.m.{name}"] = model.adam.m[name]
                tensors[f"adam.v.{name}"] = model.adam.v[name]
    bn = model.bns[0]
    a = model.adam
    lines = [
        f"{FORMAT_MAGIC} {FORMAT_VERSION}",
        f"config channels={_ints(model.config.channels)} strides={_ints(model.config.strides)} "
        f"kernel={model.config.kernel} input_channels={model.config.input_channels}",
        f"batchnorm momentum={bn.momentum!r} epsilon={bn.epsilon!r}",
        f"adam lr={a.lr!r} beta1={a.beta1!r} beta2={a.beta2!r} eps={a.eps!r} "
        f"t={a.t if include_optimizer else 0}",
    ]
    lines += [f"tensor {name} float32 {_ints(arr.shape)}" for name, arr in tensors.items()]
    lines.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for arr in tensors.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _kv(tokens: list[str], line: str) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise FormatError(f"malformed header field {tok!r} in line {line!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _parse_ints(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",")) if text else ()
    except ValueError:
        raise FormatError(f"bad integer list {text!r}", what) from None


def load_model(path, *, load_optimizer: bool = True) -> FcnModel:
    data = Path(path).read_bytes()
    end = data.find(b"\nend\n")
    if end < 0:
        raise FormatError("missing header terminator")
    try:
        header = data[:end].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise FormatError("header is not ASCII") from None
    payload = memoryview(data)[end + len(b"\nend\n") :]

    first = header[0].split()
    if len(first) != 2 or first[0] != FORMAT_MAGIC:
        raise FormatError("not an ssrfcn weight file")
    if first[1] != str(FORMAT_VERSION):
        raise FormatError(f"unsupported format version {first[1]}")
    sections: dict[str, dict[str, str]] = {}
    declared: list[tuple[str, tuple[int, ...]]] = []
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "tensor":
            if len(parts) != 4:
                raise FormatError(f"malformed tensor line {line!r}")
            _, name, dtype, shape = parts
            if dtype != "float32":
                raise FormatError(f"unsupported dtype {dtype}", name)
            declared.append((name, _parse_ints(shape, name)))
        elif parts[0] in ("config", "batchnorm", "adam"):
            sections[parts[0]] = _kv(parts[1:], line)
        else:
            raise FormatError(f"unknown header line {line!r}")
    for sec in ("config", "batchnorm", "adam"):
        if sec not in sections:
            raise FormatError(f"missing {sec!r} header line")

    try:
        cfg = sections["config"]
        config = FcnConfig(
            channels=_parse_ints(cfg["channels"], "config"),
            strides=_parse_ints(cfg["strides"], "config"),
            kernel=int(cfg["kernel"]),
            input_channels=int(cfg["input_channels"]),
        )
        bn_momentum = float(sections["batchnorm"]["momentum"])
        bn_epsilon = float(sections["batchnorm"]["epsilon"])
        ad = sections["adam"]
        adam = T.AdamState(
            lr=float(ad["lr"]),
            beta1=float(ad["beta1"]),
            beta2=float(ad["beta2"]),
            eps=float(ad["eps"]),
            t=int(ad["t"]),
        )
    except (KeyError, ValueError, ConfigurationError) as exc:
        raise FormatError(f"invalid header: {exc}") from None

    expected = _expected_shapes(config)
    required = list(expected)
    names = [n for n, _ in declared]
    if names[: len(required)] != required:
        missing = next(
            (r for r, n in zip(required, names + [None] * len(required)) if r != n), None
        )
        raise FormatError("tensor missing or out of order", missing)

    tensors: dict[str, np.ndarray] = {}
    offset = 0
    trainable = set(required) - {n for n in required if "running" in n}
    for name, shape in declared:
        if name in expected:
            want = expected[name]
        elif name.startswith(("adam.m.", "adam.v.")) and name[7:] in trainable:
            want = expected[name[7:]]
        else:
            raise FormatError("unexpected tensor", name)
        if shape != want:
            raise FormatError(f"declared shape {shape} but config requires {want}", name)
        if name in tensors:
            raise FormatError("duplicate tensor", name)
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(payload):
            raise FormatError(
                f"truncated payload: need {nbytes} bytes at offset {offset}, "
                f"{len(payload) - offset} left",
                name,
            )
        tensors[name] = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").astype(
            np.float32
        ).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes after last tensor")

    convs = [
        T.ConvParams(tensors[f"conv{i}.weight"], tensors[f"conv{i}.bias"], s)
        for i, s in enumerate(config.strides, 1)
    ]
    bns = [
        T.BatchNormParams(
            tensors[f"bn{i}.gamma"],
            tensors[f"bn{i}.beta"],
            tensors[f"bn{i}.running_mean"],
            tensors[f"bn{i}.running_var"],
            momentum=bn_momentum,
            epsilon=bn_epsilon,
        )
        for i in range(1, config.num_blocks + 1)
    ]
    if load_optimizer:
        for name, arr in tensors.items():
            if name.startswith("adam.m."):
                adam.m[name[7:]] = arr
            elif name.startswith("adam.v."):
                adam.v[name[7:]] = arr
    else:
        adam = T.AdamState(lr=adam.lr, beta1=adam.beta1, beta2=adam.beta2, eps=adam.eps)
    return FcnModel(config, convs, bns, adam)
