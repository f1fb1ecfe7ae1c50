"""Range-image encoder, transformer module and NetVLAD descriptor head.

Shapes follow the batch-first convention: images are (N, 1, h, w),
feature volumes are (N, w, c) with one token per image column, and
descriptors are (N, d_output).

Equivariance to column shifts comes from three structural choices:
encoder kernels are one pixel wide with no padding, attention uses no
positional encoding, and NetVLAD pools over columns as an unordered set.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .range_image import RangeImage
from .tensor import Tensor


class ConfigError(ValueError):
    pass


def default_rie_layers(h: int, c: int) -> tuple[tuple[int, int, int], ...]:
    """Vertical-only conv stack (kernel_h, stride_h, out_channels) taking height h to 1."""
    if h == 64:
        geometry = [(5, 2), (3, 2), (3, 2), (3, 2), (2, 1)]
    elif h == 32:
        geometry = [(5, 2), (3, 2), (3, 2), (2, 1)]
    else:
        geometry, H = [], h
        while H > 1:
            if H <= 5:
                geometry.append((H, 1))
                H = 1
            else:
                geometry.append((3, 2))
                H = (H - 3) // 2 + 1
    n = len(geometry)
    chans = [c if i == n - 1 else max(4, c >> (n - 1 - i)) for i in range(n)]
    return tuple((k, s, ch) for (k, s), ch in zip(geometry, chans))


@dataclass(frozen=True)
class ModelConfig:
    h: int = 32
    w: int = 360
    d_model: int = 256
    n_head: int = 4
    d_ffn: int = 1024
    num_tm_blocks: int = 1
    d_inter: int = 1024
    d_output: int = 256
    n_clusters: int = 64
    rie_layers: tuple = field(default=())
    range_scale: float = 50.0

    def __post_init__(self):
        if not self.rie_layers:
            object.__setattr__(self, "rie_layers", default_rie_layers(self.h, self.d_model))
        layers = tuple(tuple(int(v) for v in layer) for layer in self.rie_layers)
        object.__setattr__(self, "rie_layers", layers)
        if self.h <= 0 or self.w <= 0:
            raise ConfigError("h and w must be positive")
        if self.d_model % self.n_head:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_head={self.n_head}")
        if self.num_tm_blocks < 0:
            raise ConfigError("num_tm_blocks must be >= 0")
        if min(self.d_ffn, self.d_inter, self.d_output, self.n_clusters) <= 0:
            raise ConfigError("all layer widths must be positive")
        H = self.h
        for k, s, ch in layers:
            if k < 1 or s < 1 or ch < 1 or k > H:
                raise ConfigError(f"invalid encoder layer {(k, s, ch)} for input height {H}")
            H = (H - k) // s + 1
        if H != 1:
            raise ConfigError(f"encoder layers reduce height {self.h} to {H}, not 1")
        if layers[-1][2] != self.d_model:
            raise ConfigError("last encoder layer must output d_model channels")
        if self.range_scale <= 0:
            raise ConfigError("range_scale must be positive")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_head

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if k == "rie_layers":
                v = ",".join("x".join(str(x) for x in layer) for layer in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in types:
                raise ConfigError(f"line {lineno}: unknown model config key {key!r}")
            if key == "rie_layers":
                kw[key] = tuple(tuple(int(x) for x in part.split("x")) for part in val.split(","))
            elif key == "range_scale":
                kw[key] = float(val)
            else:
                kw[key] = int(val)
        return cls(**kw)


TINY = dict(h=8, w=36, d_model=16, n_head=2, d_ffn=32, num_tm_blocks=1, d_inter=32, d_output=16, n_clusters=4)


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    @property
    def n_values(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.config, {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k)
                                         for k, t in self.tensors.items()})

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: Tensor(t.data.copy(), requires_grad=True, name=k)
                                         for k, t in self.tensors.items()})

    def save(self, path) -> None:
        T.save_tensors(path, self.tensors)
        Path(str(path) + ".cfg").write_text(self.config.to_text())

    @classmethod
    def load(cls, path) -> ModelParams:
        cfg_path = Path(str(path) + ".cfg")
        if not cfg_path.exists():
            raise FileNotFoundError(f"missing model config sidecar {cfg_path}")
        config = ModelConfig.from_text(cfg_path.read_text())
        arrays = T.load_tensors(path)
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            raise ConfigError(f"{path}: tensor names do not match the model config")
        for k, shape in expected.items():
            if arrays[k].shape != shape:
                raise ConfigError(f"{path}: {k} has shape {arrays[k].shape}, config expects {shape}")
        return cls(config, {k: Tensor(arrays[k], requires_grad=True, name=k) for k in expected})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    cin = 1
    for i, (k, _, cout) in enumerate(cfg.rie_layers):
        shapes[f"rie.{i}.weight"] = (cout, cin, k, 1)
        shapes[f"rie.{i}.bias"] = (cout,)
        cin = cout
    d, d2 = cfg.d_model, 2 * cfg.d_model
    for b in range(cfg.num_tm_blocks):
        p = f"tm.{b}."
        if b > 0:
            shapes[p + "in_proj.weight"] = (d2, d)
            shapes[p + "in_proj.bias"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[p + f"w{name}"] = (d, d)
            shapes[p + f"b{name}"] = (d,)
        shapes[p + "ln1.gamma"] = (d2,)
        shapes[p + "ln1.beta"] = (d2,)
        shapes[p + "ffn.w1"] = (d2, cfg.d_ffn)
        shapes[p + "ffn.b1"] = (cfg.d_ffn,)
        shapes[p + "ffn.w2"] = (cfg.d_ffn, d2)
        shapes[p + "ffn.b2"] = (d2,)
        shapes[p + "ln2.gamma"] = (d2,)
        shapes[p + "ln2.beta"] = (d2,)
    if cfg.num_tm_blocks > 0:
        shapes["gdg.in_proj.weight"] = (d2, d)
        shapes["gdg.in_proj.bias"] = (d,)
    K = cfg.n_clusters
    shapes["gdg.assign.weight"] = (d, K)
    shapes["gdg.assign.bias"] = (K,)
    shapes["gdg.centers"] = (K, d)
    shapes["gdg.mlp1.weight"] = (K * d, cfg.d_inter)
    shapes["gdg.mlp1.bias"] = (cfg.d_inter,)
    shapes["gdg.mlp2.weight"] = (cfg.d_inter, cfg.d_output)
    shapes["gdg.mlp2.bias"] = (cfg.d_output,)
    return shapes


# layers whose output feeds a ReLU get the sqrt(2) Kaiming gain
_RELU_FED = ("rie.", "ffn.w1", "gdg.mlp1.weight")
_BIASES = ("bias", "beta", "bq", "bk", "bv", "bo", "b1", "b2")


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Fan-in scaled weights, zero biases, unit LN gains, random unit-norm centres."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        tail = name.rsplit(".", 1)[-1]
        if tail == "gamma":
            arr = np.ones(shape)
        elif tail in _BIASES:
            arr = np.zeros(shape)
        elif name == "gdg.centers":
            arr = rng.normal(size=shape)
            arr /= np.linalg.norm(arr, axis=1, keepdims=True)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("rie.") else shape[0]
            gain = 2.0 if any(tag in name for tag in _RELU_FED) else 1.0
            arr = rng.normal(0.0, math.sqrt(gain / fan_in), size=shape)
        out[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    return ModelParams(cfg, out)


# --------------------------------------------------------------------------
# forward passes


def images_to_tensor(images, cfg: ModelConfig, dtype=None) -> Tensor:
    """Stack range images into an (N, 1, h, w) tensor scaled by ``range_scale``."""
    if isinstance(images, RangeImage):
        images = [images]
    if isinstance(images, np.ndarray):
        arr = images if images.ndim == 3 else images.reshape(-1, *images.shape[-2:])
    else:
        arr = np.stack([im.data if isinstance(im, RangeImage) else np.asarray(im) for im in images])
    if arr.shape[1:] != (cfg.h, cfg.w):
        raise ConfigError(f"image shape {arr.shape[1:]} does not match model input {(cfg.h, cfg.w)}")
    dtype = dtype or T.default_dtype()
    return Tensor((arr.astype(np.float64) / cfg.range_scale).astype(dtype)[:, None, :, :])


def rie_forward(x: Tensor, params: ModelParams) -> Tensor:
    """(N, 1, h, w) -> (N, w, c); every layer compresses height only."""
    cfg = params.config
    if x.ndim != 4 or x.shape[1:] != (1, cfg.h, cfg.w):
        raise T.ShapeError("rie_forward", x.shape, (None, 1, cfg.h, cfg.w))
    for i, (_, stride, _) in enumerate(cfg.rie_layers):
        b = params[f"rie.{i}.bias"]
        x = T.conv2d_valid(x, params[f"rie.{i}.weight"], (stride, 1))
        x = T.relu(x + b.reshape(-1, 1, 1))
    n, c, _, w = x.shape
    return x.reshape(n, c, w).transpose(0, 2, 1)


def _heads(x: Tensor, n_head: int) -> Tensor:
    n, w, d = x.shape
    return x.reshape(n, w, n_head, d // n_head).transpose(0, 2, 1, 3)


def multi_head_attention(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    cfg = params.config
    p = lambda k: params[prefix + k]
    q = _heads(T.linear(x, p("wq"), p("bq")), cfg.n_head)
    k = _heads(T.linear(x, p("wk"), p("bk")), cfg.n_head)
    v = _heads(T.linear(x, p("wv"), p("bv")), cfg.n_head)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(cfg.d_k))
    att = T.softmax(scores, axis=-1) @ v                       # N, H, w, d_k
    n, _, w, _ = att.shape
    merged = att.transpose(0, 2, 1, 3).reshape(n, w, cfg.d_model)
    return T.linear(merged, p("wo"), p("bo"))


def _ln(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return T.layer_norm(x, -1, 1e-5) * params[prefix + "gamma"] + params[prefix + "beta"]


def tm_block(x: Tensor, params: ModelParams, b: int) -> Tensor:
    """S = LN(FFN(LN(Conc(F, A))) + LN(Conc(F, A))) for one block; output has 2*d_model channels."""
    p = f"tm.{b}."
    a = multi_head_attention(x, params, p)
    cat = _ln(T.concat([x, a], axis=-1), params, p + "ln1.")
    hidden = T.relu(T.linear(cat, params[p + "ffn.w1"], params[p + "ffn.b1"]))
    ffn = T.linear(hidden, params[p + "ffn.w2"], params[p + "ffn.b2"])
    return _ln(ffn + cat, params, p + "ln2.")


def tm_forward(features: Tensor, params: ModelParams) -> Tensor:
    """Stack of transformer blocks; returns the input unchanged when there are none."""
    x = features
    for b in range(params.config.num_tm_blocks):
        if b > 0:
            x = T.linear(x, params[f"tm.{b}.in_proj.weight"], params[f"tm.{b}.in_proj.bias"])
        x = tm_block(x, params, b)
    return x


def netvlad(z: Tensor, params: ModelParams) -> Tensor:
    """Soft-assigned residual aggregation, intra-normalised: (N, w, d) -> (N, K, d)."""
    assign = T.softmax(T.linear(z, params["gdg.assign.weight"], params["gdg.assign.bias"]), axis=-1)
    weighted = assign.transpose(0, 2, 1) @ z                    # N, K, d
    mass = assign.sum(axis=1).reshape(z.shape[0], -1, 1)        # N, K, 1
    vlad = weighted - mass * params["gdg.centers"]
    return T.l2_normalize(vlad, axis=-1, eps=1e-10)


def gdg_forward(s: Tensor, params: ModelParams) -> Tensor:
    """Column set (N, w, c) -> unit descriptor (N, d_output)."""
    z = s
    if "gdg.in_proj.weight" in params:
        z = T.linear(s, params["gdg.in_proj.weight"], params["gdg.in_proj.bias"])
    vlad = netvlad(z, params)
    flat = vlad.reshape(vlad.shape[0], -1)
    hidden = T.relu(T.linear(flat, params["gdg.mlp1.weight"], params["gdg.mlp1.bias"]))
    out = T.linear(hidden, params["gdg.mlp2.weight"], params["gdg.mlp2.bias"])
    return T.l2_normalize(out, axis=-1, eps=1e-10)


def forward(x, params: ModelParams) -> Tensor:
    if not isinstance(x, Tensor):
        x = images_to_tensor(x, params.config)
    return gdg_forward(tm_forward(rie_forward(x, params), params), params)


def extract(images, params: ModelParams, batch_size: int = 64) -> np.ndarray:
    """Descriptors for a sequence of range images (inference, no graph)."""
    if isinstance(images, RangeImage):
        images = [images]
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(forward(images[start:start + batch_size], params).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.config.d_output), np.float32)


def descriptor_of(image: RangeImage, params: ModelParams) -> np.ndarray:
    return extract([image], params)[0]


def model_summary(params: ModelParams) -> Sequence[tuple[str, tuple]]:
    return [(k, t.shape) for k, t in params]
