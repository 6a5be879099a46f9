"""Classifier families over log-mel inputs and a tiny module system.

Parameters are discovered by walking module attributes in assignment order,
so names like ``block1.conv.weight`` are stable across runs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "Module",
    "Conv2d",
    "Linear",
    "BatchNorm2d",
    "LayerNorm",
    "Dropout",
    "Attention",
    "Mlp",
    "EncoderBlock",
    "CompactCnnConfig",
    "SpecTransformerConfig",
    "CompactCnn",
    "SpecTransformer",
    "build_model",
    "patchify",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint",
]


class Module:
    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "buffer_names", ()):
            yield f"{prefix}{name}", getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> Module:
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name in params:
                target = params[name].data
            elif name in buffers:
                target = buffers[name]
            else:
                continue
            if target.shape != value.shape:
                raise ShapeError(f"{name}: expected shape {target.shape}, got {value.shape}")
            target[...] = value


# ---------------------------------------------------------------------------
# layers


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # Kaiming-uniform with negative slope √5, i.e. bound 1/√fan_in (the usual conv/linear default)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Ssf(Module):
    """Learnable per-channel scale and shift on a layer output (identity at init)."""

    def __init__(self, width: int, axis: int):
        self.scale = Parameter(np.ones(width))
        self.shift = Parameter(np.zeros(width))
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        from .peft import ssf_apply

        return ssf_apply(x, self.scale, self.shift, self.axis)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3, padding: int = 1):
        self.weight = Parameter(_kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel))
        self.bias = Parameter(np.zeros(out_ch))
        self.padding = padding
        self.ssf: Ssf | None = None

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.padding) + self.bias.reshape(1, -1, 1, 1)
        return self.ssf(y) if self.ssf is not None else y


class Linear(Module):
    """y = x @ W + b with W stored as (in, out); applies to the last axis."""

    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator):
        self.weight = Parameter(_kaiming_uniform(rng, (in_f, out_f), in_f))
        self.bias = Parameter(np.zeros(out_f))
        self.ssf: Ssf | None = None
        self.oft = None

    def effective_weight(self) -> Tensor:
        return self.oft(self.weight) if self.oft is not None else self.weight

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
        y = flat @ self.effective_weight() + self.bias.reshape(1, -1)
        if x.ndim != 2:
            y = y.reshape(*lead, y.shape[-1])
        return self.ssf(y) if self.ssf is not None else y


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=self.weight.dtype)
        self.running_var = np.ones(channels, dtype=self.weight.dtype)
        self.momentum = momentum
        self.eps = eps
        self.ssf: Ssf | None = None

    def forward(self, x: Tensor) -> Tensor:
        y = T.batch_norm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )
        return self.ssf(y) if self.ssf is not None else y


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(width))
        self.bias = Parameter(np.zeros(width))
        self.eps = eps
        self.ssf: Ssf | None = None

    def forward(self, x: Tensor) -> Tensor:
        y = T.layer_norm(x, self.weight, self.bias, self.eps)
        return self.ssf(y) if self.ssf is not None else y


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout p must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.training, self.rng)


class Ia3Scales(Module):
    """Per-feature rescaling vectors on keys, values and optionally queries."""

    def __init__(self, dim: int, query: bool = False):
        self.key = Parameter(np.ones(dim))
        self.value = Parameter(np.ones(dim))
        if query:
            self.query = Parameter(np.ones(dim))


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.heads = heads
        self.ia3: Ia3Scales | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        q = self.q(x)
        if self.ia3 is not None and hasattr(self.ia3, "query"):
            q = q * self.ia3.query.reshape(1, 1, d)
        q, k, v = self._split(q), self._split(self.k(x)), self._split(self.v(x))
        k_scale = v_scale = None
        if self.ia3 is not None:
            shape = (1, self.heads, 1, d // self.heads)
            k_scale = self.ia3.key.reshape(shape)
            v_scale = self.ia3.value.reshape(shape)
        out = T.scaled_dot_attention(q, k, v, k_scale, v_scale)
        return self.o(out.transpose(0, 2, 1, 3).reshape(b, n, d))


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.ia3: Parameter | None = None

    def forward(self, x: Tensor) -> Tensor:
        h = T.gelu(self.fc1(x))
        if self.ia3 is not None:
            h = h * self.ia3.reshape(1, 1, -1)
        return self.fc2(h)


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


# ---------------------------------------------------------------------------
# model families


@dataclass(frozen=True)
class CompactCnnConfig:
    in_channels: int = 1
    block_widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    padding: int = 1
    pool: int = 2
    pool_kind: str = "max"
    adaptive_pool_out: tuple[int, int] = (4, 4)
    hidden_fc: int = 128
    dropout_p: float = 0.5
    n_classes: int = 31

    def __post_init__(self):
        if len(self.block_widths) != 3:
            raise ValueError("the compact CNN has exactly three conv blocks")
        if self.pool_kind not in ("max", "avg"):
            raise ValueError(f"pool_kind must be 'max' or 'avg', got {self.pool_kind!r}")


@dataclass(frozen=True)
class SpecTransformerConfig:
    n_mels: int = 64
    input_frames: int = 157
    patch: int = 16
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    n_classes: int = 31

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.n_mels < self.patch or self.input_frames < self.patch:
            raise ValueError("input smaller than one patch")

    @property
    def n_patches(self) -> int:
        return (self.n_mels // self.patch) * (self.input_frames // self.patch)


class CompactCnn(Module):
    """Three conv→relu→pool→batchnorm blocks, then adaptive pool and a dense head."""

    arch = "cnn"
    classifier = ("fc", "head")

    def __init__(self, cfg: CompactCnnConfig = CompactCnnConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        w1, w2, w3 = cfg.block_widths
        self.conv1 = Conv2d(cfg.in_channels, w1, rng, cfg.kernel, cfg.padding)
        self.bn1 = BatchNorm2d(w1)
        self.conv2 = Conv2d(w1, w2, rng, cfg.kernel, cfg.padding)
        self.bn2 = BatchNorm2d(w2)
        self.conv3 = Conv2d(w2, w3, rng, cfg.kernel, cfg.padding)
        self.bn3 = BatchNorm2d(w3)
        oh, ow = cfg.adaptive_pool_out
        self.fc = Linear(w3 * oh * ow, cfg.hidden_fc, rng)
        self.drop = Dropout(cfg.dropout_p, np.random.default_rng([seed, 1]))
        self.head = Linear(cfg.hidden_fc, cfg.n_classes, rng)

    def _pool(self, x: Tensor) -> Tensor:
        pool = T.max_pool2d if self.cfg.pool_kind == "max" else T.avg_pool2d
        return pool(x, self.cfg.pool)

    def forward(self, x: Tensor) -> Tensor:
        need = self.cfg.pool**3
        if x.shape[2] < need or x.shape[3] < need:
            raise ShapeError(f"input {x.shape[2:]} too small to pool three times (need >= {need})")
        for conv, bn in ((self.conv1, self.bn1), (self.conv2, self.bn2), (self.conv3, self.bn3)):
            x = bn(self._pool(T.relu(conv(x))))
        x = T.adaptive_avg_pool2d(x, self.cfg.adaptive_pool_out).flatten(1)
        x = self.drop(T.relu(self.fc(x)))
        return self.head(x)


def patchify(spec: np.ndarray, patch: int = 16, stride: int | None = None) -> np.ndarray:
    """Cut (..., H, W) into non-overlapping patch×patch tiles, row-major.

    Returns (..., N, patch*patch); trailing rows/columns that do not fill a
    tile are dropped.
    """
    stride = stride or patch
    if stride != patch:
        raise ValueError("only non-overlapping patches are supported")
    h, w = spec.shape[-2:]
    if h < patch or w < patch:
        raise ShapeError(f"input {(h, w)} smaller than one {patch}x{patch} patch")
    nh, nw = h // patch, w // patch
    lead = spec.shape[:-2]
    tiles = spec[..., : nh * patch, : nw * patch].reshape(*lead, nh, patch, nw, patch)
    k = len(lead)
    order = tuple(range(k)) + (k, k + 2, k + 1, k + 3)
    return tiles.transpose(order).reshape(*lead, nh * nw, patch * patch)


class SpecTransformer(Module):
    """Patch-embedding encoder with a CLS token and a linear head (pre-norm blocks)."""

    arch = "transformer"
    classifier = ("head",)

    def __init__(self, cfg: SpecTransformerConfig = SpecTransformerConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = Linear(cfg.patch * cfg.patch, d, rng)
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(1, 1, d)))
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, size=(1, cfg.n_patches + 1, d)))
        self.blocks = [EncoderBlock(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d)
        self.head = Linear(d, cfg.n_classes, rng)
        # the head reads unit-variance normalized tokens; a small init keeps untrained logits near uniform
        self.head.weight.data[...] = rng.normal(0.0, 0.02, size=self.head.weight.shape)

    def embed(self, x: Tensor) -> Tensor:
        tiles = patchify(x.data[:, 0], self.cfg.patch)
        b, n, _ = tiles.shape
        if n + 1 != self.pos_embed.shape[1]:
            raise ShapeError(
                f"input yields {n} patches but the positional table holds {self.pos_embed.shape[1] - 1}"
            )
        tokens = self.patch_embed(Tensor(tiles, dtype=x.dtype))
        cls = self.cls_token.expand(b, 1, self.cfg.embed_dim)
        return T.concat([cls, tokens], axis=1) + self.pos_embed

    def forward(self, x: Tensor) -> Tensor:
        h = self.embed(x)
        for block in self.blocks:
            h = block(h)
        h = self.norm(h)
        return self.head(h[:, 0])


def build_model(arch: str, cfg=None, seed: int = 0) -> Module:
    if arch == "cnn":
        return CompactCnn(cfg or CompactCnnConfig(), seed)
    if arch == "transformer":
        return SpecTransformer(cfg or SpecTransformerConfig(), seed)
    raise ValueError(f"unknown model family {arch!r} (expected 'cnn' or 'transformer')")


# ---------------------------------------------------------------------------
# checkpoint container
#
#   b"UCKP" u32 version(=1)
#   u32 len + UTF-8 JSON header {"arch": ..., "config": {...}}
#   u32 entry count, then per entry:
#     u16 len + UTF-8 name, u8 ndim, ndim × u32 dims, row-major f32 LE values
#
# Names are namespaced: "param/<name>", "buffer/<name>", "adapter/<name>".

_CKPT_MAGIC = b"UCKP"


def _config_json(model: Module) -> str:
    return json.dumps({"arch": model.arch, "config": asdict(model.cfg)}, sort_keys=True)


def save_checkpoint(model: Module, path: str | Path, namespaces=("param", "buffer", "adapter")) -> None:
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters():
        ns = "adapter" if getattr(p, "adapter", False) else "param"
        if ns in namespaces:
            entries.append((f"{ns}/{name}", p.data))
    if "buffer" in namespaces:
        entries.extend((f"buffer/{name}", b) for name, b in model.named_buffers())
    header = _config_json(model).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<II", 1, len(header)) + header)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), arr.ndim) + raw)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, {namespaced name: array})."""
    blob = Path(path).read_bytes()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(blob[pos : pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    entries = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        entries[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return header, entries


def model_from_header(header: dict, seed: int = 0) -> Module:
    cfg = dict(header["config"])
    for key in ("block_widths", "adaptive_pool_out"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    cls = CompactCnnConfig if header["arch"] == "cnn" else SpecTransformerConfig
    return build_model(header["arch"], cls(**cfg), seed)


def load_checkpoint(model: Module, path: str | Path, namespaces=("param", "buffer", "adapter")) -> None:
    """Load the selected namespaces of a checkpoint into ``model`` in place."""
    header, entries = read_checkpoint(path)
    if header["arch"] != model.arch:
        raise ValueError(f"checkpoint is for {header['arch']!r}, model is {model.arch!r}")
    state = {}
    for key, arr in entries.items():
        ns, name = key.split("/", 1)
        if ns in namespaces:
            state[name] = arr
    model.load_state_dict(state, strict=False)
