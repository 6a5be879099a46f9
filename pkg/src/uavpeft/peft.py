"""Fine-tuning strategies as parameter masks plus layer wrappers.

``apply_strategy`` copies a model, attaches any adapters the strategy needs
and returns the copy with a name -> trainable mask. Adapters start at the
identity, so an adapted model reproduces its base model until trained.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass

import numpy as np

from .models import (
    Attention,
    BatchNorm2d,
    Conv2d,
    Ia3Scales,
    LayerNorm,
    Linear,
    Mlp,
    Module,
    SpecTransformer,
    Ssf,
)
from .tensor import NumericError, Parameter, ShapeError, Tensor, make_op

__all__ = [
    "Strategy",
    "FineTuneStrategy",
    "StrategyError",
    "OftSingularError",
    "Oft",
    "ParamStats",
    "applicable",
    "apply_strategy",
    "cayley",
    "skew_from_upper",
    "ssf_apply",
    "param_stats",
    "adapter_parameters",
]


class Strategy(str, enum.Enum):
    FULL = "full"
    CLASSIFIER_ONLY = "classifier_only"
    BATCHNORM = "batchnorm"
    SSF = "ssf"
    IA3 = "ia3"
    OFT = "oft"


class StrategyError(ValueError):
    """The strategy cannot be applied to this model family."""


class OftSingularError(NumericError):
    pass


@dataclass(frozen=True)
class FineTuneStrategy:
    kind: Strategy = Strategy.FULL
    oft_blocks: int = 4
    ia3_query: bool = False

    @classmethod
    def parse(cls, name: str, **options) -> FineTuneStrategy:
        try:
            kind = Strategy(name)
        except ValueError:
            choices = ", ".join(s.value for s in Strategy)
            raise StrategyError(f"unknown strategy {name!r}; choose one of {choices}") from None
        return cls(kind, **options)


# ---------------------------------------------------------------------------
# adapter math


def ssf_apply(x: Tensor, scale: Tensor, shift: Tensor, axis: int = 1) -> Tensor:
    """y = scale ⊙ x + shift along ``axis``, broadcast over the other axes."""
    axis = axis % x.ndim
    width = x.shape[axis]
    if scale.shape != (width,) or shift.shape != (width,):
        raise ShapeError(f"SSF vectors must have length {width}, got {scale.shape}, {shift.shape}")
    shape = [1] * x.ndim
    shape[axis] = width
    return x * scale.reshape(shape) + shift.reshape(shape)


def skew_from_upper(upper: Tensor, n: int) -> Tensor:
    """Build skew-symmetric (…, n, n) blocks from their strict upper triangles."""
    iu = np.triu_indices(n, k=1)
    if upper.shape[-1] != len(iu[0]):
        raise ShapeError(f"need {len(iu[0])} upper-triangle entries for n={n}, got {upper.shape[-1]}")
    s = np.zeros(upper.shape[:-1] + (n, n), dtype=upper.dtype)
    s[..., iu[0], iu[1]] = upper.data
    s[..., iu[1], iu[0]] = -upper.data

    def backward(g):
        return (g[..., iu[0], iu[1]] - g[..., iu[1], iu[0]],)

    return make_op(s, (upper,), backward, "skew_from_upper")


def cayley(skew: Tensor, max_cond: float = 1e8) -> Tensor:
    """R = (I + S)(I - S)⁻¹ for a batch of skew-symmetric blocks S.

    Backward: with A = (I - S)⁻¹, dR = (I + R) dS A, so the gradient w.r.t. S
    is (I + R)ᵀ G Aᵀ.
    """
    s = skew.data
    n = s.shape[-1]
    eye = np.eye(n, dtype=s.dtype)
    minus = eye - s
    cond = np.linalg.cond(minus.astype(np.float64))
    if np.any(~np.isfinite(cond)) or np.any(cond > max_cond):
        raise OftSingularError(f"(I - S) is numerically singular (condition number {np.max(cond):.3g})")
    inv = np.linalg.inv(minus)
    r = (eye + s) @ inv

    def backward(g):
        return (np.swapaxes(eye + r, -1, -2) @ g @ np.swapaxes(inv, -1, -2),)

    return make_op(r, (skew,), backward, "cayley")


class Oft(Module):
    """Block-diagonal orthogonal rotation of a (in, out) weight's input axis."""

    def __init__(self, in_features: int, blocks: int):
        if in_features % blocks:
            raise ValueError(f"{in_features} input features do not split into {blocks} blocks")
        self.blocks = blocks
        self.block_size = in_features // blocks
        n = self.block_size
        self.skew = Parameter(np.zeros((blocks, n * (n - 1) // 2)))

    def rotation(self) -> Tensor:
        return cayley(skew_from_upper(self.skew, self.block_size))

    def forward(self, weight: Tensor) -> Tensor:
        in_f, out_f = weight.shape
        blocks = weight.reshape(self.blocks, self.block_size, out_f)
        return (self.rotation() @ blocks).reshape(in_f, out_f)


# ---------------------------------------------------------------------------
# strategy application


def _has_batchnorm(model: Module) -> bool:
    return any(isinstance(m, BatchNorm2d) for _, m in model.named_modules())


def applicable(model: Module, strategy: Strategy) -> bool:
    if strategy in (Strategy.IA3, Strategy.OFT):
        return isinstance(model, SpecTransformer)
    if strategy is Strategy.BATCHNORM:
        return _has_batchnorm(model)
    return True


def _is_classifier(model: Module, name: str) -> bool:
    return any(name == c or name.startswith(c + ".") for c in model.classifier)


def _mark(module: Module) -> Module:
    for _, p in module.named_parameters():
        p.adapter = True
    return module


def _attach_ssf(model: Module) -> None:
    for name, m in list(model.named_modules()):
        if _is_classifier(model, name):
            continue
        if isinstance(m, (Conv2d, BatchNorm2d)):
            m.ssf = _mark(Ssf(m.bias.shape[0], axis=1))
        elif isinstance(m, (Linear, LayerNorm)):
            m.ssf = _mark(Ssf(m.bias.shape[0], axis=-1))


def _attach_ia3(model: Module, query: bool) -> None:
    for _, m in list(model.named_modules()):
        if isinstance(m, Attention):
            m.ia3 = _mark(Ia3Scales(m.q.bias.shape[0], query))
        elif isinstance(m, Mlp):
            m.ia3 = Parameter(np.ones(m.fc1.bias.shape[0]))
            m.ia3.adapter = True


def _attach_oft(model: Module, blocks: int) -> None:
    for _, m in list(model.named_modules()):
        if isinstance(m, Attention):
            for proj in (m.q, m.k, m.v, m.o):
                proj.oft = _mark(Oft(proj.weight.shape[0], blocks))


def apply_strategy(model: Module, strategy: FineTuneStrategy | Strategy | str) -> tuple[Module, dict[str, bool]]:
    """Return an adapted copy of ``model`` and its trainable mask."""
    if isinstance(strategy, str) and not isinstance(strategy, Strategy):
        strategy = FineTuneStrategy.parse(strategy)
    elif isinstance(strategy, Strategy):
        strategy = FineTuneStrategy(strategy)
    kind = strategy.kind
    if not applicable(model, kind):
        raise StrategyError(f"strategy {kind.value!r} is not applicable to the {model.arch} model")

    adapted = copy.deepcopy(model)
    if kind is Strategy.SSF:
        _attach_ssf(adapted)
    elif kind is Strategy.IA3:
        _attach_ia3(adapted, strategy.ia3_query)
    elif kind is Strategy.OFT:
        _attach_oft(adapted, strategy.oft_blocks)

    bn_names = {
        f"{name}.{p}"
        for name, m in adapted.named_modules()
        if isinstance(m, BatchNorm2d)
        for p in ("weight", "bias")
    }
    mask = {}
    for name, p in adapted.named_parameters():
        if kind is Strategy.FULL:
            trainable = True
        elif getattr(p, "adapter", False):
            trainable = True
        elif _is_classifier(adapted, name):
            trainable = True
        elif kind is Strategy.BATCHNORM:
            trainable = name in bn_names
        else:
            trainable = False
        mask[name] = trainable
        p.requires_grad = trainable
    adapted.strategy = strategy
    return adapted, mask


def adapter_parameters(model: Module) -> dict[str, Parameter]:
    return {n: p for n, p in model.named_parameters() if getattr(p, "adapter", False)}


@dataclass(frozen=True)
class ParamStats:
    total: int
    trainable: int
    percent: float


def param_stats(model: Module, mask: dict[str, bool]) -> ParamStats:
    """Counts over every registered parameter (adapters included); percent to 2 dp."""
    params = dict(model.named_parameters())
    if set(mask) != set(params):
        missing = sorted(set(params) - set(mask))
        raise KeyError(f"mask does not cover every parameter (missing {missing[:3]}...)")
    total = sum(p.size for p in params.values())
    trainable = sum(p.size for n, p in params.items() if mask[n])
    percent = round(100.0 * trainable / total, 2) if total else 0.0
    return ParamStats(total, trainable, percent)
