"""Neural-network building blocks on top of the autodiff core.

Layers own their parameter tensors and expose them through ``params()``
as a flat name -> Tensor map, which is what the checkpoint format and the
optimizer consume.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class: child layers and parameters are discovered by attribute."""

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.params(key))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.params(f"{key}.{i}"))
        return out

    def num_values(self) -> int:
        return sum(p.data.size for p in self.params().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params().values():
            p.requires_grad = flag
        if flag:
            # params() skips frozen tensors, so re-walk raw attributes
            for value in vars(self).values():
                if isinstance(value, Tensor):
                    value.requires_grad = True
                elif isinstance(value, Module):
                    value.set_trainable(True)
                elif isinstance(value, (list, tuple)):
                    for item in value:
                        if isinstance(item, Module):
                            item.set_trainable(True)


def freeze(module: Module) -> Module:
    for p in module.params().values():
        p.requires_grad = False
    return module


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, std: float | None = None):
        if std is None:
            std = 1.0 / math.sqrt(d_in)
        self.weight = ad.parameter(rng.normal(0.0, std, size=(d_in, d_out)), dtype=ad.DEFAULT_DTYPE)
        self.bias = ad.parameter(np.zeros(d_out), dtype=ad.DEFAULT_DTYPE) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, x.shape[-1])) if len(lead) != 1 else x
        y = ad.matmul(flat, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        if len(lead) != 1:
            y = ad.reshape(y, lead + (self.weight.shape[1],))
        return y

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "linear"
        out = {f"{base}.weight": self.weight}
        if self.bias is not None:
            out[f"{base}.bias"] = self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = ad.parameter(np.ones(dim), dtype=ad.DEFAULT_DTYPE)
        self.beta = ad.parameter(np.zeros(dim), dtype=ad.DEFAULT_DTYPE)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gamma, self.beta, self.eps)

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "ln"
        return {f"{base}.gamma": self.gamma, f"{base}.beta": self.beta}


class MultiHeadAttention(Module):
    """Standard scaled dot-product self-attention over (B, T, D)."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads != 0:
            raise ad.ContractError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = d_model // heads
        std = 0.02
        self.wq = Linear(d_model, d_model, rng, std=std)
        self.wk = Linear(d_model, d_model, rng, std=std)
        self.wv = Linear(d_model, d_model, rng, std=std)
        self.wo = Linear(d_model, d_model, rng, std=std)
        self.last_attention: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        batch, seq, dim = x.shape
        h, hd = self.heads, self.head_dim

        def split_heads(t: Tensor) -> Tensor:
            t = ad.reshape(t, (batch, seq, h, hd))
            return ad.transpose(t, (0, 2, 1, 3))  # (B, H, T, hd)

        q = split_heads(self.wq(x))
        k = split_heads(self.wk(x))
        v = split_heads(self.wv(x))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        attn = ad.softmax(scores)
        self.last_attention = attn.data
        ctx = ad.matmul(attn, v)  # (B, H, T, hd)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, seq, dim))
        return self.wo(ctx)

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "attn"
        out: dict[str, Tensor] = {}
        for name in ("wq", "wk", "wv", "wo"):
            out.update(getattr(self, name).params(f"{base}.{name}"))
        return out


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, hidden, rng, std=0.02)
        self.fc2 = Linear(hidden, d_model, rng, std=0.02)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "mlp"
        out = self.fc1.params(f"{base}.fc1")
        out.update(self.fc2.params(f"{base}.fc2"))
        return out


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, d_model: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.mlp = FeedForward(d_model, d_model * mlp_ratio, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x)))
        return ad.add(x, self.mlp(self.ln2(x)))

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "block"
        out = self.ln1.params(f"{base}.ln1")
        out.update(self.attn.params(f"{base}.attn"))
        out.update(self.ln2.params(f"{base}.ln2"))
        out.update(self.mlp.params(f"{base}.mlp"))
        return out


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, bias: bool = True):
        fan_in = c_in * kernel * kernel
        std = math.sqrt(2.0 / fan_in)
        self.weight = ad.parameter(rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)),
                                    dtype=ad.DEFAULT_DTYPE)
        self.bias = ad.parameter(np.zeros(c_out), dtype=ad.DEFAULT_DTYPE) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = ad.add(y, ad.reshape(self.bias, (1, -1, 1, 1)))
        return y

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "conv"
        out = {f"{base}.weight": self.weight}
        if self.bias is not None:
            out[f"{base}.bias"] = self.bias
        return out


class ConvTranspose2d(Module):
    """Transposed conv with kernel layout (Cin, Cout, kh, kw)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, bias: bool = True):
        fan_in = c_in * kernel * kernel
        std = math.sqrt(2.0 / fan_in)
        self.weight = ad.parameter(rng.normal(0.0, std, size=(c_in, c_out, kernel, kernel)),
                                    dtype=ad.DEFAULT_DTYPE)
        self.bias = ad.parameter(np.zeros(c_out), dtype=ad.DEFAULT_DTYPE) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv_transpose2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = ad.add(y, ad.reshape(self.bias, (1, -1, 1, 1)))
        return y

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        base = prefix or "convt"
        out = {f"{base}.weight": self.weight}
        if self.bias is not None:
            out[f"{base}.bias"] = self.bias
        return out
