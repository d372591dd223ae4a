"""Parameterized modules built on the tensor engine.

Five module kinds are supported (embedding, linear, mlp, transformer-encoder,
attention-pool), matching the architectures this package trains. All modules
are built deterministically from a ``ModuleSpec`` plus an integer seed:
same spec + same seed gives bit-identical parameters.

Initialization: Xavier-style uniform fan scaling for linear/attention
weights, normal(0, 0.01) for embedding tables, zeros for biases, (1, 0) for
layer-norm affine parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYER_NORM_EPS = 1e-5
_ATTENTION_MASK_FILL = -1e9

_ACTIVATIONS = {
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "none": lambda x: x,
}


@dataclass(frozen=True)
class ModuleSpec:
    """Architecture description for :func:`build_module`.

    ``dimensions`` is interpreted per kind:
      embedding            (rows, dim)
      linear               (in_dim, out_dim)
      mlp                  (in_dim, hidden..., out_dim)
      transformer-encoder  (dim, ffn_dim)
      attention-pool       (dim,)
    """

    kind: str
    dimensions: tuple[int, ...]
    activation: str = "relu"
    dropout_rate: float = 0.0
    layer_count: int = 1
    head_count: int = 1
    bias: bool = True

    def validate(self) -> None:
        kinds = ("embedding", "linear", "mlp", "transformer-encoder", "attention-pool")
        if self.kind not in kinds:
            raise ValueError(f"unknown module kind {self.kind!r}")
        if any(d <= 0 for d in self.dimensions):
            raise ValueError(f"dimensions must be positive, got {self.dimensions}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind in ("transformer-encoder", "attention-pool"):
            dim = self.dimensions[0]
            if dim % self.head_count != 0:
                raise ValueError(
                    f"head_count {self.head_count} does not divide model dim {dim}"
                )
            if self.layer_count < 1:
                raise ValueError("layer_count must be >= 1")
        expected_len = {"embedding": 2, "linear": 2, "attention-pool": 1}
        if self.kind in expected_len and len(self.dimensions) != expected_len[self.kind]:
            raise ValueError(f"{self.kind} takes {expected_len[self.kind]} dimensions")
        if self.kind == "mlp" and len(self.dimensions) < 2:
            raise ValueError("mlp needs at least (in_dim, out_dim)")
        if self.kind == "transformer-encoder" and len(self.dimensions) != 2:
            raise ValueError("transformer-encoder takes (dim, ffn_dim)")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dimensions": list(self.dimensions),
            "activation": self.activation,
            "dropout_rate": self.dropout_rate,
            "layer_count": self.layer_count,
            "head_count": self.head_count,
            "bias": self.bias,
        }


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype):
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Base class: a named, ordered collection of parameter tensors."""

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def spec_dict(self) -> dict:
        raise NotImplementedError

    def has_dropout(self) -> bool:
        return getattr(self, "dropout_rate", 0.0) > 0.0

    def copy_values_from(self, other: "Module") -> None:
        mine, theirs = self.named_parameters(), other.named_parameters()
        if mine.keys() != theirs.keys():
            raise ValueError("parameter name mismatch between modules")
        for name, p in mine.items():
            src = theirs[name].values
            if p.values.shape != src.shape:
                raise ValueError(f"shape mismatch for parameter {name!r}")
            p.values[...] = src


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, *, bias: bool = True,
                 rng: np.random.Generator, dtype=np.float64):
        self.in_dim, self.out_dim, self.use_bias = in_dim, out_dim, bias
        self.weight = Tensor(
            xavier_uniform(rng, in_dim, out_dim, (in_dim, out_dim), dtype),
            requires_grad=True,
        )
        self.bias = (
            Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def named_parameters(self):
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def spec_dict(self):
        return ModuleSpec("linear", (self.in_dim, self.out_dim), bias=self.use_bias).to_dict()


class Embedding(Module):
    def __init__(self, rows: int, dim: int, *, rng: np.random.Generator, dtype=np.float64):
        self.rows, self.dim = rows, dim
        self.table = Tensor(rng.normal(0.0, 0.01, size=(rows, dim)).astype(dtype),
                            requires_grad=True)

    def __call__(self, indices) -> Tensor:
        return T.embedding(self.table, indices)

    def named_parameters(self):
        return {"table": self.table}

    def spec_dict(self):
        return ModuleSpec("embedding", (self.rows, self.dim)).to_dict()


class MLP(Module):
    """Linear stack with an activation between layers (none on the output)."""

    def __init__(self, dims: tuple[int, ...], *, activation: str = "relu",
                 bias: bool = True, rng: np.random.Generator, dtype=np.float64):
        self.dims = tuple(dims)
        self.activation = activation
        self._act = _ACTIVATIONS[activation]
        self.layers = [
            Linear(dims[i], dims[i + 1], bias=bias, rng=rng, dtype=dtype)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self._act(x)
        return x

    def named_parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_parameters().items():
                out[f"layers.{i}.{name}"] = p
        return out

    def spec_dict(self):
        return ModuleSpec("mlp", self.dims, activation=self.activation).to_dict()


class LayerNorm(Module):
    def __init__(self, dim: int, *, dtype=np.float64):
        self.dim = dim
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=LAYER_NORM_EPS)

    def named_parameters(self):
        return {"gain": self.gain, "bias": self.bias}


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query and key/value inputs.

    ``key_valid`` is a boolean (batch, key_len) array; invalid keys receive a
    large negative score before the softmax. At least one key per row must be
    valid.
    """

    def __init__(self, dim: int, heads: int, *, dropout_rate: float = 0.0,
                 rng: np.random.Generator, dtype=np.float64, seed: int | None = None):
        if dim % heads != 0:
            raise ValueError(f"heads {heads} must divide dim {dim}")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.dropout_rate = dropout_rate
        self.wq = Linear(dim, dim, rng=rng, dtype=dtype)
        self.wk = Linear(dim, dim, rng=rng, dtype=dtype)
        self.wv = Linear(dim, dim, rng=rng, dtype=dtype)
        self.wo = Linear(dim, dim, rng=rng, dtype=dtype)
        self._drop_rng = np.random.default_rng(seed if seed is not None else rng.integers(2**63))

    def __call__(self, query: Tensor, keys: Tensor, key_valid: np.ndarray | None,
                 training: bool = False) -> Tensor:
        bsz, q_len, _ = query.shape
        k_len = keys.shape[1]
        h, hd = self.heads, self.head_dim

        def split_heads(x, length):
            x = T.reshape(x, (bsz, length, h, hd))
            return T.swapaxes(x, 1, 2)  # (B, H, L, hd)

        q = split_heads(self.wq(query), q_len)
        k = split_heads(self.wk(keys), k_len)
        v = split_heads(self.wv(keys), k_len)

        scores = T.mul(T.matmul(q, T.swapaxes(k, 2, 3)), 1.0 / np.sqrt(hd))
        if key_valid is not None:
            fill = np.where(key_valid, 0.0, _ATTENTION_MASK_FILL).astype(query.dtype)
            scores = T.add(scores, Tensor(fill.reshape(bsz, 1, 1, k_len)))
        weights = T.softmax(scores, axis=-1)
        weights = T.dropout(weights, self.dropout_rate, self._drop_rng, training)
        ctx = T.matmul(weights, v)  # (B, H, Lq, hd)
        ctx = T.reshape(T.swapaxes(ctx, 1, 2), (bsz, q_len, self.dim))
        return self.wo(ctx)

    def named_parameters(self):
        out = {}
        for tag, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            for name, p in lin.named_parameters().items():
                out[f"{tag}.{name}"] = p
        return out


class TransformerEncoderLayer(Module):
    """Post-norm block: attention + residual, then position-wise FFN + residual."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, *, dropout_rate: float = 0.0,
                 activation: str = "relu", rng: np.random.Generator, dtype=np.float64):
        self.dropout_rate = dropout_rate
        self._act = _ACTIVATIONS[activation]
        self.attn = MultiHeadAttention(dim, heads, dropout_rate=dropout_rate,
                                       rng=rng, dtype=dtype)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.ffn1 = Linear(dim, ffn_dim, rng=rng, dtype=dtype)
        self.ffn2 = Linear(ffn_dim, dim, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self._drop_rng = np.random.default_rng(rng.integers(2**63))

    def __call__(self, x: Tensor, key_valid: np.ndarray | None, training: bool = False) -> Tensor:
        attn_out = self.attn(x, x, key_valid, training)
        attn_out = T.dropout(attn_out, self.dropout_rate, self._drop_rng, training)
        x = self.norm1(T.add(x, attn_out))
        ffn_out = self.ffn2(self._act(self.ffn1(x)))
        ffn_out = T.dropout(ffn_out, self.dropout_rate, self._drop_rng, training)
        return self.norm2(T.add(x, ffn_out))

    def named_parameters(self):
        out = {}
        for tag, sub in (("attn", self.attn), ("norm1", self.norm1),
                         ("ffn1", self.ffn1), ("ffn2", self.ffn2), ("norm2", self.norm2)):
            for name, p in sub.named_parameters().items():
                out[f"{tag}.{name}"] = p
        return out


class TransformerEncoder(Module):
    def __init__(self, dim: int, heads: int, layers: int, ffn_dim: int | None = None, *,
                 dropout_rate: float = 0.0, activation: str = "relu",
                 rng: np.random.Generator, dtype=np.float64):
        self.dim, self.heads, self.n_layers = dim, heads, layers
        self.ffn_dim = ffn_dim if ffn_dim is not None else dim
        self.dropout_rate = dropout_rate
        self.activation = activation
        self.blocks = [
            TransformerEncoderLayer(dim, heads, self.ffn_dim, dropout_rate=dropout_rate,
                                    activation=activation, rng=rng, dtype=dtype)
            for _ in range(layers)
        ]
        self.final_norm = LayerNorm(dim, dtype=dtype)

    def __call__(self, x: Tensor, key_valid: np.ndarray | None, training: bool = False) -> Tensor:
        for block in self.blocks:
            x = block(x, key_valid, training)
        return self.final_norm(x)

    def named_parameters(self):
        out = {}
        for i, block in enumerate(self.blocks):
            for name, p in block.named_parameters().items():
                out[f"blocks.{i}.{name}"] = p
        for name, p in self.final_norm.named_parameters().items():
            out[f"final_norm.{name}"] = p
        return out

    def spec_dict(self):
        return ModuleSpec(
            "transformer-encoder", (self.dim, self.ffn_dim), activation=self.activation,
            dropout_rate=self.dropout_rate, layer_count=self.n_layers, head_count=self.heads,
        ).to_dict()


class AttentionPool(Module):
    """Two stacked attention stages reducing a sequence to one vector.

    Stage one runs self-attention over the sequence; stage two attends from a
    single query vector into the stage-one output, which yields the pooled
    embedding. Residual connections and layer norm wrap both stages.
    """

    def __init__(self, dim: int, heads: int = 1, *, dropout_rate: float = 0.0,
                 rng: np.random.Generator, dtype=np.float64):
        self.dim, self.heads = dim, heads
        self.dropout_rate = dropout_rate
        self.self_attn = MultiHeadAttention(dim, heads, dropout_rate=dropout_rate,
                                            rng=rng, dtype=dtype)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.cross_attn = MultiHeadAttention(dim, heads, dropout_rate=dropout_rate,
                                             rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)

    def __call__(self, seq: Tensor, query_vec: Tensor, key_valid: np.ndarray | None,
                 training: bool = False) -> Tensor:
        bsz = seq.shape[0]
        h = self.norm1(T.add(seq, self.self_attn(seq, seq, key_valid, training)))
        q = T.reshape(query_vec, (bsz, 1, self.dim))
        pooled = self.norm2(T.add(q, self.cross_attn(q, h, key_valid, training)))
        return T.reshape(pooled, (bsz, self.dim))

    def named_parameters(self):
        out = {}
        for tag, sub in (("self_attn", self.self_attn), ("norm1", self.norm1),
                         ("cross_attn", self.cross_attn), ("norm2", self.norm2)):
            for name, p in sub.named_parameters().items():
                out[f"{tag}.{name}"] = p
        return out

    def spec_dict(self):
        return ModuleSpec("attention-pool", (self.dim,), dropout_rate=self.dropout_rate,
                          layer_count=2, head_count=self.heads).to_dict()


class _SpecModule(Module):
    """Wrapper giving spec-built atomic modules a uniform callable surface."""

    def __init__(self, spec: ModuleSpec, inner: Module):
        self.spec = spec
        self.inner = inner
        self.dropout_rate = spec.dropout_rate

    def __call__(self, *inputs, training: bool = False):
        if isinstance(self.inner, (TransformerEncoder, AttentionPool)):
            return self.inner(*inputs, training=training)
        return self.inner(*inputs)

    def named_parameters(self):
        return self.inner.named_parameters()

    def spec_dict(self):
        return self.spec.to_dict()

    def has_dropout(self):
        return self.spec.dropout_rate > 0.0


def build_module(spec: ModuleSpec, seed: int, dtype=np.float64) -> _SpecModule:
    """Deterministically construct the module described by ``spec``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    if spec.kind == "embedding":
        inner = Embedding(*spec.dimensions, rng=rng, dtype=dtype)
    elif spec.kind == "linear":
        inner = Linear(*spec.dimensions, bias=spec.bias, rng=rng, dtype=dtype)
    elif spec.kind == "mlp":
        inner = MLP(spec.dimensions, activation=spec.activation, bias=spec.bias,
                    rng=rng, dtype=dtype)
    elif spec.kind == "transformer-encoder":
        inner = TransformerEncoder(spec.dimensions[0], spec.head_count, spec.layer_count,
                                   spec.dimensions[1], dropout_rate=spec.dropout_rate,
                                   activation=spec.activation, rng=rng, dtype=dtype)
    else:
        inner = AttentionPool(spec.dimensions[0], spec.head_count,
                              dropout_rate=spec.dropout_rate, rng=rng, dtype=dtype)
    return _SpecModule(spec, inner)


def forward(module, inputs, training: bool = False) -> Tensor:
    """Run ``module`` on ``inputs`` (a tuple or a single tensor/array).

    With ``training`` set, the computation graph is recorded (and dropout is
    active); otherwise the call runs in inference mode with no graph.
    """
    if not isinstance(inputs, (tuple, list)):
        inputs = (inputs,)
    if training:
        return module(*inputs, training=True)
    with T.no_grad():
        return module(*inputs, training=False)
