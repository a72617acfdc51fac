"""Embedding table, pre-layer-norm transformer backbone and the tied readout.

Vanilla and headless training share ``forward_backbone``; only the loss
applied to its output differs.
"""

from functools import lru_cache
from typing import Iterator

import numpy as np

from hlm import rng
from hlm.errors import ShapeError
from hlm.settings import ModelConfig
from hlm.tensor import (
    Tensor,
    add,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    softmax,
    transpose,
)

TOKEN_EMBEDDINGS = "tok_emb"
POSITION_EMBEDDINGS = "pos_emb"
HEAD = "head"


class Parameters:
    """Ordered name -> Tensor mapping; ``head`` exists only after head recovery."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def token_embeddings(self) -> Tensor:
        return self.tensors[TOKEN_EMBEDDINGS]

    @property
    def head(self) -> Tensor | None:
        return self.tensors.get(HEAD)

    @property
    def dtype(self) -> np.dtype:
        return self.token_embeddings.dtype

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Parameters":
        return cls(
            {
                name: Tensor(np.array(a), requires_grad=True, name=name)
                for name, a in arrays.items()
            }
        )

    def clone(self) -> "Parameters":
        return Parameters.from_arrays(self.arrays())

    def astype(self, dtype: np.dtype | str) -> "Parameters":
        return Parameters.from_arrays(
            {name: a.astype(dtype) for name, a in self.arrays().items()}
        )

    def with_head(self) -> "Parameters":
        """Add an untied head initialised as a copy of the token embeddings."""
        tensors = dict(self.tensors)
        tensors[HEAD] = Tensor(
            self.token_embeddings.data.copy(), requires_grad=True, name=HEAD
        )
        return Parameters(tensors)

    def backbone_names(self) -> list[str]:
        return [n for n in self.tensors if n != HEAD]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        TOKEN_EMBEDDINGS: (config.vocab_size, d),
        POSITION_EMBEDDINGS: (config.max_len, d),
    }
    for i in range(config.n_layers):
        p = f"blocks.{i}"
        shapes |= {
            f"{p}.ln1.gamma": (d,),
            f"{p}.ln1.beta": (d,),
            f"{p}.attn.wq": (d, d),
            f"{p}.attn.bq": (d,),
            f"{p}.attn.wk": (d, d),
            f"{p}.attn.bk": (d,),
            f"{p}.attn.wv": (d, d),
            f"{p}.attn.bv": (d,),
            f"{p}.attn.wo": (d, d),
            f"{p}.attn.bo": (d,),
            f"{p}.ln2.gamma": (d,),
            f"{p}.ln2.beta": (d,),
            f"{p}.mlp.w_in": (d, f),
            f"{p}.mlp.b_in": (f,),
            f"{p}.mlp.w_out": (f, d),
            f"{p}.mlp.b_out": (d,),
        }
    if config.final_layer_norm:
        shapes |= {"ln_f.gamma": (d,), "ln_f.beta": (d,)}
    return shapes


def init_params(
    config: ModelConfig, seed: int, dtype: np.dtype | str = np.float32
) -> Parameters:
    """Matrices ~ N(0, init_std^2); biases and betas 0; gammas 1.

    Each tensor draws from its own named stream, so shapes elsewhere in the
    model never shift another tensor's values.
    """
    arrays = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            value = rng.stream(seed, f"init/{name}").normal(
                0.0, config.init_std, size=shape
            )
        arrays[name] = value.astype(dtype)
    return Parameters.from_arrays(arrays)


@lru_cache(maxsize=8)
def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def _split_heads(t: Tensor, n: int, length: int, config: ModelConfig) -> Tensor:
    h, dh = config.n_heads, config.head_dim
    return t.reshape(n, length, h, dh).permute(0, 2, 1, 3).reshape(n * h, length, dh)


def _merge_heads(t: Tensor, n: int, length: int, config: ModelConfig) -> Tensor:
    h, dh = config.n_heads, config.head_dim
    return t.reshape(n, h, length, dh).permute(0, 2, 1, 3).reshape(n * length, h * dh)


def _attention(
    params: Parameters, p: str, x: Tensor, n: int, length: int, config: ModelConfig
) -> Tensor:
    def project(w: str) -> Tensor:
        return add(matmul(x, params[f"{p}.attn.w{w}"]), params[f"{p}.attn.b{w}"])

    q, k, v = (_split_heads(project(w), n, length, config) for w in "qkv")
    scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(config.head_dim))
    probs = softmax(scores, causal_mask(length) if config.causal else None)
    context = _merge_heads(matmul(probs, v), n, length, config)
    return add(matmul(context, params[f"{p}.attn.wo"]), params[f"{p}.attn.bo"])


def _mlp(params: Parameters, p: str, x: Tensor) -> Tensor:
    hidden = gelu(add(matmul(x, params[f"{p}.mlp.w_in"]), params[f"{p}.mlp.b_in"]))
    return add(matmul(hidden, params[f"{p}.mlp.w_out"]), params[f"{p}.mlp.b_out"])


def forward_backbone(
    params: Parameters, x_tilde: np.ndarray, config: ModelConfig
) -> Tensor:
    """Output representations O of shape ``[N, L, D]``.

    With ``config.causal`` position j only attends to positions <= j.
    """
    x_tilde = np.asarray(x_tilde, dtype=np.int64)
    if x_tilde.ndim != 2:
        raise ShapeError(f"expected an [N, L] id matrix, got shape {x_tilde.shape}")
    n, length = x_tilde.shape
    if length > config.max_len:
        raise ShapeError(f"sequence length {length} exceeds max_len {config.max_len}")

    positions = np.tile(np.arange(length), n)
    h = add(
        embedding_lookup(params.token_embeddings, x_tilde.reshape(-1)),
        embedding_lookup(params[POSITION_EMBEDDINGS], positions),
    )
    eps = config.eps
    for i in range(config.n_layers):
        p = f"blocks.{i}"
        a = layer_norm(h, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"], eps)
        h = add(h, _attention(params, p, a, n, length, config))
        m = layer_norm(h, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"], eps)
        h = add(h, _mlp(params, p, m))
    if config.final_layer_norm:
        h = layer_norm(h, params["ln_f.gamma"], params["ln_f.beta"], eps)
    return h.reshape(n, length, config.d_model)


def readout_matrix(params: Parameters) -> Tensor:
    return params.head if params.head is not None else params.token_embeddings


def tied_logits(params: Parameters, outputs: Tensor) -> Tensor:
    """``O @ e_theta^T`` (or the untied head when present), shape ``[..., V]``."""
    weight = readout_matrix(params)
    d = weight.shape[1]
    if outputs.shape[-1] != d:
        raise ShapeError(f"outputs of width {outputs.shape[-1]} do not match D={d}")
    lead = outputs.shape[:-1]
    flat = outputs.reshape(-1, d)
    return matmul(flat, transpose(weight)).reshape(*lead, weight.shape[0])
