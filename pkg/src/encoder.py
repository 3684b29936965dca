"""
Frozen ViT-style encoder with prefix injection.

A random Gaussian backbone stands in for pretrained weights. Blocks are
pre-norm (norm -> attention -> residual -> norm -> MLP -> residual). For the
first K blocks learnable prompts are prepended to the per-head keys and values;
queries are never prefixed, so every block keeps the sequence length.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import ConfigError, DimensionError
from ndgrad import (
    TapeGraph, Tensor, Var, add, concat_rows, gelu, layer_norm, matmul, permute,
    repeat_batch, reshape, scale, softmax_rows, take, transpose,
)
from prng import Xoshiro256

PROMPT_INIT_STD = 0.02


@dataclass
class EncoderConfig:
    depth: int = 4
    hidden_dim: int = 32
    heads: int = 4
    tokens: int = 9
    mlp_ratio: float = 4.0
    chunk_dim: int = 4
    seed: int = 0
    ln_eps: float = 1e-6

    def validate(self):
        for name in ("depth", "hidden_dim", "heads", "chunk_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"must be a positive integer, got {getattr(self, name)}", key=name)
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}", key="hidden_dim")
        if self.tokens < 2:
            raise ConfigError(f"need at least 2 tokens (class + one patch), got {self.tokens}", key="tokens")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"must be positive, got {self.mlp_ratio}", key="mlp_ratio")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return max(1, int(round(self.hidden_dim * self.mlp_ratio)))

    @property
    def feature_dim(self) -> int:
        return (self.tokens - 1) * self.chunk_dim


@dataclass
class BlockParams:
    qkv: Tensor    # [D, 3D]
    proj: Tensor   # [D, D]
    mlp1: Tensor   # [D, mlp]
    mlp2: Tensor   # [mlp, D]
    ln1: Tensor    # [2, D]: gamma row, beta row
    ln2: Tensor


@dataclass
class EncoderParams:
    config: EncoderConfig
    embed: Tensor  # [chunk, D]
    cls: Tensor    # [D]
    pos: Tensor    # [N, D]
    blocks: List[BlockParams] = field(default_factory=list)

    def named_tensors(self) -> Dict[str, Tensor]:
        named = {"embed": self.embed, "cls": self.cls, "pos": self.pos}
        for i, blk in enumerate(self.blocks):
            for part in ("qkv", "proj", "mlp1", "mlp2", "ln1", "ln2"):
                named[f"block{i}.{part}"] = getattr(blk, part)
        return named

    def fingerprint(self) -> bytes:
        return b"".join(t.data.tobytes() for t in self.named_tensors().values())


def init_encoder(cfg: EncoderConfig) -> EncoderParams:
    """Deterministic N(0, 1/D) backbone; identical configs give identical bytes"""
    cfg.validate()
    rng = Xoshiro256(cfg.seed)
    D = cfg.hidden_dim
    std = 1.0 / math.sqrt(D)
    embed = Tensor(rng.normal((cfg.chunk_dim, D), std))
    cls = Tensor(rng.normal((D,), std))
    pos = Tensor(rng.normal((cfg.tokens, D), std))
    norm_affine = np.stack([np.ones(D), np.zeros(D)])
    blocks = []
    for _ in range(cfg.depth):
        blocks.append(BlockParams(
            qkv=Tensor(rng.normal((D, 3 * D), std)),
            proj=Tensor(rng.normal((D, D), std)),
            mlp1=Tensor(rng.normal((D, cfg.mlp_dim), std)),
            mlp2=Tensor(rng.normal((cfg.mlp_dim, D), std)),
            ln1=Tensor(norm_affine),
            ln2=Tensor(norm_affine),
        ))
    return EncoderParams(cfg, embed, cls, pos, blocks)


def expected_shapes(cfg: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
    D = cfg.hidden_dim
    shapes = {"embed": (cfg.chunk_dim, D), "cls": (D,), "pos": (cfg.tokens, D)}
    for i in range(cfg.depth):
        shapes[f"block{i}.qkv"] = (D, 3 * D)
        shapes[f"block{i}.proj"] = (D, D)
        shapes[f"block{i}.mlp1"] = (D, cfg.mlp_dim)
        shapes[f"block{i}.mlp2"] = (cfg.mlp_dim, D)
        shapes[f"block{i}.ln1"] = (2, D)
        shapes[f"block{i}.ln2"] = (2, D)
    return shapes


def load_named_tensors(params: EncoderParams, tensors: Dict[str, Tensor]) -> EncoderParams:
    """Replaces backbone weights by name, e.g. with tensors read from a weight file"""
    shapes = expected_shapes(params.config)
    for name, tensor in tensors.items():
        if name not in shapes:
            raise ConfigError(f"unknown encoder tensor '{name}'", key="weights_path")
        if tuple(tensor.shape) != shapes[name]:
            raise DimensionError(f"tensor '{name}' has shape {tensor.shape}, expected {list(shapes[name])}")
    named = params.named_tensors()
    for name, tensor in tensors.items():
        named[name].data = np.ascontiguousarray(tensor.data.copy())
    return params


class PromptSet:
    """K pairs (p_i^k, p_i^v) of M x D prefixes, one pair per injected block"""

    def __init__(self, layers: int, length: int, dim: int, rng: Xoshiro256, std: float = PROMPT_INIT_STD):
        if layers < 0 or length < 0:
            raise ConfigError(f"prompt layers/length must be >= 0, got {layers}/{length}")
        self.layers = layers
        self.length = length
        self.keys: List[Tensor] = []
        self.values: List[Tensor] = []
        for _ in range(layers):
            self.keys.append(Tensor(rng.normal((length, dim), std)))
            self.values.append(Tensor(rng.normal((length, dim), std)))

    def parameters(self) -> Dict[str, Tensor]:
        named = {}
        for i in range(self.layers):
            named[f"prompt.{i}.k"] = self.keys[i]
            named[f"prompt.{i}.v"] = self.values[i]
        return named

    def layer_prefixes(self, tape: TapeGraph, batch_size: int) -> Dict[int, Tuple[Var, Var]]:
        prefixes = {}
        for i in range(self.layers):
            pk = tape.param(self.keys[i], f"prompt.{i}.k")
            pv = tape.param(self.values[i], f"prompt.{i}.v")
            prefixes[i] = (repeat_batch(pk, batch_size), repeat_batch(pv, batch_size))
        return prefixes


class InputPrompt:
    """M learnable tokens prepended to the embedded sequence (prompt tuning)"""

    def __init__(self, length: int, dim: int, rng: Xoshiro256, std: float = PROMPT_INIT_STD):
        if length < 0:
            raise ConfigError(f"input prompt length must be >= 0, got {length}", key="prompt_length")
        self.length = length
        self.tokens = Tensor(rng.normal((length, dim), std))

    def parameters(self) -> Dict[str, Tensor]:
        return {"input_prompt.tokens": self.tokens}

    def prepend(self, h: Var) -> Var:
        tape = h.tape
        tokens = repeat_batch(tape.param(self.tokens, "input_prompt.tokens"), h.shape[0])
        return concat_rows(tokens, h)


def embed(tape: TapeGraph, params: EncoderParams, batch: np.ndarray) -> Var:
    """f_0: chunk each input into N-1 patches, project to D, prepend class token, add positions"""
    cfg = params.config
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.feature_dim:
        raise DimensionError(
            f"embed expects inputs [B x {cfg.feature_dim}] ({cfg.tokens - 1} chunks of {cfg.chunk_dim}), got {list(X.shape)}"
        )
    B, N, D = X.shape[0], cfg.tokens, cfg.hidden_dim
    chunks = tape.const(X.reshape(B * (N - 1), cfg.chunk_dim))
    patches = reshape(matmul(chunks, tape.const(params.embed)), (B, N - 1, D))
    cls = repeat_batch(reshape(tape.const(params.cls), (1, D)), B)
    h = concat_rows(cls, patches)
    return add(h, repeat_batch(tape.const(params.pos), B))


def _per_head(x: Var, B: int, H: int, dh: int) -> Var:
    """[B, T, D] -> [B*H, T, dh]"""
    T = x.shape[1]
    return reshape(permute(reshape(x, (B, T, H, dh)), (0, 2, 1, 3)), (B * H, T, dh))


def _batched_prefix(p: Var, B: int, D: int) -> Var:
    if p.data.ndim == 2:
        p = repeat_batch(p, B)
    if p.data.ndim != 3 or p.shape[0] != B or p.shape[2] != D:
        raise DimensionError(f"prefix of shape {list(p.shape)} does not fit batch {B} and width {D}")
    return p


def attention_block(
    h: Var,
    params: EncoderParams,
    i: int,
    prompts: Optional[Tuple[Var, Var]] = None,
    return_attention: bool = False,
):
    """
    Block f_i on h [B, N', D] (or [N', D]). With prompts (p_k, p_v), each
    [M, D] or [B, M, D], the keys and values of every head are prefixed by
    the matching D/H slice of the prompts and the softmax runs over N'+M keys.
    """
    cfg = params.config
    tape = h.tape
    blk = params.blocks[i]
    squeeze = h.data.ndim == 2
    if squeeze:
        h = reshape(h, (1,) + h.shape)
    B, N, D = h.shape
    H, dh = cfg.heads, cfg.head_dim

    x = layer_norm(h, blk.ln1.data[0], blk.ln1.data[1], cfg.ln_eps)
    qkv = matmul(reshape(x, (B * N, D)), tape.const(blk.qkv))
    qkv = permute(reshape(qkv, (B, N, 3, H, dh)), (2, 0, 3, 1, 4))
    q = reshape(take(qkv, 0, 0, 1), (B * H, N, dh))
    k = reshape(take(qkv, 0, 1, 2), (B * H, N, dh))
    v = reshape(take(qkv, 0, 2, 3), (B * H, N, dh))

    if prompts is not None:
        pk, pv = (_batched_prefix(p, B, D) for p in prompts)
        if pk.shape != pv.shape:
            raise DimensionError(f"key prompt {list(pk.shape)} and value prompt {list(pv.shape)} differ")
        k = concat_rows(_per_head(pk, B, H, dh), k)
        v = concat_rows(_per_head(pv, B, H, dh), v)

    attn = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(dh)))
    mixed = reshape(permute(reshape(matmul(attn, v), (B, H, N, dh)), (0, 2, 1, 3)), (B * N, D))
    h = add(h, reshape(matmul(mixed, tape.const(blk.proj)), (B, N, D)))

    y = layer_norm(h, blk.ln2.data[0], blk.ln2.data[1], cfg.ln_eps)
    y = matmul(gelu(matmul(reshape(y, (B * N, D)), tape.const(blk.mlp1))), tape.const(blk.mlp2))
    h = add(h, reshape(y, (B, N, D)))

    if squeeze:
        h = reshape(h, (N, D))
    if return_attention:
        return h, attn
    return h


def encode(
    tape: TapeGraph,
    params: EncoderParams,
    batch: np.ndarray,
    prompt_set=None,
    input_prompt: Optional[InputPrompt] = None,
) -> Var:
    """
    Class-token feature g [B, D]. `prompt_set` is anything with
    `layer_prefixes(tape, batch_size)` (a PromptSet or selected pool prompts).
    """
    if prompt_set is not None and input_prompt is not None:
        raise ConfigError("prefix prompts and an input prompt cannot both be active", key="adapter")
    cfg = params.config
    h = embed(tape, params, batch)
    B = h.shape[0]
    cls_index = 0
    if input_prompt is not None:
        h = input_prompt.prepend(h)
        cls_index = input_prompt.length

    prefixes = prompt_set.layer_prefixes(tape, B) if prompt_set is not None else {}
    if prefixes and max(prefixes) >= cfg.depth:
        raise ConfigError(f"prompts target block {max(prefixes) + 1} but depth is {cfg.depth}", key="prompt_layers")
    for i in range(cfg.depth):
        h = attention_block(h, params, i, prefixes.get(i))
    return reshape(take(h, 1, cls_index, cls_index + 1), (B, cfg.hidden_dim))


def encode_frozen(params: EncoderParams, batch: np.ndarray) -> np.ndarray:
    """Prompt-free features without recording a graph"""
    return encode(TapeGraph(record=False), params, batch).data.copy()


def learnable_count(parameters: Dict[str, Tensor]) -> int:
    return int(sum(t.data.size for t in parameters.values()))
