"""Desk-scale GQA transformer (pre-norm RMSNorm, RoPE, SwiGLU) in float32 numpy.

The forward pass materializes attention probabilities so the compression
layer can read the observation-window rows of every layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

DTYPE = np.float32
RMS_EPS = 1e-6
MAGIC = b"FKV1"

# Order of the per-layer tensors in memory and on disk.
LAYER_TENSORS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")


class ConfigError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    hidden_dim: int
    vocab_size: int
    max_seq_len: int
    rope_base: float = 10000.0
    mlp_dim: int = 0  # 0 -> 4 * hidden_dim

    def __post_init__(self):
        if self.mlp_dim == 0:
            object.__setattr__(self, "mlp_dim", 4 * self.hidden_dim)

    @property
    def group_size(self) -> int:
        return self.num_heads // self.num_kv_heads

    @property
    def kv_dim(self) -> int:
        return self.num_kv_heads * self.head_dim

    def validate(self) -> "ModelConfig":
        for name in ("num_layers", "num_heads", "num_kv_heads", "head_dim", "hidden_dim",
                     "vocab_size", "max_seq_len", "mlp_dim"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_heads % self.num_kv_heads:
            raise ConfigError(
                f"num_heads ({self.num_heads}) is not a multiple of num_kv_heads ({self.num_kv_heads})"
            )
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ConfigError(
                f"hidden_dim mismatch: {self.hidden_dim} != num_heads * head_dim "
                f"({self.num_heads} * {self.head_dim})"
            )
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.num_layers < 2:
            raise ConfigError("num_layers must be >= 2")
        if not (self.rope_base > 0 and np.isfinite(self.rope_base)):
            raise ConfigError(f"rope_base must be a positive real, got {self.rope_base}")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def tiny_config(num_layers: int = 4, **overrides) -> ModelConfig:
    """Small config used by tests, demos and the CLI default."""
    cfg = dict(num_layers=num_layers, num_heads=4, num_kv_heads=2, head_dim=8, hidden_dim=32,
               vocab_size=256, max_seq_len=4096, rope_base=10000.0, mlp_dim=64)
    cfg.update(overrides)
    return ModelConfig(**cfg).validate()


def layer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F = config.hidden_dim, config.mlp_dim
    return {
        "attn_norm": (D,),
        "wq": (D, config.num_heads * config.head_dim),
        "wk": (D, config.kv_dim),
        "wv": (D, config.kv_dim),
        "wo": (config.num_heads * config.head_dim, D),
        "mlp_norm": (D,),
        "w_gate": (D, F),
        "w_up": (D, F),
        "w_down": (F, D),
    }


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    embed: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: np.ndarray

    def tensors(self):
        """Yield (name, array) in on-disk order."""
        yield "embed", self.embed
        for i, layer in enumerate(self.layers):
            for name in LAYER_TENSORS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for _, arr in self.tensors():
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def check_finite(self):
        for name, arr in self.tensors():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite values in weight tensor {name}")


def init_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded Gaussian init, every matrix scaled by 1/sqrt(hidden_dim); norm gains are ones."""
    config.validate()
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.hidden_dim)

    def gauss(shape):
        return (rng.standard_normal(shape) * scale).astype(DTYPE)

    embed = gauss((config.vocab_size, config.hidden_dim))
    layers = []
    for _ in range(config.num_layers):
        parts = {}
        for name, shape in layer_shapes(config).items():
            parts[name] = np.ones(shape, DTYPE) if name.endswith("norm") else gauss(shape)
        layers.append(LayerWeights(**parts))
    final_norm = np.ones(config.hidden_dim, DTYPE)
    lm_head = gauss((config.hidden_dim, config.vocab_size))
    weights = ModelWeights(config, embed, layers, final_norm, lm_head)
    weights.check_finite()
    return weights


# -- binary weight file -------------------------------------------------------

_HEADER_FIELDS = ("num_layers", "num_heads", "num_kv_heads", "head_dim", "hidden_dim",
                  "vocab_size", "max_seq_len", "rope_base", "mlp_dim")
_HEADER = struct.Struct("<4s7IfI")


def _tensor_shapes(config: ModelConfig):
    yield (config.vocab_size, config.hidden_dim)
    per_layer = layer_shapes(config)
    for _ in range(config.num_layers):
        for name in LAYER_TENSORS:
            yield per_layer[name]
    yield (config.hidden_dim,)
    yield (config.hidden_dim, config.vocab_size)


def save_weights(weights: ModelWeights, path) -> None:
    cfg = weights.config
    header = _HEADER.pack(MAGIC, *(int(getattr(cfg, f)) for f in _HEADER_FIELDS[:7]),
                          float(cfg.rope_base), int(cfg.mlp_dim))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for _, arr in weights.tensors():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def read_config(path) -> ModelConfig:
    """Parse only the header of a weight file."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic header (expected {MAGIC!r})")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    values = _HEADER.unpack(raw)[1:]
    return ModelConfig(**dict(zip(_HEADER_FIELDS, values)))


def load_weights(path, config: ModelConfig | None = None) -> ModelWeights:
    path = Path(path)
    file_config = read_config(path)
    if config is None:
        config = file_config
    config.validate()
    if file_config != config:
        diff = [f for f in _HEADER_FIELDS if getattr(file_config, f) != getattr(config, f)]
        raise ShapeMismatchError(f"{path}: header disagrees with config on {', '.join(diff)}")

    data = path.read_bytes()[_HEADER.size:]
    shapes = list(_tensor_shapes(config))
    expected = 4 * sum(int(np.prod(s)) for s in shapes)
    if len(data) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} tensor bytes, found {len(data)}")
    if len(data) > expected:
        raise ShapeMismatchError(f"{path}: {len(data) - expected} trailing bytes after last tensor")

    flat = np.frombuffer(data, dtype="<f4")
    arrays, offset = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(flat[offset:offset + n].reshape(shape).astype(DTYPE))
        offset += n

    it = iter(arrays)
    embed = next(it)
    layers = [LayerWeights(**{name: next(it) for name in LAYER_TENSORS})
              for _ in range(config.num_layers)]
    final_norm, lm_head = next(it), next(it)
    weights = ModelWeights(config, embed, layers, final_norm, lm_head)
    weights.check_finite()
    return weights


# -- forward pass -------------------------------------------------------------

@dataclass
class AttentionScores:
    scores: np.ndarray  # [heads, window_queries, context]
    window_size: int
    context_len: int

    @property
    def num_heads(self) -> int:
        return self.scores.shape[0]


@dataclass
class LayerOutput:
    hidden_states: np.ndarray  # [tokens, hidden]
    attention_scores: AttentionScores
    keys: np.ndarray  # [kv_heads, tokens, head_dim], rotary already applied
    values: np.ndarray
    position_ids: np.ndarray = field(default=None)

    @property
    def context_len(self) -> int:
        return self.hidden_states.shape[0]


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    var = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(var + DTYPE(RMS_EPS)) * gain).astype(DTYPE)


def apply_rope(x: np.ndarray, position_ids: np.ndarray, base: float) -> np.ndarray:
    """Rotate-half rotary embedding. x: [..., tokens, head_dim]."""
    d = x.shape[-1]
    inv_freq = 1.0 / (base ** (np.arange(0, d, 2, dtype=np.float64) / d))
    angles = np.outer(position_ids.astype(np.float64), inv_freq)
    cos = np.cos(angles).astype(DTYPE)
    sin = np.sin(angles).astype(DTYPE)
    x1, x2 = x[..., : d // 2], x[..., d // 2:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1).astype(DTYPE)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return (e / np.sum(e, axis=axis, keepdims=True)).astype(DTYPE)


def silu(x: np.ndarray) -> np.ndarray:
    return (x / (DTYPE(1.0) + np.exp(-x))).astype(DTYPE)


def embed_tokens(weights: ModelWeights, token_ids) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    cfg = weights.config
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token_ids must be a nonempty 1-D sequence")
    if ids.size > cfg.max_seq_len:
        raise ValueError(f"input of {ids.size} tokens exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of vocab range [0, {cfg.vocab_size})")
    return weights.embed[ids].copy()


def mlp(layer: LayerWeights, x: np.ndarray) -> np.ndarray:
    h = rms_norm(x, layer.mlp_norm)
    return (silu(h @ layer.w_gate) * (h @ layer.w_up)) @ layer.w_down


def qkv(weights: ModelWeights, layer: LayerWeights, h: np.ndarray, position_ids: np.ndarray):
    """Project normed hidden states to rotated q [H,T,d], rotated k [KV,T,d], v [KV,T,d]."""
    cfg = weights.config
    T = h.shape[0]
    q = (h @ layer.wq).reshape(T, cfg.num_heads, cfg.head_dim).transpose(1, 0, 2)
    k = (h @ layer.wk).reshape(T, cfg.num_kv_heads, cfg.head_dim).transpose(1, 0, 2)
    v = (h @ layer.wv).reshape(T, cfg.num_kv_heads, cfg.head_dim).transpose(1, 0, 2)
    q = apply_rope(q, position_ids, cfg.rope_base)
    k = apply_rope(k, position_ids, cfg.rope_base)
    return q, k, np.ascontiguousarray(v)


def layer_forward(weights: ModelWeights, layer_index: int, hidden_states: np.ndarray,
                  position_ids, window_size: int = 8) -> LayerOutput:
    cfg = weights.config
    if not 0 <= layer_index < cfg.num_layers:
        raise IndexError(f"layer_index {layer_index} out of range for {cfg.num_layers} layers")
    x = np.asarray(hidden_states, dtype=DTYPE)
    pos = np.asarray(position_ids, dtype=np.int64)
    T = x.shape[0]
    if T == 0:
        raise ValueError("hidden_states must be nonempty")
    if pos.shape != (T,):
        raise ValueError(f"position_ids length {pos.shape} does not match {T} hidden states")
    if T > 1 and np.any(np.diff(pos) <= 0):
        raise ValueError("position_ids must be strictly increasing")

    layer = weights.layers[layer_index]
    q, k, v = qkv(weights, layer, rms_norm(x, layer.attn_norm), pos)

    w = min(window_size, T)
    scale = DTYPE(1.0 / np.sqrt(cfg.head_dim))
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    ctx = np.empty((cfg.num_heads, T, cfg.head_dim), DTYPE)
    window_scores = np.empty((cfg.num_heads, w, T), DTYPE)
    for h in range(cfg.num_heads):
        g = h // cfg.group_size
        logits = (q[h] @ k[g].T) * scale
        logits[future] = -np.inf
        probs = softmax(logits)
        ctx[h] = probs @ v[g]
        window_scores[h] = probs[T - w:]

    attn = ctx.transpose(1, 0, 2).reshape(T, cfg.hidden_dim) @ layer.wo
    x = x + attn
    x = (x + mlp(layer, x)).astype(DTYPE)
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activations at layer {layer_index}")
    return LayerOutput(x, AttentionScores(window_scores, window_size, T), k, v, pos)


def lm_logits(weights: ModelWeights, last_hidden: np.ndarray) -> np.ndarray:
    return (rms_norm(last_hidden, weights.final_norm) @ weights.lm_head).astype(DTYPE)


def full_prefill(weights: ModelWeights, token_ids, window_size: int = 8):
    """Full-context reference pass. Returns (per-layer outputs, last-token logits)."""
    x = embed_tokens(weights, token_ids)
    pos = np.arange(x.shape[0], dtype=np.int64)
    outputs = []
    for i in range(weights.config.num_layers):
        out = layer_forward(weights, i, x, pos, window_size)
        outputs.append(out)
        x = out.hidden_states
    return outputs, lm_logits(weights, x[-1])
