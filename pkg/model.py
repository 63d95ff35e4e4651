"""
Anchor-free localization network.

The network is a positional encoder, a stack of post-norm transformer encoder
blocks attending over the whole sequence, and two separate heads applied to
every timestep:
- classification: linear -> batch-norm -> ReLU -> linear -> batch-norm -> ReLU
  -> linear(num_classes) -> softmax
- regression: same trunk shape -> linear(2) giving (D_s, D_e) in seconds

Parameters live in a flat, ordered name -> Tensor mapping so checkpoints,
optimisers and gradient checks can iterate them uniformly.
"""

import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from cachetools import LRUCache, cached

import numerics as nx
from dataset import FeatureSequence
from numerics import BatchNormState, Tensor

logger = logging.getLogger(__name__)

POSITIVE_CLASS = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters."""
    feature_dim: int = 2048
    num_heads: int = 16
    ff_dim: int = 168
    num_encoder_blocks: int = 1
    head_hidden_1: int = 1024
    head_hidden_2: int = 512
    num_classes: int = 2
    dropout_rate: float = 0.0
    epsilon: float = 1e-5
    bn_momentum: float = 0.1
    use_positional_encoding: bool = True
    use_regression_head: bool = True
    dtype: str = "float64"
    seed: int | None = None

    def __post_init__(self):
        extents = {
            "feature_dim": self.feature_dim,
            "num_heads": self.num_heads,
            "ff_dim": self.ff_dim,
            "num_encoder_blocks": self.num_encoder_blocks,
            "head_hidden_1": self.head_hidden_1,
            "head_hidden_2": self.head_hidden_2,
        }
        for name, value in extents.items():
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.feature_dim % self.num_heads != 0:
            raise ValueError(f"feature_dim {self.feature_dim} is not divisible by num_heads {self.num_heads}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be 'float64' or 'float32', got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.num_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class ModelParams:
    """All learnable tensors plus batch-norm running statistics."""
    tensors: dict[str, Tensor] = field(default_factory=dict)
    bn_states: dict[str, BatchNormState] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self):
        for tensor in self.tensors.values():
            tensor.zero_grad()


@dataclass
class TimestepPrediction:
    """Per-timestep output: offsets to the boundaries (seconds) and event probability."""
    d_s: float
    d_e: float
    p_event: float


@dataclass
class HeadOutputs:
    """Head outputs for N timestep rows."""
    logits: Tensor
    probs: Tensor
    offsets: Tensor | None

    @property
    def p_event(self) -> Tensor:
        return nx.take(self.probs, (slice(None), POSITIVE_CLASS))

    def predictions(self) -> list[TimestepPrediction]:
        probs = self.probs.values[:, POSITIVE_CLASS]
        if self.offsets is None:
            offsets = np.zeros((len(probs), 2))
        else:
            offsets = self.offsets.values
        return [
            TimestepPrediction(d_s=float(o[0]), d_e=float(o[1]), p_event=float(p))
            for o, p in zip(offsets, probs)
        ]


@dataclass
class BatchOutputs:
    """Head outputs over the valid rows of a padded batch, in (video, step) order."""
    heads: HeadOutputs
    video_index: np.ndarray
    step_index: np.ndarray


# ==========================================
# Parameter construction
# ==========================================

def _head_layers(config: ModelConfig, output_width: int) -> list[tuple[str, int, int]]:
    return [
        ("fc1", config.feature_dim, config.head_hidden_1),
        ("fc2", config.head_hidden_1, config.head_hidden_2),
        ("out", config.head_hidden_2, output_width),
    ]


def _head_names(config: ModelConfig) -> list[tuple[str, int]]:
    heads = [("cls_head", config.num_classes)]
    if config.use_regression_head:
        heads.append(("reg_head", 2))
    return heads


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in canonical order."""
    d, ff = config.feature_dim, config.ff_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for block in range(config.num_encoder_blocks):
        prefix = f"blocks.{block}"
        for name in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{prefix}.attn.{name}"] = (d, d)
        shapes[f"{prefix}.attn.b_o"] = (d,)
        shapes[f"{prefix}.norm1.gain"] = (d,)
        shapes[f"{prefix}.norm1.bias"] = (d,)
        shapes[f"{prefix}.mlp.w1"] = (d, ff)
        shapes[f"{prefix}.mlp.b1"] = (ff,)
        shapes[f"{prefix}.mlp.w2"] = (ff, d)
        shapes[f"{prefix}.mlp.b2"] = (d,)
        shapes[f"{prefix}.norm2.gain"] = (d,)
        shapes[f"{prefix}.norm2.bias"] = (d,)

    for head, width in _head_names(config):
        for layer, fan_in, fan_out in _head_layers(config, width):
            shapes[f"{head}.{layer}.weight"] = (fan_in, fan_out)
            shapes[f"{head}.{layer}.bias"] = (fan_out,)
            if layer != "out":
                bn = "bn1" if layer == "fc1" else "bn2"
                shapes[f"{head}.{bn}.gain"] = (fan_out,)
                shapes[f"{head}.{bn}.bias"] = (fan_out,)
    return shapes


def batch_norm_names(config: ModelConfig) -> dict[str, int]:
    """Name -> width of every batch-norm layer."""
    names = {}
    for head, _ in _head_names(config):
        names[f"{head}.bn1"] = config.head_hidden_1
        names[f"{head}.bn2"] = config.head_hidden_2
    return names


def init_params(config: ModelConfig, seed: int | None = None) -> ModelParams:
    """
    Initialise parameters deterministically from the seed.

    Weight matrices are drawn from U(-b, b) with b = sqrt(6 / (fan_in + fan_out));
    biases are zero and every gain is one.
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(0 if seed is None else seed)
    dtype = config.np_dtype
    params = ModelParams()
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            values = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        params.tensors[name] = Tensor(values.astype(dtype), requires_grad=True, name=name)
    for name, width in batch_norm_names(config).items():
        params.bn_states[name] = BatchNormState.fresh(width, dtype=dtype)
    logger.debug(f"Initialised {params.parameter_count()} parameters")
    return params


# ==========================================
# Network pieces
# ==========================================

@cached(cache=LRUCache(maxsize=64), lock=threading.Lock())
def _positional_table(num_steps: int, dim: int) -> np.ndarray:
    positions = np.arange(num_steps, dtype=np.float64)[:, None]
    rates = np.power(10000.0, np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((num_steps, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions / rates)
    table[:, 1::2] = np.cos(positions / rates)
    table.setflags(write=False)
    return table


def positional_encoding(num_steps: int, dim: int) -> Tensor:
    """Sinusoidal table: PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(...)."""
    if dim % 2 != 0:
        raise ValueError(f"positional_encoding: dimension must be even, got {dim}")
    if num_steps < 1:
        raise ValueError(f"positional_encoding: need at least one timestep, got {num_steps}")
    return Tensor(_positional_table(num_steps, dim))


def _as_batch(x: Tensor, mask) -> tuple[Tensor, np.ndarray, bool]:
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    batch, steps = x.shape[0], x.shape[1]
    if mask is None:
        mask = np.ones((batch, steps), dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(batch, steps)
    return x, mask, squeeze


def multi_head_attention(
    x: Tensor,
    params: ModelParams,
    mask=None,
    num_heads: int = 16,
    prefix: str = "blocks.0.attn",
    return_weights: bool = False,
):
    """
    Full-sequence multi-head self-attention.

    Args:
        x: [T x d] or [B x T x d] input.
        mask: Valid-timestep flags ([T] or [B x T]); padded keys get zero weight.
        num_heads: Head count; d must be divisible by it.

    Returns:
        Tensor shaped like x, or (output, attention weights [B x H x T x T]) when
        return_weights is set.
    """
    x, mask, squeeze = _as_batch(nx.as_tensor(x), mask)
    batch, steps, dim = x.shape
    if dim % num_heads != 0:
        raise ValueError(f"multi_head_attention: d={dim} is not divisible by {num_heads} heads")
    if not np.all(mask.any(axis=1)):
        raise ValueError("multi_head_attention: a sequence has every timestep masked")
    head_dim = dim // num_heads

    def split(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (batch, steps, num_heads, head_dim)), (0, 2, 1, 3))

    q = split(nx.matmul(x, params[f"{prefix}.w_q"]))
    k = split(nx.matmul(x, params[f"{prefix}.w_k"]))
    v = split(nx.matmul(x, params[f"{prefix}.w_v"]))

    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    weights = nx.softmax(scores, axis=-1, mask=mask[:, None, None, :])
    heads = nx.matmul(weights, v)
    merged = nx.reshape(nx.transpose(heads, (0, 2, 1, 3)), (batch, steps, dim))
    out = nx.linear(merged, params[f"{prefix}.w_o"], params[f"{prefix}.b_o"])

    if squeeze:
        out = nx.reshape(out, (steps, dim))
    return (out, weights) if return_weights else out


def encoder_block(
    x: Tensor,
    params: ModelParams,
    mask=None,
    config: ModelConfig | None = None,
    block: int = 0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Post-norm block: X1 = LN(X + MSA(X)); X2 = LN(X1 + MLP(X1)), MLP = linear -> GELU -> linear."""
    config = config or ModelConfig()
    prefix = f"blocks.{block}"
    eps = config.epsilon

    attended = multi_head_attention(x, params, mask, config.num_heads, prefix=f"{prefix}.attn")
    attended = nx.dropout(attended, config.dropout_rate, rng)
    x1 = nx.layer_norm(nx.add(x, attended), params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"], eps)

    hidden = nx.gelu(nx.linear(x1, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    projected = nx.linear(hidden, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    projected = nx.dropout(projected, config.dropout_rate, rng)
    return nx.layer_norm(nx.add(x1, projected), params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"], eps)


def _head_trunk(h: Tensor, params: ModelParams, head: str, mode: str, config: ModelConfig) -> Tensor:
    for layer, bn in (("fc1", "bn1"), ("fc2", "bn2")):
        h = nx.linear(h, params[f"{head}.{layer}.weight"], params[f"{head}.{layer}.bias"])
        h = nx.batch_norm_1d(
            h,
            params[f"{head}.{bn}.gain"],
            params[f"{head}.{bn}.bias"],
            params.bn_states[f"{head}.{bn}"],
            mode=mode,
            epsilon=config.epsilon,
            momentum=config.bn_momentum,
        )
        h = nx.relu(h)
    return nx.linear(h, params[f"{head}.out.weight"], params[f"{head}.out.bias"])


def heads_forward(
    h: Tensor,
    params: ModelParams,
    mode: str = "infer",
    config: ModelConfig | None = None,
) -> HeadOutputs:
    """
    Apply the classification and regression heads to [N x d] timestep rows.

    Raises:
        ValueError: in infer mode when batch-norm statistics were never trained.
    """
    config = config or ModelConfig()
    h = nx.as_tensor(h)
    if h.ndim != 2:
        raise nx.ShapeError(f"heads_forward: expected [N x d] rows, got {h.shape}")
    logits = _head_trunk(h, params, "cls_head", mode, config)
    probs = nx.softmax(logits, axis=-1)
    offsets = _head_trunk(h, params, "reg_head", mode, config) if "reg_head.out.weight" in params else None
    return HeadOutputs(logits=logits, probs=probs, offsets=offsets)


def encode(
    x: Tensor,
    params: ModelParams,
    config: ModelConfig,
    mask=None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Positional encoding (when enabled) followed by the encoder blocks."""
    x = nx.as_tensor(x)
    if config.use_positional_encoding:
        steps = x.shape[-2]
        x = nx.add(x, positional_encoding(steps, x.shape[-1]).values.astype(x.dtype))
    for block in range(config.num_encoder_blocks):
        x = encoder_block(x, params, mask, config, block, rng)
    return x


def forward_batch(
    features: np.ndarray,
    mask: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> BatchOutputs:
    """
    Run the network over a zero-padded [B x T x d] batch.

    Heads see only valid rows, so padded timesteps never reach normalisation
    statistics or losses.
    """
    features = np.asarray(features)
    if features.ndim != 3:
        raise nx.ShapeError(f"forward_batch: expected [B x T x d], got {features.shape}")
    if features.shape[-1] != config.feature_dim:
        raise ValueError(
            f"Feature dimension {features.shape[-1]} does not match model feature_dim {config.feature_dim}"
        )
    mask = np.asarray(mask, dtype=bool)
    x = Tensor(features.astype(config.np_dtype))
    encoded = encode(x, params, config, mask, rng if mode == "train" else None)

    video_index, step_index = np.nonzero(mask)
    rows = nx.take(encoded, (video_index, step_index))
    heads = heads_forward(rows, params, mode, config)
    return BatchOutputs(heads=heads, video_index=video_index, step_index=step_index)


def forward(
    features: FeatureSequence,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> list[TimestepPrediction]:
    """Predict (D_s, D_e, p_event) for every timestep of one video."""
    matrix = np.asarray(features.features)
    if matrix.shape[1] != config.feature_dim:
        raise ValueError(
            f"Video {features.video_id}: feature dimension {matrix.shape[1]} does not match "
            f"model feature_dim {config.feature_dim}"
        )
    outputs = forward_batch(matrix[None], np.ones((1, matrix.shape[0]), dtype=bool), params, config, mode, rng)
    return outputs.heads.predictions()
