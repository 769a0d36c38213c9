"""Transformer autoencoder for fixed-size multivariate time-series windows.

Channel projection plus fully-trainable positional encoding, a stack of
post-norm transformer layers (multi-head self-attention -> dropout -> skip ->
batch norm -> two-layer GELU network -> dropout -> skip -> batch norm), and an
affine per-time-point reconstruction head back to channel space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import NormState, Tensor
from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class ModelConfig:
    window_len: int
    n_channels: int
    latent_dim: int = 64
    n_heads: int = 8
    query_dim: int = 8  # per-head query/key width
    value_dim: int = 8  # per-head value width
    n_layers: int = 3
    ffn_width: int = 256
    dropout_rate: float = 0.1
    seed: int = 0

    def validate(self):
        sizes = {
            "window_len": self.window_len,
            "n_channels": self.n_channels,
            "latent_dim": self.latent_dim,
            "n_heads": self.n_heads,
            "query_dim": self.query_dim,
            "value_dim": self.value_dim,
            "n_layers": self.n_layers,
            "ffn_width": self.ffn_width,
        }
        for name, v in sizes.items():
            if int(v) < 1:
                raise ParameterError(f"{name} must be >= 1, got {v}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class LayerParams:
    w_query: list  # per head, (latent_dim, query_dim)
    w_key: list  # per head, (latent_dim, query_dim)
    w_value: list  # per head, (latent_dim, value_dim)
    w_aggregate: Tensor  # (n_heads * value_dim, latent_dim)
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    norm1: NormState
    norm2: NormState


@dataclass
class ModelParams:
    config: ModelConfig
    input_proj: Tensor  # (n_channels, latent_dim)
    pos_encoding: Tensor  # (window_len, latent_dim)
    layers: list = field(default_factory=list)
    out_weight: Tensor = None  # (latent_dim, n_channels)
    out_bias: Tensor = None  # (n_channels,)

    def named_parameters(self):
        """Trainable tensors in a fixed, checkpoint-stable order."""
        out = {"input_proj": self.input_proj, "pos_encoding": self.pos_encoding}
        for i, layer in enumerate(self.layers):
            for h in range(len(layer.w_query)):
                out[f"layers.{i}.heads.{h}.w_query"] = layer.w_query[h]
                out[f"layers.{i}.heads.{h}.w_key"] = layer.w_key[h]
                out[f"layers.{i}.heads.{h}.w_value"] = layer.w_value[h]
            out[f"layers.{i}.w_aggregate"] = layer.w_aggregate
            out[f"layers.{i}.fc1_weight"] = layer.fc1_weight
            out[f"layers.{i}.fc1_bias"] = layer.fc1_bias
            out[f"layers.{i}.fc2_weight"] = layer.fc2_weight
            out[f"layers.{i}.fc2_bias"] = layer.fc2_bias
            out[f"layers.{i}.norm1.gain"] = layer.norm1.gain
            out[f"layers.{i}.norm1.bias"] = layer.norm1.bias
            out[f"layers.{i}.norm2.gain"] = layer.norm2.gain
            out[f"layers.{i}.norm2.bias"] = layer.norm2.bias
        out["out_weight"] = self.out_weight
        out["out_bias"] = self.out_bias
        return out

    def named_state(self):
        """Non-trainable running statistics, checkpointed alongside parameters."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.norm1.running_mean"] = layer.norm1.running_mean
            out[f"layers.{i}.norm1.running_var"] = layer.norm1.running_var
            out[f"layers.{i}.norm2.running_mean"] = layer.norm2.running_mean
            out[f"layers.{i}.norm2.running_var"] = layer.norm2.running_var
        return out

    @property
    def dtype(self):
        return self.input_proj.dtype


def param_count(config):
    """Closed-form trainable parameter count for a config."""
    t, m, d = config.window_len, config.n_channels, config.latent_dim
    h, dq, dv = config.n_heads, config.query_dim, config.value_dim
    f = config.ffn_width
    per_layer = h * (2 * d * dq + d * dv) + h * dv * d + (d * f + f) + (f * d + d) + 4 * d
    return m * d + t * d + config.n_layers * per_layer + d * m + m


def _glorot(rng, shape, dtype):
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _param(data):
    return Tensor(data, requires_grad=True)


def init_params(config, dtype=np.float32):
    """Fresh parameters: Glorot-uniform weights, N(0, 0.02^2) positional encoding."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, m, t = config.latent_dim, config.n_channels, config.window_len
    h, dq, dv, f = config.n_heads, config.query_dim, config.value_dim, config.ffn_width

    params = ModelParams(
        config=config,
        input_proj=_param(_glorot(rng, (m, d), dtype)),
        pos_encoding=_param((rng.normal(0.0, 0.02, size=(t, d))).astype(dtype)),
    )
    for _ in range(config.n_layers):
        layer = LayerParams(
            w_query=[_param(_glorot(rng, (d, dq), dtype)) for _ in range(h)],
            w_key=[_param(_glorot(rng, (d, dq), dtype)) for _ in range(h)],
            w_value=[_param(_glorot(rng, (d, dv), dtype)) for _ in range(h)],
            w_aggregate=_param(_glorot(rng, (h * dv, d), dtype)),
            fc1_weight=_param(_glorot(rng, (d, f), dtype)),
            fc1_bias=_param(np.zeros(f, dtype=dtype)),
            fc2_weight=_param(_glorot(rng, (f, d), dtype)),
            fc2_bias=_param(np.zeros(d, dtype=dtype)),
            norm1=NormState.create(d, dtype),
            norm2=NormState.create(d, dtype),
        )
        params.layers.append(layer)
    params.out_weight = _param(_glorot(rng, (d, m), dtype))
    params.out_bias = _param(np.zeros(m, dtype=dtype))
    return params


def params_from_arrays(config, arrays, dtype=np.float32):
    """Rebuild ModelParams from a name -> ndarray mapping (checkpoint load)."""
    params = init_params(config, dtype)
    expected = dict(params.named_parameters())
    expected.update(params.named_state())
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise ParameterError(f"array names do not match config: missing={missing}, extra={extra}")
    for name, target in expected.items():
        src = np.asarray(arrays[name], dtype=dtype)
        dst = target.data if isinstance(target, Tensor) else target
        if src.shape != dst.shape:
            raise ParameterError(f"array {name} has shape {src.shape}, expected {dst.shape}")
        dst[...] = src
    return params


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def embed(x, params):
    """Project channels into latent space and add the positional encoding."""
    cfg = params.config
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=params.dtype))
    if x.ndim != 3 or x.shape[1] != cfg.window_len or x.shape[2] != cfg.n_channels:
        raise DimensionError(
            f"input shape {x.shape} does not match (batch, {cfg.window_len}, {cfg.n_channels})"
        )
    return ad.add(ad.matmul(x, params.input_proj), params.pos_encoding)


def single_head_attention(z, w_query, w_key, w_value, return_probs=False):
    """Scaled dot-product attention for one head: softmax(q k^T / sqrt(dq)) v."""
    q = ad.matmul(z, w_query)
    k = ad.matmul(z, w_key)
    v = ad.matmul(z, w_value)
    dq = w_query.shape[1]
    scores = ad.scale(ad.matmul(q, ad.swap_last2(k)), 1.0 / math.sqrt(dq))
    probs = ad.softmax_rows(scores)
    out = ad.matmul(probs, v)
    return (out, probs) if return_probs else out


def multi_head_attention(z, layer, return_probs=False):
    """All heads in one batched product, concatenated and linearly aggregated.

    Numerically identical to running ``single_head_attention`` per head,
    concatenating along features and multiplying by the aggregation matrix.
    """
    n, t, d = z.shape
    h = len(layer.w_query)
    dq = layer.w_query[0].shape[1]
    dv = layer.w_value[0].shape[1]

    wq = ad.stack(layer.w_query)  # (h, d, dq)
    wk = ad.stack(layer.w_key)
    wv = ad.stack(layer.w_value)
    zb = ad.reshape(z, (n, 1, t, d))
    q = ad.matmul(zb, wq)  # (n, h, t, dq)
    k = ad.matmul(zb, wk)
    v = ad.matmul(zb, wv)  # (n, h, t, dv)
    scores = ad.scale(ad.matmul(q, ad.swap_last2(k)), 1.0 / math.sqrt(dq))
    probs = ad.softmax_rows(scores)  # (n, h, t, t)
    ctx = ad.matmul(probs, v)  # (n, h, t, dv)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, t, h * dv))
    out = ad.matmul(merged, layer.w_aggregate)
    return (out, probs) if return_probs else out


def _fcn(z, layer):
    hidden = ad.gelu(ad.add(ad.matmul(z, layer.fc1_weight), layer.fc1_bias))
    return ad.add(ad.matmul(hidden, layer.fc2_weight), layer.fc2_bias)


def transformer_layer(z, layer, training=False, rng=None, dropout_rate=0.0, return_probs=False):
    """Post-norm update: z <- Norm(drop(MSA(z)) + z); z <- Norm(drop(FCN(z)) + z)."""
    attn, probs = multi_head_attention(z, layer, return_probs=True)
    z = ad.batch_norm(ad.add(ad.dropout(attn, dropout_rate, training, rng), z), layer.norm1, training)
    ffn = _fcn(z, layer)
    z = ad.batch_norm(ad.add(ad.dropout(ffn, dropout_rate, training, rng), z), layer.norm2, training)
    return (z, probs) if return_probs else z


def forward(params, x, training=False, rng=None, capture_attention=False):
    """Reconstruct a batch of windows.

    Returns ``(reconstruction, attentions)`` where ``attentions`` is a list of
    per-layer (batch, heads, time, time) probability arrays when
    ``capture_attention`` is set and an empty list otherwise.
    """
    cfg = params.config
    if training and cfg.dropout_rate > 0.0 and rng is None:
        raise ParameterError("training-mode forward with dropout needs a generator")
    z = embed(x, params)
    attentions = []
    for layer in params.layers:
        z, probs = transformer_layer(
            z, layer, training=training, rng=rng, dropout_rate=cfg.dropout_rate, return_probs=True
        )
        if capture_attention:
            attentions.append(probs.data.copy())
    recon = ad.add(ad.matmul(z, params.out_weight), params.out_bias)
    return recon, attentions
