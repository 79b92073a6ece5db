"""Query-conditioned correspondence network.

Both images pass through one shared convolutional backbone; the two feature
maps are laid side by side along the width axis and summed with a sinusoidal
encoding of the joint coordinate grid, so attention can tell locations in
the two halves apart while treating them as one token sequence. A
transformer encoder mixes that sequence; a decoder with cross-attention only
(queries never attend to each other) turns each encoded query coordinate
into a feature vector, which a small MLP regresses to a point in the second
image's unit square.

The alternative head (``variant="mlp"``) max-pools each feature map to one
global latent vector and regresses the target point from
[query encoding, latent, latent'] with a plain MLP. It exists to show what
is lost without attention: it has no mechanism to express motion
discontinuities and serves as the ablation baseline.

Every operation along the query axis routes through the row-stable matmul,
so a batch of queries is bit-identical to the same queries run one at a
time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad

__all__ = [
    "ModelConfig",
    "QueryPoint",
    "EmptyQueryError",
    "positional_encoding",
    "context_grid",
    "init_params",
    "backbone_features",
    "build_context",
    "model_forward",
    "forward_correspondence",
    "forward_mlp_variant",
    "parameter_count",
]

DOWNSAMPLE = 16  # four stride-2 stages
POS_REFERENCE = 256  # resolution at which pixel thresholds are quoted


class EmptyQueryError(ValueError):
    """Raised when a forward pass is asked to resolve zero queries."""


@dataclass(frozen=True)
class QueryPoint:
    """A point in the unit square of the first image."""

    u: float
    v: float

    def __post_init__(self):
        if not (0.0 <= self.u <= 1.0 and 0.0 <= self.v <= 1.0):
            raise ValueError(f"query ({self.u}, {self.v}) outside [0,1]^2")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    input_size: square model input edge, multiple of 16.
    d_model: channel width of the context/decoder, multiple of 4,
        divisible by heads.
    pos_enc_mode: "linear" (frequencies k*pi) or "loglinear" (the usual
        geometric schedule, kept for the encoding ablation).
    variant: "transformer" or "mlp" (global-latent ablation baseline).
    """

    input_size: int = 128
    d_model: int = 64
    enc_layers: int = 3
    dec_layers: int = 3
    heads: int = 4
    head_hidden: int = 128
    pos_enc_mode: str = "linear"
    variant: str = "transformer"

    def __post_init__(self):
        if self.input_size % DOWNSAMPLE != 0 or self.input_size < DOWNSAMPLE:
            raise ValueError(f"input_size {self.input_size} not a positive multiple of 16")
        if self.d_model % 4 != 0:
            raise ValueError(f"d_model {self.d_model} not a multiple of 4")
        if self.d_model % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide d_model {self.d_model}")
        if self.pos_enc_mode not in ("linear", "loglinear"):
            raise ValueError(f"unknown pos_enc_mode {self.pos_enc_mode!r}")
        if self.variant not in ("transformer", "mlp"):
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def feat_size(self):
        return self.input_size // DOWNSAMPLE

    @property
    def ffn_hidden(self):
        return 2 * self.d_model

    def to_dict(self):
        return {
            "input_size": self.input_size,
            "d_model": self.d_model,
            "enc_layers": self.enc_layers,
            "dec_layers": self.dec_layers,
            "heads": self.heads,
            "head_hidden": self.head_hidden,
            "pos_enc_mode": self.pos_enc_mode,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d):
        kwargs = {k: (v if k in ("pos_enc_mode", "variant") else int(v))
                  for k, v in d.items()}
        return cls(**kwargs)


# -- positional encoding ------------------------------------------------------


def _frequencies(n_channels, mode, dtype=np.float64):
    k = n_channels // 4
    if mode == "linear":
        return (np.arange(1, k + 1, dtype=dtype) * np.pi).astype(dtype)
    # geometric fall-off from pi, base 10000, mirroring the common schedule
    expo = np.arange(k, dtype=dtype) / max(k - 1, 1)
    return (np.pi * (10000.0 ** -expo)).astype(dtype)


def positional_encoding(xy, n_channels, mode="linear"):
    """Sinusoidal embedding of 2-D coordinates, length ``n_channels``.

    Block k of four channels is [sin(f_k*u), sin(f_k*v), cos(f_k*u),
    cos(f_k*v)] with f_k = k*pi in linear mode. Accepts any leading shape.
    """
    xy = np.asarray(xy)
    if n_channels % 4 != 0:
        raise ValueError(f"n_channels {n_channels} not a multiple of 4")
    freqs = _frequencies(n_channels, mode, dtype=xy.dtype if xy.dtype in
                         (np.float32, np.float64) else np.float64)
    angles = xy[..., None, :] * freqs[:, None]        # (..., K, 2)
    blocks = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return blocks.reshape(xy.shape[:-1] + (n_channels,))


def encode_points(xy, n_channels, mode="linear"):
    """Tape-recorded twin of positional_encoding for tensor inputs.

    Needed when the coordinates being encoded are themselves model outputs
    (the return leg of the cycle loss); gradients flow through sin/cos.
    Uses the same elementwise kernels, so values are bit-identical to the
    numpy path.
    """
    if not isinstance(xy, Tensor):
        return Tensor(positional_encoding(xy, n_channels, mode))
    freqs = _frequencies(n_channels, mode, dtype=xy.dtype)
    k = n_channels // 4
    angles = T.multiply(T.reshape(xy, xy.shape[:-1] + (1, 2)),
                        Tensor(freqs.reshape(k, 1)))
    blocks = T.concat([T.sin(angles), T.cos(angles)], axis=-1)
    return T.reshape(blocks, xy.shape[:-1] + (n_channels,))


def context_grid(config):
    """Joint coordinate grid over the two side-by-side feature maps.

    Cell (i, j) holds (x, y) = (j / W_f, i / H_f); x runs over [0, 2) so the
    right half (the second image) occupies x in [1, 2).
    """
    f = config.feat_size
    ys, xs = np.meshgrid(np.arange(f) / f, np.arange(2 * f) / f, indexing="ij")
    return np.stack([xs, ys], axis=-1)  # (H_f, 2*W_f, 2)


# -- parameters ---------------------------------------------------------------


def _backbone_channels(d_model):
    return [max(d_model // 4, 4), max(d_model // 2, 4), d_model, d_model]


def init_params(config, seed=0, dtype=np.float32):
    """Deterministically initialized parameter dict (name -> Tensor).

    Convolutions use He-normal fan-in init, attention and linear layers
    Xavier-uniform, norms identity. The final regressor bias starts at 0.5
    so untrained outputs sit at the center of the unit square.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def put(name, arr):
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)

    def conv(name, kh, kw, cin, cout):
        std = np.sqrt(2.0 / (kh * kw * cin))
        put(f"{name}.w", rng.normal(0.0, std, size=(kh, kw, cin, cout)))
        put(f"{name}.b", np.zeros(cout))

    def linear(name, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        put(f"{name}.w", rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        put(f"{name}.b", np.zeros(fan_out))

    def layer_norm(name, width):
        put(f"{name}.g", np.ones(width))
        put(f"{name}.b", np.zeros(width))

    n = config.d_model
    chans = _backbone_channels(n)
    cin = 3
    for i, cout in enumerate(chans, start=1):
        conv(f"backbone.conv{i}", 3, 3, cin, cout)
        cin = cout
    conv("backbone.proj", 1, 1, cin, n)

    if config.variant == "transformer":
        for stack, depth in (("enc", config.enc_layers), ("dec", config.dec_layers)):
            for i in range(depth):
                for proj in ("wq", "wk", "wv", "wo"):
                    linear(f"{stack}.{i}.attn.{proj}", n, n)
                layer_norm(f"{stack}.{i}.ln1", n)
                linear(f"{stack}.{i}.ffn.l1", n, config.ffn_hidden)
                linear(f"{stack}.{i}.ffn.l2", config.ffn_hidden, n)
                layer_norm(f"{stack}.{i}.ln2", n)
        linear("head.l1", n, config.head_hidden)
        linear("head.l2", config.head_hidden, config.head_hidden)
        linear("head.l3", config.head_hidden, 2)
        params["head.l3.b"] = Tensor(np.full(2, 0.5, dtype=dtype), requires_grad=True)
    else:
        linear("mlp.l1", 3 * n, n)
        linear("mlp.l2", n, n)
        linear("mlp.l3", n, 2)
        params["mlp.l3.b"] = Tensor(np.full(2, 0.5, dtype=dtype), requires_grad=True)
    return params


def parameter_count(params):
    return sum(int(np.prod(t.shape)) for t in params.values())


def backbone_parameter_names(params):
    """Names owned by the convolutional feature extractor (stage-1 freeze set)."""
    return {k for k in params if k.startswith("backbone.")}


# -- forward pieces -----------------------------------------------------------


def _as_image_tensor(img, config, what):
    t = img if isinstance(img, Tensor) else Tensor(np.asarray(img))
    s = config.input_size
    want = (s, s, 3)
    if t.ndim == 3:
        t = T.reshape(t, (1,) + t.shape)
    if t.ndim != 4 or t.shape[1:] != want:
        raise T.ShapeError(f"{what}: expected (B,{s},{s},3), got {t.shape}")
    return t


def backbone_features(images, params, config):
    """Shared CNN: (B,S,S,3) -> (B,S/16,S/16,d_model)."""
    x = images
    for i in range(1, 5):
        x = T.conv2d(x, params[f"backbone.conv{i}.w"], stride=2, pad=1)
        x = T.relu(T.add(x, params[f"backbone.conv{i}.b"]))
    x = T.conv2d(x, params["backbone.proj.w"], stride=1, pad=0)
    return T.add(x, params["backbone.proj.b"])


def build_context(img_a, img_b, params, config):
    """Side-by-side feature map plus grid encoding: (B, H_f, 2*W_f, N)."""
    a = _as_image_tensor(img_a, config, "build_context: first image")
    b = _as_image_tensor(img_b, config, "build_context: second image")
    if a.shape[0] != b.shape[0]:
        raise T.ShapeError(f"build_context: batch sizes differ {a.shape} vs {b.shape}")
    nb = a.shape[0]
    feats = backbone_features(T.concat([a, b], axis=0), params, config)
    left = feats[0:nb]
    right = feats[nb:2 * nb]
    ctx = T.concat([left, right], axis=2)
    pos = positional_encoding(context_grid(config), config.d_model,
                              config.pos_enc_mode).astype(ctx.dtype)
    return T.add(ctx, Tensor(pos))


def paired_context_memories(img_a, img_b, params, config):
    """Encoded memories for (a,b) and the swapped (b,a), sharing one
    backbone pass and one batched encoder pass.

    Training-only plumbing for the cycle loss: the backbone features of a
    pair do not depend on concatenation order, so both directions reuse
    them; gradients from both paths accumulate on the shared nodes.
    """
    a = _as_image_tensor(img_a, config, "first image batch")
    b = _as_image_tensor(img_b, config, "second image batch")
    nb = a.shape[0]
    feats = backbone_features(T.concat([a, b], axis=0), params, config)
    left = feats[0:nb]
    right = feats[nb:2 * nb]
    pos = Tensor(positional_encoding(context_grid(config), config.d_model,
                                     config.pos_enc_mode).astype(feats.dtype))
    ctx_fwd = T.add(T.concat([left, right], axis=2), pos)
    ctx_rev = T.add(T.concat([right, left], axis=2), pos)
    memory = encode_context(T.concat([ctx_fwd, ctx_rev], axis=0), params, config)
    return memory[0:nb], memory[nb:2 * nb]


def _affine_ln(x, params, prefix):
    return T.add(T.multiply(T.layernorm(x), params[f"{prefix}.g"]),
                 params[f"{prefix}.b"])


def _split_heads(x, heads):
    b, t, n = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, n // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def _attention(q_in, kv_in, params, prefix, heads, query_path):
    """Scaled dot-product attention; ``query_path`` keeps rows bit-stable."""
    q = T.add(T.matmul(q_in, params[f"{prefix}.wq.w"], row_stable=query_path),
              params[f"{prefix}.wq.b"])
    k = T.add(T.matmul(kv_in, params[f"{prefix}.wk.w"]), params[f"{prefix}.wk.b"])
    v = T.add(T.matmul(kv_in, params[f"{prefix}.wv.w"]), params[f"{prefix}.wv.b"])
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    # scaling q instead of the score matrix touches h*T fewer elements
    qh = T.multiply(qh, 1.0 / np.sqrt(qh.shape[-1]))
    scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2)), row_stable=query_path)
    mix = T.matmul(T.softmax(scores), vh, row_stable=query_path)
    return T.add(T.matmul(_merge_heads(mix), params[f"{prefix}.wo.w"],
                          row_stable=query_path), params[f"{prefix}.wo.b"])


def _ffn(x, params, prefix, query_path):
    h = T.relu(T.add(T.matmul(x, params[f"{prefix}.l1.w"], row_stable=query_path),
                     params[f"{prefix}.l1.b"]))
    return T.add(T.matmul(h, params[f"{prefix}.l2.w"], row_stable=query_path),
                 params[f"{prefix}.l2.b"])


def encode_context(ctx, params, config):
    """Transformer encoder over the flattened context tokens."""
    b, hf, wf2, n = ctx.shape
    x = T.reshape(ctx, (b, hf * wf2, n))
    for i in range(config.enc_layers):
        p = f"enc.{i}"
        x = _affine_ln(T.add(x, _attention(x, x, params, f"{p}.attn",
                                           config.heads, query_path=False)),
                       params, f"{p}.ln1")
        x = _affine_ln(T.add(x, _ffn(x, params, f"{p}.ffn", query_path=False)),
                       params, f"{p}.ln2")
    return x


def decode_queries(query_emb, memory, params, config, row_stable=True):
    """Cross-attention decoder; no self-attention, queries stay independent.

    ``row_stable`` keeps per-query results bit-identical under any query
    batching; training turns it off for BLAS speed (the math is identical,
    only the accumulation order differs).
    """
    y = query_emb
    for i in range(config.dec_layers):
        p = f"dec.{i}"
        y = _affine_ln(T.add(y, _attention(y, memory, params, f"{p}.attn",
                                           config.heads, query_path=row_stable)),
                       params, f"{p}.ln1")
        y = _affine_ln(T.add(y, _ffn(y, params, f"{p}.ffn", query_path=row_stable)),
                       params, f"{p}.ln2")
    h = T.relu(T.add(T.matmul(y, params["head.l1.w"], row_stable=row_stable),
                     params["head.l1.b"]))
    h = T.relu(T.add(T.matmul(h, params["head.l2.w"], row_stable=row_stable),
                     params["head.l2.b"]))
    return T.add(T.matmul(h, params["head.l3.w"], row_stable=row_stable),
                 params["head.l3.b"])


def _as_query_tensor(queries):
    if isinstance(queries, Tensor):
        q = queries
    else:
        q = Tensor(_queries_to_array(queries))
    if q.ndim == 2:
        q = T.reshape(q, (1,) + q.shape)
    if q.ndim != 3 or q.shape[-1] != 2:
        raise T.ShapeError(f"queries: expected (B,Q,2), got {q.shape}")
    if q.shape[1] == 0:
        raise EmptyQueryError("no query points given")
    return q


def _queries_to_array(queries):
    if isinstance(queries, np.ndarray):
        arr = queries.astype(np.float32, copy=False)
    else:
        seq = list(queries)
        if not seq:
            raise EmptyQueryError("no query points given")
        if isinstance(seq[0], QueryPoint):
            arr = np.array([[p.u, p.v] for p in seq], dtype=np.float32)
        else:
            arr = np.asarray(seq, dtype=np.float32)
    if arr.size == 0:
        raise EmptyQueryError("no query points given")
    return arr


def model_forward(params, config, img_a, img_b, queries, row_stable=True):
    """Differentiable batched forward: (B,Q,2) queries -> (B,Q,2) estimates."""
    q = _as_query_tensor(queries)
    emb = encode_points(q, config.d_model, config.pos_enc_mode)
    if config.variant == "mlp":
        return _mlp_regress(img_a, img_b, emb, params, config, row_stable)
    ctx = build_context(img_a, img_b, params, config)
    memory = encode_context(ctx, params, config)
    return decode_queries(emb, memory, params, config, row_stable=row_stable)


def _mlp_regress(img_a, img_b, emb, params, config, row_stable=True):
    a = _as_image_tensor(img_a, config, "first image")
    b = _as_image_tensor(img_b, config, "second image")
    nb = a.shape[0]
    feats = backbone_features(T.concat([a, b], axis=0), params, config)
    lat = T.amax(feats, axis=(1, 2))               # (2B, N) global latents
    nq = emb.shape[1]
    zeros = Tensor(np.zeros((nb, nq, config.d_model), dtype=emb.dtype))
    lat_a = T.add(T.reshape(lat[0:nb], (nb, 1, config.d_model)), zeros)
    lat_b = T.add(T.reshape(lat[nb:2 * nb], (nb, 1, config.d_model)), zeros)
    x = T.concat([emb, lat_a, lat_b], axis=-1)     # (B, Q, 3N)
    h = T.relu(T.add(T.matmul(x, params["mlp.l1.w"], row_stable=row_stable),
                     params["mlp.l1.b"]))
    h = T.relu(T.add(T.matmul(h, params["mlp.l2.w"], row_stable=row_stable),
                     params["mlp.l2.b"]))
    return T.add(T.matmul(h, params["mlp.l3.w"], row_stable=row_stable),
                 params["mlp.l3.b"])


def forward_correspondence(queries, img_a, img_b, params, config):
    """Inference entry point: query points in image one -> points in image two.

    Returns an (Q, 2) float array of unclamped unit-square coordinates.
    """
    if config.variant != "transformer":
        raise ValueError("forward_correspondence needs a transformer-variant model")
    arr = _queries_to_array(queries)
    with no_grad():
        out = model_forward(params, config, img_a, img_b, arr[None])
    return out.data[0]


def forward_mlp_variant(queries, img_a, img_b, params, config):
    """Ablation twin of forward_correspondence using the global-latent head."""
    if config.variant != "mlp":
        raise ValueError("forward_mlp_variant needs an mlp-variant model")
    arr = _queries_to_array(queries)
    with no_grad():
        out = model_forward(params, config, img_a, img_b, arr[None])
    return out.data[0]


def make_matcher(params, config):
    """Bind parameters into the (queries, img_a, img_b) -> points callable
    shape the inference engine consumes."""
    if config.variant == "mlp":
        def matcher(queries, img_a, img_b, window_a=None, window_b=None):
            return forward_mlp_variant(queries, img_a, img_b, params, config)
    else:
        def matcher(queries, img_a, img_b, window_a=None, window_b=None):
            return forward_correspondence(queries, img_a, img_b, params, config)
    matcher.config = config
    return matcher
