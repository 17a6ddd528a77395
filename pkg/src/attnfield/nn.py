"""Reusable neural blocks: multi-head attention, residual Norm/FFN blocks,
sinusoidal encodings, and the view-shared convolutional feature extractor.

All blocks operate on tensors of shape (..., tokens, width); leading axes
are treated as batch dimensions, so the same code serves a single query
point and a flattened batch of ray samples.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T

_MASK_OFF = -1e9  # pre-softmax score for masked key tokens


@dataclass
class AttentionParams:
    """Stacked per-head projections: wq/wk (d_q|d_kk, H*d_h), wv (d_v, H*d_h),
    wo (H*d_h, d_out). ``scale_width`` is the model width used in the
    1/sqrt(d_k) score scaling.
    """

    wq: T.DiffTensor
    wk: T.DiffTensor
    wv: T.DiffTensor
    wo: T.DiffTensor
    heads: int
    d_head: int
    scale_width: int


@dataclass
class BlockParams:
    attn: AttentionParams
    ln1_gain: T.DiffTensor
    ln1_bias: T.DiffTensor
    ln2_gain: T.DiffTensor
    ln2_bias: T.DiffTensor
    ffn_w1: T.DiffTensor
    ffn_b1: T.DiffTensor
    ffn_w2: T.DiffTensor
    ffn_b2: T.DiffTensor


@dataclass
class FeatureExtractorParams:
    """Three same-resolution 3x3 conv layers (3 -> hidden -> hidden -> c_out)."""

    w1: T.DiffTensor
    b1: T.DiffTensor
    w2: T.DiffTensor
    b2: T.DiffTensor
    w3: T.DiffTensor
    b3: T.DiffTensor


def init_attention(store, prefix, d_q, d_kk, d_v, heads, d_head, d_out=None):
    """Create attention weights in ``store``. Requires heads*d_head == d_q."""
    if heads * d_head != d_q:
        raise ValueError(f"heads*d_head must equal model width: {heads}*{d_head} != {d_q}")
    d_out = d_out or d_q
    hd = heads * d_head
    return AttentionParams(
        wq=store.create(f"{prefix}.wq", (d_q, hd), fan_in=d_q),
        wk=store.create(f"{prefix}.wk", (d_kk, hd), fan_in=d_kk),
        wv=store.create(f"{prefix}.wv", (d_v, hd), fan_in=d_v),
        wo=store.create(f"{prefix}.wo", (hd, d_out), fan_in=hd),
        heads=heads,
        d_head=d_head,
        scale_width=d_q,
    )


def init_block(store, prefix, d_model, d_ffn, heads, d_head, d_kk=None, d_v=None):
    attn = init_attention(store, f"{prefix}.attn", d_model, d_kk or d_model,
                          d_v or d_model, heads, d_head)
    return BlockParams(
        attn=attn,
        ln1_gain=store.create(f"{prefix}.ln1.gain", (d_model,), fan_in=1),
        ln1_bias=store.create(f"{prefix}.ln1.bias", (d_model,), fan_in=1),
        ffn_w1=store.create(f"{prefix}.ffn.w1", (d_model, d_ffn), fan_in=d_model),
        ffn_b1=store.create(f"{prefix}.ffn.b1", (d_ffn,), fan_in=d_model),
        ffn_w2=store.create(f"{prefix}.ffn.w2", (d_ffn, d_model), fan_in=d_ffn),
        ffn_b2=store.create(f"{prefix}.ffn.b2", (d_model,), fan_in=d_ffn),
        ln2_gain=store.create(f"{prefix}.ln2.gain", (d_model,), fan_in=1),
        ln2_bias=store.create(f"{prefix}.ln2.bias", (d_model,), fan_in=1),
    )


def init_feature_extractor(store, prefix, c_out, hidden=16):
    def conv(name, ci, co):
        return (store.create(f"{prefix}.{name}.w", (3, 3, ci, co), fan_in=9 * ci),
                store.create(f"{prefix}.{name}.b", (co,), fan_in=9 * ci))

    w1, b1 = conv("conv1", 3, hidden)
    w2, b2 = conv("conv2", hidden, hidden)
    w3, b3 = conv("conv3", hidden, c_out)
    return FeatureExtractorParams(w1, b1, w2, b2, w3, b3)


def _split_heads(x, heads, d_head):
    """(..., N, H*d_h) -> (..., H, N, d_h)."""
    lead = x.shape[:-2]
    n = x.shape[-2]
    x = T.reshape(x, lead + (n, heads, d_head))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(x, axes)


def multi_head_attention(q, k, v, params, key_mask=None):
    """Scaled dot-product attention with concatenated heads.

    q: (..., N_q, d_q); k: (..., N_kv, d_kk); v: (..., N_kv, d_v).
    ``key_mask`` is an optional boolean ndarray broadcastable to
    (..., N_kv); False keys get a large negative pre-softmax score.
    The score denominator is sqrt of the model width (not the per-head
    width) -- see README for the convention note.
    """
    q, k, v = T.constant(q), T.constant(k), T.constant(v)
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value token counts differ: {k.shape[-2]} vs {v.shape[-2]}")
    h, dh = params.heads, params.d_head
    qh = _split_heads(T.matmul(q, params.wq), h, dh)  # (..., H, Nq, dh)
    kh = _split_heads(T.matmul(k, params.wk), h, dh)
    vh = _split_heads(T.matmul(v, params.wv), h, dh)
    kt_axes = tuple(range(kh.data.ndim - 2)) + (kh.data.ndim - 1, kh.data.ndim - 2)
    scores = T.matmul(qh, T.transpose(kh, kt_axes)) * (1.0 / np.sqrt(params.scale_width))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, _MASK_OFF)
        scores = scores + bias[..., None, None, :]  # broadcast over heads and queries
    att = T.softmax_rows(scores)
    out = T.matmul(att, vh)  # (..., H, Nq, dh)
    lead = out.shape[:-3]
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    out = T.transpose(out, axes)  # (..., Nq, H, dh)
    out = T.reshape(out, lead + (q.shape[-2], h * dh))
    return T.matmul(out, params.wo)


def encoder_block(tokens, params, cross=None, key_mask=None):
    """Residual block: Norm(Attn + X) then Norm(FFN + .).

    Self-attention when ``cross`` is None, otherwise cross-attention with
    ``cross = (keys, values)`` held fixed.
    """
    if cross is None:
        att = multi_head_attention(tokens, tokens, tokens, params.attn, key_mask)
    else:
        att = multi_head_attention(tokens, cross[0], cross[1], params.attn, key_mask)
    x = T.layer_norm(att + tokens, params.ln1_gain, params.ln1_bias)
    hidden = T.relu(T.matmul(x, params.ffn_w1) + params.ffn_b1)
    ffn = T.matmul(hidden, params.ffn_w2) + params.ffn_b2
    return T.layer_norm(ffn + x, params.ln2_gain, params.ln2_bias)


def sinusoid_rows(values, d, scale=1.0):
    """Sine/cosine rows for arbitrary positions: values (...,) -> (..., d).

    Entry (..., 2i) = sin(pos*scale / 10000^(2i/d)), entry (..., 2i+1) the
    cosine of the same argument.
    """
    if d % 2:
        raise ValueError(f"encoding width must be even, got {d}")
    values = np.asarray(values, dtype=np.float64)
    freqs = 1.0 / np.power(10000.0, 2.0 * np.arange(d // 2) / d)
    ang = values[..., None] * scale * freqs
    out = np.empty(values.shape + (d,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def positional_encoding(count, d, scale=1.0):
    """Sinusoidal table for integer positions 0..count-1, shape (count, d)."""
    return sinusoid_rows(np.arange(count, dtype=np.float64), d, scale)


def frequency_embedding(x, levels):
    """Per-coordinate frequency features: x (..., n) -> (..., 2*levels*n).

    Layout is (sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x),
    cos(2^(L-1) pi x)) applied coordinate-wise.
    """
    if levels < 1:
        raise ValueError(f"need at least one frequency level, got {levels}")
    x = np.asarray(x, dtype=np.float64)
    out = []
    for level in range(levels):
        ang = (2.0 ** level) * np.pi * x
        out.append(np.sin(ang))
        out.append(np.cos(ang))
    return np.concatenate(out, axis=-1)


def extract_features(images, params):
    """Pixel-aligned feature maps for a stack of views.

    images: (V, H, W, 3) in [0,1] (ndarray or DiffTensor). The same
    parameters apply to every view, so the extractor is view-shared.
    """
    x = T.constant(images)
    if x.shape[-1] != 3:
        raise ValueError(f"expected RGB input, got {x.shape[-1]} channels")
    x = T.relu(T.conv2d3(x, params.w1, params.b1))
    x = T.relu(T.conv2d3(x, params.w2, params.b2))
    return T.conv2d3(x, params.w3, params.b3)
