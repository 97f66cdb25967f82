"""Resolution-informed patch embedding: overlapping patches, per-channel depthwise
patch kernels, pointwise cross-resolution fusion, per-channel affine LayerNorm,
and optional mean pooling over the patch axis.

Patches have length p and stride p/2 (p even); trailing samples that do not fill
a complete patch are dropped. The depthwise stage never mixes resolution bands;
the pointwise stage fuses them into a D-dimensional token. Gated ReLU/dropout
stages (both default off) sit between the norm and the pool.
"""

from __future__ import annotations

import numpy as np

from .numerics import Param, Rng, ShapeError


def patch_count(seq_len: int, patch_len: int) -> int:
    """Number of complete overlapping patches of length p, stride p/2."""
    if patch_len < 2 or patch_len % 2 != 0:
        raise ValueError(f"patch length must be even and >= 2, got {patch_len}")
    if seq_len < patch_len:
        raise ValueError(f"sequence length {seq_len} is shorter than patch length {patch_len}")
    return (seq_len - patch_len) // (patch_len // 2) + 1


def depthwise_patch_conv(h: np.ndarray, v: np.ndarray, patch_len: int) -> np.ndarray:
    """Per-band patch features: z[l, f] = sum_j v[f, j] * h[f, l*p/2 + j].

    ``h`` is (..., F, T) and ``v`` is (..., F, p) with broadcastable leading
    axes. Taps accumulate in ascending j order, matching the scalar definition
    bit for bit. Returns (..., L_p, F).
    """
    p = patch_len
    if v.shape[-1] != p:
        raise ShapeError(f"depthwise kernels have length {v.shape[-1]}, expected {p}")
    if h.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"band counts differ: features have {h.shape[-2]}, kernels have {v.shape[-2]}"
        )
    n_patches = patch_count(h.shape[-1], p)
    p2 = p // 2
    span = (n_patches - 1) * p2 + 1
    out = v[..., 0:1] * h[..., 0:span:p2]
    for j in range(1, p):
        out = out + v[..., j:j + 1] * h[..., j:j + span:p2]
    return np.swapaxes(out, -1, -2)


def pointwise_fuse(z: np.ndarray, p_vecs: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Fuse resolution bands into tokens: X[l] = bias + sum_f p_f * z[l, f].

    ``z`` is (..., L_p, F), ``p_vecs`` is (..., F, D), ``bias`` is (..., D).
    The accumulator starts from the bias and adds bands in ascending f order.
    """
    n_bands = z.shape[-1]
    if p_vecs.shape[-2] != n_bands:
        raise ShapeError(
            f"band counts differ: patch features have {n_bands}, "
            f"projection vectors have {p_vecs.shape[-2]}"
        )
    if bias.shape[-1] != p_vecs.shape[-1]:
        raise ShapeError(
            f"bias length {bias.shape[-1]} does not match embedding dim {p_vecs.shape[-1]}"
        )
    shape = np.broadcast_shapes(
        z.shape[:-1] + (p_vecs.shape[-1],), bias[..., None, :].shape
    )
    out = np.broadcast_to(bias[..., None, :], shape).astype(z.dtype).copy()
    for f in range(n_bands):
        out += z[..., f:f + 1] * p_vecs[..., f, :][..., None, :]
    return out


def layer_norm_forward(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, delta: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standardize each token over its last axis (population variance), then affine.

    Returns (output, x_hat, inv_std); the latter two feed the backward pass.
    """
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + delta)
    x_hat = (x - mean) * inv_std
    return x_hat * gain[..., None, :] + bias[..., None, :], x_hat, inv_std


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, delta: float) -> np.ndarray:
    return layer_norm_forward(x, gain, bias, delta)[0]


def layer_norm_backward(
    grad_out: np.ndarray,
    x_hat: np.ndarray,
    inv_std: np.ndarray,
    gain: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Token-wise LayerNorm gradients.

    Returns (grad_x, grad_gain_per_element, grad_bias_per_element); the caller
    reduces the last two over whatever axes the affine parameters are shared on.
    """
    g = grad_out * gain[..., None, :]
    g_mean = np.mean(g, axis=-1, keepdims=True)
    gx_mean = np.mean(g * x_hat, axis=-1, keepdims=True)
    grad_x = inv_std * (g - g_mean - x_hat * gx_mean)
    return grad_x, grad_out * x_hat, grad_out


def mean_pool(tokens: np.ndarray) -> np.ndarray:
    """Arithmetic mean over the patch axis: (..., L_p, D) -> (..., D)."""
    if tokens.shape[-2] < 1:
        raise ShapeError("mean_pool: empty patch axis")
    return np.mean(tokens, axis=-2)


class PatchEmbedding:
    """Per-channel patch embedding over a filter-bank output (B, C, F, T).

    Pipeline: depthwise patch conv -> pointwise fusion -> LayerNorm ->
    [ReLU] -> [dropout] -> mean pool (optional). Channels share nothing;
    each owns depthwise kernels (F, p), projection vectors (F, D), a fusion
    bias (D), and LayerNorm gain/bias (D).
    """

    def __init__(
        self,
        n_channels: int,
        n_filters: int,
        patch_len: int,
        embed_dim: int,
        *,
        ln_delta: float = 1e-5,
        relu_after_fuse: bool = False,
        dropout_rate: float = 0.0,
        dtype=np.float32,
        rng: Rng | None = None,
    ):
        if patch_len < 2 or patch_len % 2 != 0:
            raise ValueError(f"patch length must be even and >= 2, got {patch_len}")
        if embed_dim < 2:
            raise ValueError(f"embedding dim must be >= 2 for token normalization, got {embed_dim}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
        self.n_channels = n_channels
        self.n_filters = n_filters
        self.patch_len = patch_len
        self.embed_dim = embed_dim
        self.ln_delta = ln_delta
        self.relu_after_fuse = relu_after_fuse
        self.dropout_rate = dropout_rate
        self.dtype = np.dtype(dtype)
        self._cache = None

        rng = rng or Rng(0)
        self.depthwise: list[Param] = []
        self.pointwise: list[Param] = []
        self.fuse_bias: list[Param] = []
        self.ln_gain: list[Param] = []
        self.ln_bias: list[Param] = []
        vb = 1.0 / np.sqrt(patch_len)
        pb = 1.0 / np.sqrt(n_filters)
        for ch in range(n_channels):
            r = rng.child(f"embed.ch{ch}")
            self.depthwise.append(
                Param(f"embed.ch{ch}.depthwise",
                      r.child("v").uniform(-vb, vb, (n_filters, patch_len), dtype=self.dtype))
            )
            self.pointwise.append(
                Param(f"embed.ch{ch}.pointwise",
                      r.child("p").uniform(-pb, pb, (n_filters, embed_dim), dtype=self.dtype))
            )
            self.fuse_bias.append(
                Param(f"embed.ch{ch}.bias", np.zeros(embed_dim, dtype=self.dtype))
            )
            self.ln_gain.append(
                Param(f"norm.ch{ch}.gain", np.ones(embed_dim, dtype=self.dtype))
            )
            self.ln_bias.append(
                Param(f"norm.ch{ch}.bias", np.zeros(embed_dim, dtype=self.dtype))
            )

    def parameters(self) -> list[Param]:
        out = []
        for ch in range(self.n_channels):
            out.extend(
                [self.depthwise[ch], self.pointwise[ch], self.fuse_bias[ch],
                 self.ln_gain[ch], self.ln_bias[ch]]
            )
        return out

    def _stacked(self, plist: list[Param]) -> np.ndarray:
        return np.stack([p.value for p in plist])

    def forward(
        self,
        bank_out: np.ndarray,
        *,
        pooled: bool = True,
        training: bool = False,
        drop_rng: Rng | None = None,
    ) -> np.ndarray:
        """(B, C, F, T) -> (B, C, D) pooled or (B, C, L_p, D) unpooled."""
        if bank_out.ndim != 4 or bank_out.shape[1] != self.n_channels \
                or bank_out.shape[2] != self.n_filters:
            raise ShapeError(
                f"expected (B, {self.n_channels}, {self.n_filters}, T) input, "
                f"got {bank_out.shape}"
            )
        v = self._stacked(self.depthwise)[None]       # (1, C, F, p)
        pv = self._stacked(self.pointwise)[None]      # (1, C, F, D)
        fb = self._stacked(self.fuse_bias)[None]      # (1, C, D)
        gamma = self._stacked(self.ln_gain)[None]     # (1, C, D)
        beta = self._stacked(self.ln_bias)[None]

        z = depthwise_patch_conv(bank_out, v, self.patch_len)   # (B, C, L, F)
        fused = pointwise_fuse(z, pv, fb)                       # (B, C, L, D)
        normed, x_hat, inv_std = layer_norm_forward(fused, gamma, beta, self.ln_delta)

        relu_mask = None
        if self.relu_after_fuse:
            relu_mask = normed > 0
            normed = normed * relu_mask

        drop_mask = None
        if training and self.dropout_rate > 0.0:
            if drop_rng is None:
                raise ValueError("dropout is enabled but no rng was supplied")
            keep = drop_rng.uniform(0.0, 1.0, normed.shape) >= self.dropout_rate
            drop_mask = keep.astype(normed.dtype) / (1.0 - self.dropout_rate)
            normed = normed * drop_mask

        self._cache = (bank_out, z, x_hat, inv_std, relu_mask, drop_mask, pooled)
        return mean_pool(normed) if pooled else normed

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Gradient wrt bank_out; parameter gradients accumulate in place."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        bank_out, z, x_hat, inv_std, relu_mask, drop_mask, pooled = self._cache
        n_patches = z.shape[2]

        if pooled:
            d_norm = np.repeat(grad[:, :, None, :] / n_patches, n_patches, axis=2)
        else:
            d_norm = grad.copy()

        if drop_mask is not None:
            d_norm *= drop_mask
        if relu_mask is not None:
            d_norm *= relu_mask

        gamma = self._stacked(self.ln_gain)[None]
        g = d_norm * gamma
        g_mean = np.mean(g, axis=-1, keepdims=True)
        gx_mean = np.mean(g * x_hat, axis=-1, keepdims=True)
        d_fused = inv_std * (g - g_mean - x_hat * gx_mean)
        d_gain = np.sum(d_norm * x_hat, axis=(0, 2))            # (C, D)
        d_beta = np.sum(d_norm, axis=(0, 2))

        pv = self._stacked(self.pointwise)
        d_bias = np.sum(d_fused, axis=(0, 2))                   # (C, D)
        d_pv = np.einsum("bclf,bcld->cfd", z, d_fused)
        d_z = np.einsum("bcld,cfd->bclf", d_fused, pv)

        v = self._stacked(self.depthwise)
        d_v = np.zeros_like(v)
        d_bank = np.zeros_like(bank_out)
        p2 = self.patch_len // 2
        span = (n_patches - 1) * p2 + 1
        d_z_fl = np.swapaxes(d_z, -1, -2)                       # (B, C, F, L)
        for j in range(self.patch_len):
            h_slice = bank_out[..., j:j + span:p2]              # (B, C, F, L)
            d_v[..., j] = np.einsum("bcfl,bcfl->cf", d_z_fl, h_slice)
            d_bank[..., j:j + span:p2] += v[None, :, :, j, None] * d_z_fl

        for ch in range(self.n_channels):
            self.depthwise[ch].grad += d_v[ch].astype(self.dtype)
            self.pointwise[ch].grad += d_pv[ch].astype(self.dtype)
            self.fuse_bias[ch].grad += d_bias[ch].astype(self.dtype)
            self.ln_gain[ch].grad += d_gain[ch].astype(self.dtype)
            self.ln_bias[ch].grad += d_beta[ch].astype(self.dtype)
        return d_bank
