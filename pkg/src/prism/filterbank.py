"""Multi-resolution bank of palindromic FIR filters with unit-energy normalization.

Each input channel owns its own filters. A filter of odd length k is stored as
its center-first half ``[w_0, w_1, ..., w_m]`` (m = (k-1)/2) and expanded to the
full palindrome on every forward pass, so symmetry holds bit-exactly no matter
how many optimizer steps have run. Expanded kernels are L2-normalized
(functional weight norm, gradients flow through the quotient) before a centered,
zero-padded cross-correlation of the input.

An asymmetric mode stores full-length free kernels instead; it exists solely so
the symmetry constraint can be isolated in diversity comparisons.
"""

from __future__ import annotations

import numpy as np

from .numerics import Param, Rng, ShapeError


def expand_symmetric(half: np.ndarray) -> np.ndarray:
    """Mirror a center-first half kernel of length m+1 into a palindrome of length 2m+1.

    Works on the last axis, so stacked filter banks expand in one call.
    """
    m = half.shape[-1] - 1
    k = 2 * m + 1
    full = np.empty(half.shape[:-1] + (k,), dtype=half.dtype)
    full[..., m:] = half
    if m:
        full[..., :m] = half[..., :0:-1]
    return full


def fold_symmetric_grad(full_grad: np.ndarray) -> np.ndarray:
    """Adjoint of expand_symmetric: off-center taps collect both mirrored positions."""
    k = full_grad.shape[-1]
    m = (k - 1) // 2
    half = np.empty(full_grad.shape[:-1] + (m + 1,), dtype=full_grad.dtype)
    half[..., 0] = full_grad[..., m]
    if m:
        half[..., 1:] = full_grad[..., m + 1:] + full_grad[..., m - 1::-1]
    return half


def normalize_l2(w: np.ndarray, epsilon: float) -> np.ndarray:
    """w / (||w||_2 + epsilon) along the last axis; the zero vector maps to zero."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    norm = np.sqrt(np.sum(w * w, axis=-1, keepdims=True))
    return w / (norm + epsilon)


def normalize_l2_backward(w: np.ndarray, grad_out: np.ndarray, epsilon: float) -> np.ndarray:
    """Gradient of the loss wrt w given the gradient wrt normalize_l2(w, epsilon).

    For n = ||w||, d(w_i/(n+eps))/dw_j = delta_ij/(n+eps) - w_i w_j / (n (n+eps)^2);
    at w = 0 the quadratic term vanishes and the map is locally w/eps.
    """
    norm = np.sqrt(np.sum(w * w, axis=-1, keepdims=True))
    denom = norm + epsilon
    grad = grad_out / denom
    dot = np.sum(w * grad_out, axis=-1, keepdims=True)
    safe_norm = np.where(norm > 0, norm, 1.0)
    grad -= np.where(norm > 0, w * dot / (safe_norm * denom * denom), 0.0)
    return grad


def conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Centered cross-correlation with zero padding: out[t] = sum_j w_j x[t+j].

    ``w`` is a full odd-length kernel indexed center-first-expanded (w[m] is the
    center tap w_0). Accumulation runs in ascending tap order so the result is
    bit-identical to a naive ascending-index loop. ``x`` may carry leading batch
    axes; the kernel slides along the last axis.
    """
    k = w.shape[-1]
    if k % 2 == 0:
        raise ShapeError(f"conv_same: kernel length must be odd, got {k}")
    if w.ndim != 1:
        raise ShapeError(f"conv_same: expected a 1-D kernel, got shape {w.shape}")
    m = k // 2
    t_len = x.shape[-1]
    xp = np.zeros(x.shape[:-1] + (t_len + 2 * m,), dtype=x.dtype)
    xp[..., m:m + t_len] = x
    out = np.zeros(x.shape, dtype=x.dtype)
    for j in range(k):
        out += w[j] * xp[..., j:j + t_len]
    return out


def frequency_response(w: np.ndarray, n_points: int) -> tuple[np.ndarray, np.ndarray]:
    """DFT of the kernel zero-padded to n_points; returns (spectrum, magnitude)."""
    w = np.asarray(w)
    if n_points < w.shape[-1]:
        raise ValueError(f"n_points={n_points} is smaller than kernel length {w.shape[-1]}")
    padded = np.zeros(w.shape[:-1] + (n_points,), dtype=np.float64)
    padded[..., :w.shape[-1]] = w
    spectrum = np.fft.fft(padded, axis=-1)
    return spectrum, np.abs(spectrum)


def linear_phase_deviation(w: np.ndarray, n_points: int = 256) -> float:
    """Max over DFT bins of |Im(H(w) e^{i w (k-1)/2})|; zero for exact palindromes."""
    k = w.shape[-1]
    spectrum, _ = frequency_response(w, n_points)
    omega = 2.0 * np.pi * np.arange(n_points) / n_points
    rotated = spectrum * np.exp(1j * omega * (k - 1) / 2.0)
    return float(np.max(np.abs(rotated.imag)))


class SymmetricFilterBank:
    """Per-channel bank of learnable FIR filters at several odd kernel sizes.

    Filters never mix channels. The flat filter index f enumerates kernel sizes
    in ascending order, n_filters_per_size slots each, so the bank output for a
    batch is (B, C, F, T) with F = n_sizes * n_filters_per_size and unchanged T.
    """

    def __init__(
        self,
        n_channels: int,
        kernel_sizes: list[int],
        n_filters_per_size: int,
        *,
        symmetric: bool = True,
        eps_norm: float = 1e-8,
        dtype=np.float32,
        rng: Rng | None = None,
    ):
        if n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if n_filters_per_size < 1:
            raise ValueError("n_filters_per_size must be >= 1")
        sizes = [int(k) for k in kernel_sizes]
        if not sizes:
            raise ValueError("at least one kernel size is required")
        if any(k % 2 == 0 or k < 1 for k in sizes):
            raise ValueError(f"kernel sizes must be odd and >= 1, got {sizes}")
        if sorted(set(sizes)) != sizes:
            raise ValueError(f"kernel sizes must be strictly increasing, got {sizes}")

        self.n_channels = n_channels
        self.kernel_sizes = sizes
        self.n_filters_per_size = n_filters_per_size
        self.n_filters = len(sizes) * n_filters_per_size
        self.symmetric = symmetric
        self.eps_norm = eps_norm
        self.dtype = np.dtype(dtype)
        self._cache = None

        rng = rng or Rng(0)
        self.params: dict[tuple[int, int], Param] = {}
        for ch in range(n_channels):
            for k in sizes:
                stored = (k + 1) // 2 if symmetric else k
                bound = 1.0 / np.sqrt(stored)
                init = rng.child(f"filterbank.ch{ch}.k{k}").uniform(
                    -bound, bound, (n_filters_per_size, stored), dtype=self.dtype
                )
                self.params[(ch, k)] = Param(f"filterbank.ch{ch}.k{k}", init)

    def parameters(self) -> list[Param]:
        return [self.params[(ch, k)] for ch in range(self.n_channels) for k in self.kernel_sizes]

    def filter_index(self) -> list[tuple[int, int]]:
        """Flat filter index f -> (kernel size, slot within that size)."""
        return [(k, s) for k in self.kernel_sizes for s in range(self.n_filters_per_size)]

    def _stacked_weights(self, k: int) -> np.ndarray:
        """Stored weights for one kernel size, stacked to (C, n_f, stored_len)."""
        return np.stack([self.params[(ch, k)].value for ch in range(self.n_channels)])

    def expanded_kernels(self) -> list[dict]:
        """Normalized full-length kernels with metadata, for spectral analysis."""
        out = []
        for ch in range(self.n_channels):
            for k in self.kernel_sizes:
                stored = self.params[(ch, k)].value
                full = expand_symmetric(stored) if self.symmetric else stored
                normed = normalize_l2(full.astype(np.float64), self.eps_norm)
                for slot in range(self.n_filters_per_size):
                    out.append(
                        {"channel": ch, "kernel_size": k, "slot": slot, "kernel": normed[slot]}
                    )
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Filter every channel with every kernel: (B, C, T) -> (B, C, F, T).

        Per filter this is conv_same(channel, normalized expanded kernel); the
        vectorized accumulation visits taps in the same ascending order, so the
        result matches the scalar definition exactly.
        """
        if x.ndim != 3 or x.shape[1] != self.n_channels:
            raise ShapeError(
                f"filter bank expects (B, {self.n_channels}, T) input, got {x.shape}"
            )
        B, C, T = x.shape
        nf = self.n_filters_per_size
        m_max = (max(self.kernel_sizes) - 1) // 2
        xp = np.zeros((B, C, T + 2 * m_max), dtype=x.dtype)
        xp[..., m_max:m_max + T] = x

        out = np.empty((B, C, self.n_filters, T), dtype=x.dtype)
        per_size = []
        for si, k in enumerate(self.kernel_sizes):
            m = (k - 1) // 2
            stored = self._stacked_weights(k)
            full = expand_symmetric(stored) if self.symmetric else stored
            w_hat = normalize_l2(full, self.eps_norm)
            view = xp[..., m_max - m: m_max + m + T + 1]
            acc = np.zeros((B, C, nf, T), dtype=x.dtype)
            for j in range(k):
                acc += w_hat[None, :, :, j, None] * view[:, :, None, j:j + T]
            out[:, :, si * nf:(si + 1) * nf, :] = acc
            per_size.append((k, full, w_hat))
        self._cache = (x, xp, m_max, per_size)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate half-weight gradients and return the gradient wrt the input.

        Kernel-tap gradients are correlations of the saved input with grad_out,
        pushed through the normalization Jacobian and (in symmetric mode) the
        mirror fold; the input gradient is correlation with the flipped kernels.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, xp, m_max, per_size = self._cache
        B, C, T = x.shape
        nf = self.n_filters_per_size
        if grad_out.shape != (B, C, self.n_filters, T):
            raise ShapeError(
                f"grad_out shape {grad_out.shape} does not match bank output "
                f"{(B, C, self.n_filters, T)}"
            )

        grad_x = np.zeros_like(x)
        for si, (k, full, w_hat) in enumerate(per_size):
            m = (k - 1) // 2
            g = grad_out[:, :, si * nf:(si + 1) * nf, :]
            view = xp[..., m_max - m: m_max + m + T + 1]

            dw_hat = np.empty((C, nf, k), dtype=np.float64)
            for j in range(k):
                dw_hat[:, :, j] = np.einsum("bcft,bct->cf", g, view[..., j:j + T])

            gp = np.zeros((B, C, nf, T + 2 * m), dtype=x.dtype)
            gp[..., m:m + T] = g
            for j in range(k):
                grad_x += np.sum(
                    w_hat[None, :, :, k - 1 - j, None] * gp[..., j:j + T], axis=2
                )

            d_full = normalize_l2_backward(full.astype(np.float64), dw_hat, self.eps_norm)
            d_stored = fold_symmetric_grad(d_full) if self.symmetric else d_full
            for ch in range(C):
                p = self.params[(ch, k)]
                p.grad += d_stored[ch].astype(p.grad.dtype)
        return grad_x
