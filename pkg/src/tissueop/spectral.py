"""2D discrete Fourier transforms, low-mode truncation, spectral convolution.

Transform convention: the forward transform is the unnormalized double
sum ``F[h](m) = sum_x h(x) exp(-2*pi*i*m.x/n)``; the inverse carries the
``1/(nx*ny)`` factor. This matches the "backward" normalization of
scipy/numpy FFTs.

Mode retention follows the corner convention of spectral-operator
implementations, stated here once:

* Along axis 0 the ``k1`` lowest frequencies are kept in FFT order,
  i.e. grid rows ``{0..ceil(k1/2)-1}`` and ``{nx-floor(k1/2)..nx-1}``
  (the top and bottom corners of the coefficient array).
* Along axis 1 the convolution weights use the real-input transform
  layout: columns ``{0..k2-1}`` store the non-negative frequencies and
  each column ``c > 0`` implicitly acts on the conjugate-partner mode
  ``(-m1, -c)`` with the conjugated weight. This keeps the weight count
  at the non-redundant half-spectrum and makes the convolution output
  exactly real by construction: the padded output spectrum is assembled
  Hermitian-symmetric, so the imaginary part of the inverse transform is
  pure roundoff and is discarded.

``truncate_modes``/``pad_modes`` operate on raw transform coefficients
and use the signed (two-sided) selection on both axes, so ``k1 = nx``,
``k2 = ny`` is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

_workers = 1


def set_fft_workers(n: int) -> None:
    """Set the worker count passed to scipy.fft (values are unaffected)."""
    global _workers
    _workers = int(n)


def _fft2(a: np.ndarray, axes=(-3, -2)) -> np.ndarray:
    return sfft.fft2(a, axes=axes, workers=_workers)


def _ifft2(a: np.ndarray, axes=(-3, -2)) -> np.ndarray:
    return sfft.ifft2(a, axes=axes, workers=_workers)


def _rfft2(a: np.ndarray, axes=(-3, -2)) -> np.ndarray:
    return sfft.rfft2(a, axes=axes, workers=_workers)


def _irfft2(a: np.ndarray, s, axes=(-3, -2)) -> np.ndarray:
    return sfft.irfft2(a, s=s, axes=axes, workers=_workers)


def dft2(values: np.ndarray) -> np.ndarray:
    """Unnormalized 2D DFT per channel. Input (nx, ny, c) real or complex."""
    return _fft2(np.asarray(values), axes=(0, 1))


def idft2(coeffs: np.ndarray) -> np.ndarray:
    """Inverse 2D DFT per channel (scaled by 1/(nx*ny)). Returns complex."""
    return _ifft2(np.asarray(coeffs), axes=(0, 1))


def mode_indices(n: int, k: int) -> np.ndarray:
    """Grid indices of the k lowest frequencies in FFT (corner) order."""
    if not 1 <= k <= n:
        raise ValueError(f"mode count must satisfy 1 <= k <= {n}, got {k}")
    half_up = (k + 1) // 2
    return np.concatenate([np.arange(half_up), np.arange(n - (k - half_up), n)]).astype(np.intp)


def truncate_modes(coeffs: np.ndarray, k1: int, k2: int) -> np.ndarray:
    """Keep the k1 x k2 lowest-frequency coefficients (signed selection)."""
    nx, ny = coeffs.shape[0], coeffs.shape[1]
    rows = mode_indices(nx, k1)
    cols = mode_indices(ny, k2)
    return coeffs[rows[:, None], cols[None, :], ...]

def pad_modes(trunc: np.ndarray, nx: int, ny: int) -> np.ndarray:
    """Zero-fill truncated coefficients back to the full (nx, ny) layout."""
    k1, k2 = trunc.shape[0], trunc.shape[1]
    rows = mode_indices(nx, k1)
    cols = mode_indices(ny, k2)
    full = np.zeros((nx, ny) + trunc.shape[2:], dtype=np.complex128)
    full[rows[:, None], cols[None, :], ...] = trunc
    return full


def max_conv_modes(nx: int, ny: int) -> tuple[int, int]:
    """Largest (k1, k2) a convolution may retain on an nx x ny grid."""
    return nx, ny // 2 + 1


@dataclass(frozen=True)
class SpectralWeights:
    """Per-mode channel-mixing weights of one spectral convolution.

    ``kernel`` is complex with shape (d_out, d_in, k1, k2): k1 rows in
    the signed corner layout, k2 columns in the real-input layout (see
    module docstring).
    """

    kernel: np.ndarray

    def __post_init__(self):
        k = np.ascontiguousarray(np.asarray(self.kernel, dtype=np.complex128))
        if k.ndim != 4:
            raise ValueError(f"kernel must be 4D (d_out, d_in, k1, k2), got {k.shape}")
        if not np.all(np.isfinite(k)):
            raise ValueError("kernel entries must be finite")
        object.__setattr__(self, "kernel", k)

    @property
    def d_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def d_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def k1(self) -> int:
        return self.kernel.shape[2]

    @property
    def k2(self) -> int:
        return self.kernel.shape[3]


def _conv_index_sets(nx: int, ny: int, k1: int, k2: int):
    """Index bookkeeping for the convolution's mode layout.

    Returns (rows, cols, normal_col_mask): retained grid rows, retained
    grid columns, and which columns have a distinct conjugate partner
    (False marks the self-paired columns, i.e. m2 = 0 and the Nyquist
    column on even grids).
    """
    kmax1, kmax2 = max_conv_modes(nx, ny)
    if not 1 <= k1 <= kmax1:
        raise ValueError(f"k1 must be in 1..{kmax1} for nx={nx}, got {k1}")
    if not 1 <= k2 <= kmax2:
        raise ValueError(f"k2 must be in 1..{kmax2} for ny={ny}, got {k2}")
    rows = mode_indices(nx, k1)
    cols = np.arange(k2, dtype=np.intp)
    normal = (ny - cols) % ny != cols
    return rows, cols, normal


def _embed_output_modes(block: np.ndarray, nx: int, ny: int) -> np.ndarray:
    """Zero-fill a retained-mode block into a Hermitian full spectrum.

    ``block`` has shape (..., k1, k2, d). Columns with a distinct
    conjugate partner are mirrored with conjugation; self-paired columns
    are Hermitian-symmetrized along the row axis. The result is exactly
    Hermitian for any input, so its inverse transform is real.
    """
    k1, k2 = block.shape[-3], block.shape[-2]
    rows, cols, normal = _conv_index_sets(nx, ny, k1, k2)
    prows = (-rows) % nx
    full = np.zeros(block.shape[:-3] + (nx, ny, block.shape[-1]), dtype=np.complex128)

    ncols = cols[normal]
    pcols = (ny - ncols) % ny
    full[..., rows[:, None], ncols[None, :], :] = block[..., :, normal, :]
    full[..., prows[:, None], pcols[None, :], :] = np.conj(block[..., :, normal, :])

    for ci in np.nonzero(~normal)[0]:
        col = block[..., :, ci, :]
        c = int(cols[ci])
        for a in range(k1):
            full[..., rows[a], c, :] += 0.5 * col[..., a, :]
            full[..., prows[a], c, :] += 0.5 * np.conj(col[..., a, :])
    return full


def _gather_output_modes(full: np.ndarray, k1: int, k2: int) -> np.ndarray:
    """Adjoint of ``_embed_output_modes`` under the real inner product."""
    nx, ny = full.shape[-3], full.shape[-2]
    rows, cols, normal = _conv_index_sets(nx, ny, k1, k2)
    prows = (-rows) % nx
    block = np.zeros(full.shape[:-3] + (k1, k2, full.shape[-1]), dtype=np.complex128)

    ncols = cols[normal]
    pcols = (ny - ncols) % ny
    block[..., :, normal, :] = (
        full[..., rows[:, None], ncols[None, :], :]
        + np.conj(full[..., prows[:, None], pcols[None, :], :])
    )
    for ci in np.nonzero(~normal)[0]:
        c = int(cols[ci])
        block[..., :, ci, :] = 0.5 * (
            full[..., rows, c, :] + np.conj(full[..., prows, c, :])
        )
    return block


def _embed_output_modes_half(block: np.ndarray, nx: int, ny: int) -> np.ndarray:
    """Half-spectrum variant of ``_embed_output_modes``.

    Since the full embedded spectrum is Hermitian, only columns
    ``0..ny//2`` need materializing; the inverse is then a c2r
    transform. Self-paired columns get the same row symmetrization as
    the full variant.
    """
    k1, k2 = block.shape[-3], block.shape[-2]
    rows, cols, normal = _conv_index_sets(nx, ny, k1, k2)
    prows = (-rows) % nx
    half = np.zeros(block.shape[:-3] + (nx, ny // 2 + 1, block.shape[-1]), dtype=np.complex128)

    ncols = cols[normal]
    half[..., rows[:, None], ncols[None, :], :] = block[..., :, normal, :]
    for ci in np.nonzero(~normal)[0]:
        col = block[..., :, ci, :]
        c = int(cols[ci])
        for a in range(k1):
            half[..., rows[a], c, :] += 0.5 * col[..., a, :]
            half[..., prows[a], c, :] += 0.5 * np.conj(col[..., a, :])
    return half


def _gather_output_modes_real(half: np.ndarray, ny: int, k1: int, k2: int) -> np.ndarray:
    """Gather step of the vjp, specialized to real output cotangents.

    For a real cotangent g the full transform is Hermitian, so the
    conjugate-partner term of the adjoint collapses: normal columns pick
    up a factor 2, self-paired columns a factor 1 (row symmetrization is
    the identity on a Hermitian spectrum). ``half`` is rfft2(g).
    """
    nx = half.shape[-3]
    rows, cols, normal = _conv_index_sets(nx, ny, k1, k2)
    block = half[..., rows[:, None], cols[None, :], :].copy()
    block[..., :, normal, :] *= 2.0
    return block


def _scatter_input_modes_half(
    g_trunc: np.ndarray, nx: int, ny: int
) -> np.ndarray:
    """Half-spectrum form of the input-side adjoint scatter.

    The adjoint of (select retained modes of fft2 of a real field) is
    ``N * Re(ifft2(scatter(.)))``; expressed on the half spectrum for a
    c2r inverse, normal columns carry weight 1/2 and self-paired columns
    are Hermitian-symmetrized along the rows.
    """
    k1, k2 = g_trunc.shape[-3], g_trunc.shape[-2]
    rows, cols, normal = _conv_index_sets(nx, ny, k1, k2)
    prows = (-rows) % nx
    half = np.zeros(g_trunc.shape[:-3] + (nx, ny // 2 + 1, g_trunc.shape[-1]), dtype=np.complex128)

    ncols = cols[normal]
    half[..., rows[:, None], ncols[None, :], :] = 0.5 * g_trunc[..., :, normal, :]
    for ci in np.nonzero(~normal)[0]:
        col = g_trunc[..., :, ci, :]
        c = int(cols[ci])
        for a in range(k1):
            half[..., rows[a], c, :] += 0.5 * col[..., a, :]
            half[..., prows[a], c, :] += 0.5 * np.conj(col[..., a, :])
    return half


def truncated_transform(h: np.ndarray, k1: int, k2: int) -> np.ndarray:
    """Retained-mode coefficients of a real field under the conv layout.

    ``h`` has shape (..., nx, ny, d); the result (..., k1, k2, d). The
    values equal the corresponding entries of the full transform; only
    non-negative column frequencies are retained, so an r2c transform
    suffices.
    """
    nx, ny = h.shape[-3], h.shape[-2]
    rows, cols, _ = _conv_index_sets(nx, ny, k1, k2)
    hhat = _rfft2(h)
    return hhat[..., rows[:, None], cols[None, :], :]


def spectral_conv_with_coeffs(
    h: np.ndarray, weights: SpectralWeights
) -> tuple[np.ndarray, np.ndarray]:
    """Spectral convolution plus the retained input coefficients.

    The coefficients are the forward cache needed by the weight gradient
    in ``spectral_conv_vjp``.
    """
    if h.shape[-1] != weights.d_in:
        raise ValueError(
            f"channel mismatch: field has {h.shape[-1]}, weights expect {weights.d_in}"
        )
    nx, ny = h.shape[-3], h.shape[-2]
    trunc = truncated_transform(h, weights.k1, weights.k2)
    mixed = _mix_modes(weights.kernel, trunc)
    half = _embed_output_modes_half(mixed, nx, ny)
    out = _irfft2(half, s=(nx, ny))
    return np.ascontiguousarray(out), trunc


def _mix_modes(kernel: np.ndarray, trunc: np.ndarray) -> np.ndarray:
    """Apply the per-mode channel-mixing matrices (batched matmul form).

    ``kernel`` (d_out, d_in, k1, k2), ``trunc`` (..., k1, k2, d_in)
    -> (..., k1, k2, d_out). Equivalent to
    ``einsum('oimn,...mni->...mno', kernel, trunc)``.
    """
    d_out, d_in, k1, k2 = kernel.shape
    lead = trunc.shape[:-3]
    b = int(np.prod(lead)) if lead else 1
    kt = kernel.transpose(2, 3, 1, 0).reshape(k1 * k2, d_in, d_out)
    tt = trunc.reshape(b, k1 * k2, d_in).transpose(1, 0, 2)
    mixed = tt @ kt
    return mixed.transpose(1, 0, 2).reshape(lead + (k1, k2, d_out))


def spectral_conv(h: np.ndarray, weights: SpectralWeights) -> np.ndarray:
    """Truncate, mix channels per retained mode, zero-fill, invert.

    ``h`` has shape (..., nx, ny, d_in); the output is real with
    d_out channels.
    """
    out, _ = spectral_conv_with_coeffs(h, weights)
    return out


def spectral_conv_vjp(
    g: np.ndarray, weights: SpectralWeights, trunc: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode derivatives of ``spectral_conv``.

    Given the output cotangent ``g`` (same shape as the output) and the
    cached input coefficients, returns (g_h, g_kernel). The adjoint of
    the unnormalized forward transform is the scaled inverse transform;
    complex weights are differentiated via their real and imaginary
    parts, so ``g_kernel[o, i, m]`` packs d/dRe + i*d/dIm.
    """
    nx, ny = g.shape[-3], g.shape[-2]
    k1, k2 = weights.k1, weights.k2

    g_half = _rfft2(g) / (nx * ny)
    g_mixed = _gather_output_modes_real(g_half, ny, k1, k2)

    d_out, d_in = weights.d_out, weights.d_in
    m = k1 * k2
    gm = g_mixed.reshape(-1, m, d_out).transpose(1, 2, 0)  # (m, d_out, b)
    tr = np.conj(trunc).reshape(-1, m, d_in).transpose(1, 0, 2)  # (m, b, d_in)
    g_kernel = (gm @ tr).reshape(k1, k2, d_out, d_in).transpose(2, 3, 0, 1)
    g_trunc = _mix_modes(np.conj(weights.kernel).transpose(1, 0, 2, 3), g_mixed)

    g_hat_half = _scatter_input_modes_half(g_trunc, nx, ny)
    g_h = (nx * ny) * _irfft2(g_hat_half, s=(nx, ny))
    return np.ascontiguousarray(g_h), g_kernel


def multiplier_spectrum(weights: SpectralWeights, nx: int, ny: int) -> np.ndarray:
    """Full (nx, ny) Hermitian multiplier realized by the convolution.

    For each output/input channel pair the convolution acts as a
    pointwise multiplier on the full spectrum; the equivalent spatial
    kernel is the real inverse transform of this array. Shape
    (d_out, d_in, nx, ny).
    """
    block = np.transpose(weights.kernel, (2, 3, 0, 1)).reshape(
        weights.k1, weights.k2, weights.d_out * weights.d_in
    )
    full = _embed_output_modes(block, nx, ny)
    full = full.reshape(nx, ny, weights.d_out, weights.d_in)
    return np.transpose(full, (2, 3, 0, 1))
