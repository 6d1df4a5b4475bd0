import numpy as np
import pytest

from tissueop.spectral import (
    SpectralWeights,
    _embed_output_modes,
    _ifft2,
    dft2,
    idft2,
    max_conv_modes,
    mode_indices,
    multiplier_spectrum,
    pad_modes,
    spectral_conv,
    spectral_conv_vjp,
    spectral_conv_with_coeffs,
    truncate_modes,
    truncated_transform,
)


def brute_force_dft2(values):
    """O(N^2) double-sum DFT oracle, unnormalized forward convention."""
    nx, ny = values.shape[:2]
    out = np.zeros(values.shape, dtype=complex)
    for m1 in range(nx):
        for m2 in range(ny):
            acc = 0.0
            for a in range(nx):
                for b in range(ny):
                    acc = acc + values[a, b] * np.exp(-2j * np.pi * (m1 * a / nx + m2 * b / ny))
            out[m1, m2] = acc
    return out


def brute_force_idft2(coeffs):
    nx, ny = coeffs.shape[:2]
    out = np.zeros(coeffs.shape, dtype=complex)
    for a in range(nx):
        for b in range(ny):
            acc = 0.0
            for m1 in range(nx):
                for m2 in range(ny):
                    acc = acc + coeffs[m1, m2] * np.exp(2j * np.pi * (m1 * a / nx + m2 * b / ny))
            out[a, b] = acc / (nx * ny)
    return out


def circular_convolution(kernel, h):
    """O(N^2) spatial-domain circular convolution oracle."""
    nx, ny = h.shape
    out = np.zeros((nx, ny))
    for a in range(nx):
        for b in range(ny):
            acc = 0.0
            for p in range(nx):
                for q in range(ny):
                    acc += kernel[p, q] * h[(a - p) % nx, (b - q) % ny]
            out[a, b] = acc
    return out


class TestDft2:
    def test_constant_field_concentrates_at_dc(self):
        for nx, ny in [(4, 4), (5, 7)]:
            c = 2.75
            coeffs = dft2(np.full((nx, ny, 1), c))
            assert abs(coeffs[0, 0, 0] - c * nx * ny) < 1e-12
            coeffs[0, 0, 0] = 0.0
            assert np.max(np.abs(coeffs)) < 1e-12

    def test_roundtrip(self, rng):
        h = rng.standard_normal((6, 9, 3))
        assert np.max(np.abs(idft2(dft2(h)).real - h)) < 1e-12

    def test_matches_brute_force_oracle_2x2(self):
        h = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        assert np.max(np.abs(dft2(h) - brute_force_dft2(h[:, :, 0])[:, :, None])) < 1e-12

    def test_matches_brute_force_oracle_random(self, rng):
        h = rng.standard_normal((4, 5, 1))
        assert np.max(np.abs(dft2(h) - brute_force_dft2(h[:, :, 0])[:, :, None])) < 1e-10


class TestIdft2:
    def test_zero_coefficients(self):
        assert np.all(idft2(np.zeros((5, 5, 2), dtype=complex)) == 0.0)

    def test_single_mode_is_sampled_exponential(self):
        nx, ny = 8, 8
        coeffs = np.zeros((nx, ny, 1), dtype=complex)
        coeffs[1, 0, 0] = 1.0
        out = idft2(coeffs)
        # direct evaluation of the complex exponential
        i = np.arange(nx)
        expected = np.cos(2 * np.pi * i / nx) / (nx * ny)
        assert np.max(np.abs(out.real[:, 0, 0] - expected)) < 1e-14
        assert np.max(np.abs(out.real - expected[:, None, None])) < 1e-14

    def test_matches_brute_force_inverse(self, rng):
        c = rng.standard_normal((4, 4, 1)) + 1j * rng.standard_normal((4, 4, 1))
        assert np.max(np.abs(idft2(c) - brute_force_idft2(c[:, :, 0])[:, :, None])) < 1e-12

    def test_parseval(self, rng):
        h = rng.standard_normal((9, 12, 2))
        coeffs = dft2(h)
        lhs = np.sum(np.abs(h) ** 2)
        rhs = np.sum(np.abs(coeffs) ** 2) / (9 * 12)
        assert abs(lhs - rhs) < 1e-10


class TestTruncation:
    def test_mode_indices_corner_layout(self):
        assert list(mode_indices(21, 8)) == [0, 1, 2, 3, 17, 18, 19, 20]
        assert list(mode_indices(5, 5)) == [0, 1, 2, 3, 4]
        assert list(mode_indices(6, 3)) == [0, 1, 5]

    def test_full_truncation_lossless(self, rng):
        h = rng.standard_normal((6, 8, 2))
        coeffs = dft2(h)
        restored = pad_modes(truncate_modes(coeffs, 6, 8), 6, 8)
        assert np.array_equal(restored, coeffs)
        assert np.max(np.abs(idft2(restored).real - h)) < 1e-12

    def test_truncation_keeps_low_modes(self, rng):
        coeffs = dft2(rng.standard_normal((8, 8, 1)))
        trunc = truncate_modes(coeffs, 3, 3)
        assert trunc.shape == (3, 3, 1)
        assert trunc[0, 0, 0] == coeffs[0, 0, 0]
        assert trunc[2, 2, 0] == coeffs[7, 7, 0]

    def test_bad_mode_count_rejected(self):
        with pytest.raises(ValueError, match="mode count"):
            mode_indices(5, 6)


class TestSpectralConv:
    def test_zero_weights_give_zero(self, rng):
        w = SpectralWeights(np.zeros((2, 2, 3, 3), dtype=complex))
        out = spectral_conv(rng.standard_normal((7, 7, 2)), w)
        assert np.all(out == 0.0)

    def test_identity_multiplier_full_modes(self, rng):
        for nx, ny in [(5, 5), (8, 8), (21, 21)]:
            k1, k2 = max_conv_modes(nx, ny)
            w = SpectralWeights(np.ones((1, 1, k1, k2), dtype=complex))
            h = rng.standard_normal((nx, ny, 1))
            assert np.max(np.abs(spectral_conv(h, w) - h)) < 1e-10

    @pytest.mark.parametrize("n", [4, 8])
    def test_matches_circular_convolution_oracle(self, rng, n):
        k1, k2 = max_conv_modes(n, n)
        w = SpectralWeights(
            rng.standard_normal((1, 1, k1, k2)) + 1j * rng.standard_normal((1, 1, k1, k2))
        )
        h = rng.standard_normal((n, n, 1))
        out = spectral_conv(h, w)
        mult = multiplier_spectrum(w, n, n)[0, 0]
        kernel = brute_force_idft2(mult)
        assert np.max(np.abs(kernel.imag)) < 1e-12  # Hermitian spectrum -> real kernel
        oracle = circular_convolution(kernel.real, h[:, :, 0])
        assert np.max(np.abs(out[:, :, 0] - oracle)) < 1e-10

    def test_linearity(self, rng):
        w = SpectralWeights(
            rng.standard_normal((3, 3, 4, 3)) + 1j * rng.standard_normal((3, 3, 4, 3))
        )
        h1 = rng.standard_normal((9, 9, 3))
        h2 = rng.standard_normal((9, 9, 3))
        a, b = 1.7, -0.4
        lhs = spectral_conv(a * h1 + b * h2, w)
        rhs = a * spectral_conv(h1, w) + b * spectral_conv(h2, w)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_output_exactly_real_imag_residue_tiny(self, rng):
        # assemble the padded spectrum explicitly and check the raw
        # inverse carries only roundoff imaginary parts
        h = rng.standard_normal((9, 9, 2))
        w = SpectralWeights(
            rng.standard_normal((2, 2, 4, 3)) + 1j * rng.standard_normal((2, 2, 4, 3))
        )
        trunc = truncated_transform(h, 4, 3)
        mixed = np.einsum("oimn,mni->mno", w.kernel, trunc)
        full = _embed_output_modes(mixed, 9, 9)
        assert np.max(np.abs(_ifft2(full, axes=(0, 1)).imag)) < 1e-10

    def test_channel_mismatch_rejected(self, rng):
        w = SpectralWeights(np.zeros((2, 2, 2, 2), dtype=complex))
        with pytest.raises(ValueError, match="channel mismatch"):
            spectral_conv(rng.standard_normal((5, 5, 3)), w)

    def test_adjoint_consistency(self, rng):
        for nx, ny, d, k1, k2 in [(6, 7, 3, 4, 3), (8, 8, 2, 8, 5), (5, 4, 2, 3, 3)]:
            w = SpectralWeights(
                rng.standard_normal((d, d, k1, k2)) + 1j * rng.standard_normal((d, d, k1, k2))
            )
            h = rng.standard_normal((2, nx, ny, d))
            g = rng.standard_normal((2, nx, ny, d))
            y, coeffs = spectral_conv_with_coeffs(h, w)
            g_h, _ = spectral_conv_vjp(g, w, coeffs)
            assert abs(np.sum(y * g) - np.sum(h * g_h)) < 1e-10 * max(1.0, abs(np.sum(y * g)))

    def test_weight_gradient_matches_directional_fd(self, rng):
        nx, ny, d, k1, k2 = 6, 6, 2, 4, 3
        w = SpectralWeights(
            rng.standard_normal((d, d, k1, k2)) + 1j * rng.standard_normal((d, d, k1, k2))
        )
        h = rng.standard_normal((nx, ny, d))
        g = rng.standard_normal((nx, ny, d))
        _, coeffs = spectral_conv_with_coeffs(h, w)
        _, g_kernel = spectral_conv_vjp(g, w, coeffs)
        v = rng.standard_normal(w.kernel.shape) + 1j * rng.standard_normal(w.kernel.shape)
        eps = 1e-6

        def loss(kern):
            return float(np.sum(spectral_conv(h, SpectralWeights(kern)) * g))

        fd = (loss(w.kernel + eps * v) - loss(w.kernel - eps * v)) / (2 * eps)
        an = float(np.sum(g_kernel.real * v.real + g_kernel.imag * v.imag))
        assert abs(fd - an) < 1e-6 * max(1.0, abs(fd))
