#pragma once

#include <complex>
#include <vector>

#include "dyss/autodiff.hpp"
#include "dyss/tensor.hpp"

namespace dyss {

using cplx = std::complex<double>;

namespace detail {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline void fft_radix2(std::vector<cplx>& a, bool inverse) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    const double pi = 3.14159265358979323846;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        cplx wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            cplx w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                cplx u = a[i + j];
                cplx v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

}  // namespace detail

// DFT of arbitrary length: radix-2 directly, Bluestein's chirp-z otherwise.
inline std::vector<cplx> fft(std::vector<cplx> a, bool inverse = false) {
    const std::size_t n = a.size();
    if (n <= 1) return a;
    if (detail::is_pow2(n)) {
        detail::fft_radix2(a, inverse);
        return a;
    }
    // Bluestein: X_k = w_k * sum_j (a_j w_j) * w^{-(k-j)^2/2 ...} via convolution.
    const double pi = 3.14159265358979323846;
    const double sign = inverse ? 1.0 : -1.0;
    std::size_t m = 1;
    while (m < 2 * n - 1) m <<= 1;
    std::vector<cplx> u(m, cplx(0.0, 0.0)), v(m, cplx(0.0, 0.0));
    std::vector<cplx> chirp(n);
    for (std::size_t j = 0; j < n; ++j) {
        // j^2 mod 2n keeps the argument small for accuracy
        std::size_t q = (j * j) % (2 * n);
        double ang = sign * pi * static_cast<double>(q) / static_cast<double>(n);
        chirp[j] = cplx(std::cos(ang), std::sin(ang));
        u[j] = a[j] * chirp[j];
        v[j] = std::conj(chirp[j]);
        if (j != 0) v[m - j] = std::conj(chirp[j]);
    }
    detail::fft_radix2(u, false);
    detail::fft_radix2(v, false);
    for (std::size_t j = 0; j < m; ++j) u[j] *= v[j];
    detail::fft_radix2(u, true);
    std::vector<cplx> out(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = u[k] * chirp[k];
    if (inverse)
        for (auto& x : out) x /= static_cast<double>(n);
    return out;
}

inline std::vector<cplx> fft_real(const std::vector<double>& x, bool inverse = false) {
    std::vector<cplx> a(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) a[i] = cplx(x[i], 0.0);
    return fft(std::move(a), inverse);
}

// ---- tape ops: spectra stored as real matrices [n x 2d] = (re || im) ----

// Per-row DFT along the feature axis. [n x d] -> [n x 2d].
inline Val dft_rows(Val x) {
    Graph& g = *x.g;
    const Tensor& xv = g.value(x.id);
    detail::require_matrix(xv, "dft_rows");
    const std::size_t n = xv.dim(0), d = xv.dim(1);
    Tensor out(Shape{n, 2 * d});
    std::vector<double> row(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) row[j] = xv.at(i, j);
        auto spec = fft_real(row, false);
        for (std::size_t j = 0; j < d; ++j) {
            out.at(i, j) = spec[j].real();
            out.at(i, d + j) = spec[j].imag();
        }
    }
    const int xid = x.id;
    int id = g.add_node(std::move(out), [xid, n, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& gx = gr.grad(xid);
        // d(out)/dx is the stacked [Re(W); Im(W)] with W the (symmetric) DFT
        // matrix, so grad_x = Re(W g_re) + Im(W g_im).
        std::vector<double> gre(d), gim(d);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                gre[j] = go.data[i * 2 * d + j];
                gim[j] = go.data[i * 2 * d + d + j];
            }
            auto fre = fft_real(gre, false);
            auto fim = fft_real(gim, false);
            for (std::size_t j = 0; j < d; ++j)
                gx.data[i * d + j] += fre[j].real() + fim[j].imag();
        }
    });
    return Val{&g, id};
}

// Real part of the per-row inverse DFT. [n x 2d] -> [n x d].
// idft_rows(dft_rows(x)) == x for real x (round-trip contract).
inline Val idft_rows(Val y) {
    Graph& g = *y.g;
    const Tensor& yv = g.value(y.id);
    detail::require_matrix(yv, "idft_rows");
    if (yv.dim(1) % 2 != 0)
        throw std::invalid_argument("idft_rows: expected 2d columns, got " + shape_str(yv.shape));
    const std::size_t n = yv.dim(0), d = yv.dim(1) / 2;
    Tensor out(Shape{n, d});
    std::vector<cplx> row(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j)
            row[j] = cplx(yv.at(i, j), yv.at(i, d + j));
        auto sig = fft(row, true);
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = sig[j].real();
    }
    const int yid = y.id;
    int id = g.add_node(std::move(out), [yid, n, d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        Tensor& gy = gr.grad(yid);
        std::vector<double> grow(d);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) grow[j] = go.data[i * d + j];
            auto f = fft_real(grow, true);
            for (std::size_t j = 0; j < d; ++j) {
                gy.data[i * 2 * d + j] += f[j].real();
                gy.data[i * 2 * d + d + j] -= f[j].imag();
            }
        }
    });
    return Val{&g, id};
}

}  // namespace dyss
