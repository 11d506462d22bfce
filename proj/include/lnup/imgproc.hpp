#pragma once

// Image filtering kernels shared by curation and feature extraction.
// All neighborhood operations use edge replication and produce a value at
// every pixel, so output grids have the input's shape.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "lnup/image.hpp"

namespace lnup::imgproc {

struct Gradient {
  std::vector<int> gx;
  std::vector<int> gy;
};

// 3x3 Sobel responses.
inline Gradient sobel(const ImageGray& img) {
  const int h = img.height(), w = img.width();
  Gradient g;
  g.gx.resize(img.size());
  g.gy.resize(img.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int p00 = img.clamped(r - 1, c - 1), p01 = img.clamped(r - 1, c), p02 = img.clamped(r - 1, c + 1);
      const int p10 = img.clamped(r, c - 1), p12 = img.clamped(r, c + 1);
      const int p20 = img.clamped(r + 1, c - 1), p21 = img.clamped(r + 1, c), p22 = img.clamped(r + 1, c + 1);
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      g.gx[i] = (p02 + 2 * p12 + p22) - (p00 + 2 * p10 + p20);
      g.gy[i] = (p20 + 2 * p21 + p22) - (p00 + 2 * p01 + p02);
    }
  }
  return g;
}

// 4-neighbour Laplacian [0 1 0; 1 -4 1; 0 1 0].
inline std::vector<int> laplacian(const ImageGray& img) {
  const int h = img.height(), w = img.width();
  std::vector<int> out(img.size());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      out[static_cast<std::size_t>(r) * w + c] = img.clamped(r - 1, c) + img.clamped(r + 1, c) +
                                                 img.clamped(r, c - 1) + img.clamped(r, c + 1) -
                                                 4 * img.at(r, c);
  return out;
}

inline std::vector<std::uint8_t> median3x3(const ImageGray& img) {
  const int h = img.height(), w = img.width();
  std::vector<std::uint8_t> out(img.size());
  std::array<std::uint8_t, 9> win{};
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      int k = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) win[k++] = img.clamped(r + dr, c + dc);
      std::nth_element(win.begin(), win.begin() + 4, win.end());
      out[static_cast<std::size_t>(r) * w + c] = win[4];
    }
  }
  return out;
}

// Per-pixel 3x3 local variance E[I^2] - E[I]^2, evaluated exactly in integers
// as (9*sum_sq - sum^2) / 81.
inline std::vector<double> local_variance3x3(const ImageGray& img) {
  const int h = img.height(), w = img.width();
  std::vector<double> out(img.size());
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      std::int64_t s = 0, s2 = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const std::int64_t v = img.clamped(r + dr, c + dc);
          s += v;
          s2 += v * v;
        }
      out[static_cast<std::size_t>(r) * w + c] = static_cast<double>(9 * s2 - s * s) / 81.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// FFT

using cplx = std::complex<double>;

namespace detail {

inline void fft_pow2(std::vector<cplx>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1 : -1);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        const cplx wk = std::polar(1.0, ang * static_cast<double>(k));
        const cplx u = a[i + k], v = a[i + k + len / 2] * wk;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

// Arbitrary-length forward DFT: radix-2 when possible, Bluestein otherwise.
inline void fft_any(std::vector<cplx>& a) {
  const std::size_t n = a.size();
  if (n <= 1) return;
  if ((n & (n - 1)) == 0) {
    fft_pow2(a, false);
    return;
  }
  std::size_t m = 1;
  while (m < 2 * n - 1) m <<= 1;
  std::vector<cplx> chirp(n);
  for (std::size_t k = 0; k < n; ++k) {
    // k^2 mod 2n keeps the angle argument small and exact.
    const std::size_t kk = (k * k) % (2 * n);
    chirp[k] = std::polar(1.0, -std::numbers::pi * static_cast<double>(kk) / static_cast<double>(n));
  }
  std::vector<cplx> x(m), y(m);
  for (std::size_t k = 0; k < n; ++k) x[k] = a[k] * chirp[k];
  y[0] = std::conj(chirp[0]);
  for (std::size_t k = 1; k < n; ++k) y[k] = y[m - k] = std::conj(chirp[k]);
  fft_pow2(x, false);
  fft_pow2(y, false);
  for (std::size_t i = 0; i < m; ++i) x[i] *= y[i];
  fft_pow2(x, true);
  for (std::size_t k = 0; k < n; ++k) a[k] = x[k] / static_cast<double>(m) * chirp[k];
}

}  // namespace detail

// Unnormalized forward 2-D DFT magnitude, shifted so the zero frequency sits
// at (height/2, width/2) (integer division).
inline std::vector<double> centered_fft_magnitude(const ImageGray& img) {
  const std::size_t h = img.height(), w = img.width();
  std::vector<cplx> grid(h * w);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = img.pixels()[i];

  std::vector<cplx> line(w);
  for (std::size_t r = 0; r < h; ++r) {
    std::copy_n(grid.begin() + r * w, w, line.begin());
    detail::fft_any(line);
    std::copy(line.begin(), line.end(), grid.begin() + r * w);
  }
  line.resize(h);
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) line[r] = grid[r * w + c];
    detail::fft_any(line);
    for (std::size_t r = 0; r < h; ++r) grid[r * w + c] = line[r];
  }

  std::vector<double> mag(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t sr = (r + h / 2) % h, sc = (c + w / 2) % w;
      mag[sr * w + sc] = std::abs(grid[r * w + c]);
    }
  return mag;
}

// ---------------------------------------------------------------------------
// Canny

// Binary edge map (1 = edge). Gradient magnitude is |Gx| + |Gy| from 3x3
// Sobel. Non-maximum suppression quantizes direction into four bins and
// compares against the two neighbours along the gradient, strictly on one side
// and non-strictly on the other (out-of-image neighbours count as zero).
// Pixels above `high` seed 8-connected hysteresis through pixels above `low`.
inline std::vector<std::uint8_t> canny(const ImageGray& img, double low, double high) {
  const int h = img.height(), w = img.width();
  const Gradient g = sobel(img);
  std::vector<int> mag(img.size());
  for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::abs(g.gx[i]) + std::abs(g.gy[i]);
  auto mag_at = [&](int r, int c) -> int {
    if (r < 0 || r >= h || c < 0 || c >= w) return 0;
    return mag[static_cast<std::size_t>(r) * w + c];
  };

  constexpr double kTan22 = 0.41421356237309504880;  // tan(22.5 deg)
  constexpr double kTan67 = 2.41421356237309504880;  // tan(67.5 deg)

  // 0 = suppressed, 1 = weak candidate, 2 = strong.
  std::vector<std::uint8_t> state(img.size(), 0);
  std::vector<std::size_t> stack;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      const int m = mag[i];
      if (m <= low) continue;
      const double ax = std::abs(g.gx[i]), ay = std::abs(g.gy[i]);
      bool keep;
      if (ay < ax * kTan22) {
        keep = m > mag_at(r, c - 1) && m >= mag_at(r, c + 1);
      } else if (ay > ax * kTan67) {
        keep = m > mag_at(r - 1, c) && m >= mag_at(r + 1, c);
      } else {
        const int s = (g.gx[i] < 0) != (g.gy[i] < 0) ? -1 : 1;
        keep = m > mag_at(r - 1, c - s) && m > mag_at(r + 1, c + s);
      }
      if (!keep) continue;
      if (m > high) {
        state[i] = 2;
        stack.push_back(i);
      } else {
        state[i] = 1;
      }
    }
  }

  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const int r = static_cast<int>(i / w), c = static_cast<int>(i % w);
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        const int rr = r + dr, cc = c + dc;
        if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
        const std::size_t j = static_cast<std::size_t>(rr) * w + cc;
        if (state[j] == 1) {
          state[j] = 2;
          stack.push_back(j);
        }
      }
  }

  std::vector<std::uint8_t> edges(img.size());
  for (std::size_t i = 0; i < edges.size(); ++i) edges[i] = state[i] == 2 ? 1 : 0;
  return edges;
}

// ---------------------------------------------------------------------------
// Statistics helpers (population moments, two-pass).

template <typename T>
double mean_of(std::span<const T> xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (const T& x : xs) s += static_cast<double>(x);
  return s / static_cast<double>(xs.size());
}

template <typename T>
double variance_of(std::span<const T> xs) {
  if (xs.empty()) return 0.0;
  const double mu = mean_of(xs);
  double s = 0.0;
  for (const T& x : xs) {
    const double d = static_cast<double>(x) - mu;
    s += d * d;
  }
  return s / static_cast<double>(xs.size());
}

template <typename T>
double stddev_of(std::span<const T> xs) {
  return std::sqrt(variance_of(xs));
}

// Laplacian-response variance, the classic blur indicator.
inline double laplacian_variance(const ImageGray& img) {
  const auto lap = laplacian(img);
  return variance_of(std::span<const int>(lap));
}

}  // namespace lnup::imgproc
