#pragma once

// Independent reference implementations used by the tests. Everything here
// is written from the feature definitions with plain loops over doubles and
// shares no code with the library beyond the ImageGray/LandmarkSet types.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <deque>
#include <numbers>
#include <vector>

#include "lnup/corpus.hpp"
#include "lnup/image.hpp"

namespace oracle {

using lnup::ImageGray;
using lnup::LandmarkSet;
using lnup::Point2;

struct Grid {
  int h, w;
  std::vector<double> v;
  double operator()(int r, int c) const {
    r = std::clamp(r, 0, h - 1);
    c = std::clamp(c, 0, w - 1);
    return v[static_cast<std::size_t>(r) * w + c];
  }
};

inline Grid grid_of(const ImageGray& img) {
  Grid g{img.height(), img.width(), {}};
  for (auto p : img.pixels()) g.v.push_back(p);
  return g;
}

inline double mean(const std::vector<double>& xs) {
  double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline double pvar(const std::vector<double>& xs) {
  const double m = mean(xs);
  double s = 0;
  for (double x : xs) s += (x - m) * (x - m);
  return s / static_cast<double>(xs.size());
}

inline double pstd(const std::vector<double>& xs) { return std::sqrt(pvar(xs)); }

inline double entropy(const std::vector<double>& px) {
  std::array<double, 256> counts{};
  for (double p : px) counts[static_cast<int>(p)] += 1;
  double e = 0;
  for (double c : counts)
    if (c > 0) {
      const double q = c / static_cast<double>(px.size());
      e += -q * std::log(q);
    }
  return e;
}

// Linear interpolation between sorted samples at q*(n-1).
inline double percentile(std::vector<double> xs, double q) {
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  const double t = pos - static_cast<double>(i);
  if (i + 1 >= xs.size()) return xs.back();
  return xs[i] * (1 - t) + xs[i + 1] * t;
}

struct Sobel {
  std::vector<double> gx, gy;
};

inline Sobel sobel(const Grid& g) {
  static constexpr int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  Sobel s;
  for (int r = 0; r < g.h; ++r)
    for (int c = 0; c < g.w; ++c) {
      double x = 0, y = 0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          x += kx[i][j] * g(r + i - 1, c + j - 1);
          y += ky[i][j] * g(r + i - 1, c + j - 1);
        }
      s.gx.push_back(x);
      s.gy.push_back(y);
    }
  return s;
}

inline std::vector<double> laplacian(const Grid& g) {
  std::vector<double> out;
  for (int r = 0; r < g.h; ++r)
    for (int c = 0; c < g.w; ++c)
      out.push_back(g(r - 1, c) + g(r + 1, c) + g(r, c - 1) + g(r, c + 1) - 4 * g(r, c));
  return out;
}

// Naive O(N^2) 2-D DFT magnitude, shifted so DC lands at (h/2, w/2).
inline std::vector<double> dft_magnitude_centered(const Grid& g) {
  const int h = g.h, w = g.w;
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      std::complex<double> acc = 0;
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const double ang = -2 * std::numbers::pi *
                             (static_cast<double>((u * r) % h) / h + static_cast<double>((v * c) % w) / w);
          acc += g.v[static_cast<std::size_t>(r) * w + c] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
      const int su = (u + h / 2) % h, sv = (v + w / 2) % w;
      out[static_cast<std::size_t>(su) * w + sv] = std::abs(acc);
    }
  return out;
}

// Canny with L1 magnitude, direction bins from atan2, and breadth-first
// hysteresis to a fixed point.
inline std::vector<int> canny(const Grid& g, double low, double high) {
  const auto s = sobel(g);
  const int h = g.h, w = g.w;
  auto idx = [w](int r, int c) { return static_cast<std::size_t>(r) * w + c; };
  std::vector<double> mag(s.gx.size());
  for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::abs(s.gx[i]) + std::abs(s.gy[i]);
  auto M = [&](int r, int c) { return r < 0 || r >= h || c < 0 || c >= w ? 0.0 : mag[idx(r, c)]; };

  std::vector<int> cls(mag.size(), 0);  // 0 none, 1 weak, 2 strong
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double m = M(r, c);
      if (!(m > low)) continue;
      double deg = std::atan2(s.gy[idx(r, c)], s.gx[idx(r, c)]) * 180 / std::numbers::pi;
      if (deg < 0) deg += 180;
      bool peak;
      if (deg < 22.5 || deg > 157.5) peak = m > M(r, c - 1) && m >= M(r, c + 1);
      else if (deg > 67.5 && deg < 112.5) peak = m > M(r - 1, c) && m >= M(r + 1, c);
      else if (deg < 90) peak = m > M(r - 1, c - 1) && m > M(r + 1, c + 1);  // gx, gy same sign
      else peak = m > M(r - 1, c + 1) && m > M(r + 1, c - 1);
      if (peak) cls[idx(r, c)] = m > high ? 2 : 1;
    }
  bool changed = true;
  while (changed) {
    changed = false;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        if (cls[idx(r, c)] != 1) continue;
        for (int dr = -1; dr <= 1 && cls[idx(r, c)] == 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const int rr = r + dr, cc = c + dc;
            if (rr >= 0 && rr < h && cc >= 0 && cc < w && cls[idx(rr, cc)] == 2) {
              cls[idx(r, c)] = 2;
              changed = true;
              break;
            }
          }
      }
  }
  std::vector<int> edges(cls.size());
  for (std::size_t i = 0; i < cls.size(); ++i) edges[i] = cls[i] == 2;
  return edges;
}

inline std::array<double, 6> lighting(const ImageGray& img) {
  const Grid g = grid_of(img);
  double dark = 0, bright = 0;
  for (double p : g.v) {
    if (p < 50) dark += 1;
    if (p > 200) bright += 1;
  }
  const double n = static_cast<double>(g.v.size());
  return {mean(g.v), pstd(g.v), entropy(g.v), dark / n, bright / n, pvar(laplacian(g))};
}

inline std::array<double, 7> quality(const ImageGray& img) {
  const Grid g = grid_of(img);
  const auto s = sobel(g);
  std::vector<double> comb;
  for (std::size_t i = 0; i < s.gx.size(); ++i) comb.push_back(std::abs(s.gx[i]) + std::abs(s.gy[i]));
  const double mu = mean(g.v);
  std::array<double, 256> hist{};
  for (double p : g.v) hist[static_cast<int>(p)] += 1.0 / static_cast<double>(g.v.size());
  double gc = 0;
  for (int i = 0; i < 256; ++i) gc += (i - mu) * (i - mu) * hist[i];
  const double lo = *std::min_element(g.v.begin(), g.v.end());
  const double hi = *std::max_element(g.v.begin(), g.v.end());
  double sq = 0;
  for (double p : g.v) sq += (p - mu) * (p - mu);
  return {pvar(comb),
          std::sqrt(gc),
          percentile(g.v, 0.95) - percentile(g.v, 0.05),
          entropy(g.v),
          hi + lo == 0 ? 0.0 : (hi - lo) / (hi + lo),
          std::sqrt(sq / static_cast<double>(g.v.size())),
          pstd(g.v)};
}

inline std::array<double, 5> noise(const ImageGray& img) {
  const Grid g = grid_of(img);
  std::vector<double> d;
  for (int r = 0; r < g.h - 1; ++r)
    for (int c = 0; c < g.w - 1; ++c) d.push_back(g(r, c) - g(r + 1, c + 1));
  const double sigma = pstd(d);
  double p2 = 0;
  for (double p : g.v) p2 += p * p;
  p2 /= static_cast<double>(g.v.size());
  double snr;
  if (sigma == 0) snr = 1e6;
  else if (p2 == 0) snr = -1e6;
  else snr = std::max(-1e6, std::min(1e6, 10 * std::log10(p2 / (sigma * sigma))));
  std::vector<double> resid, absr;
  for (int r = 0; r < g.h; ++r)
    for (int c = 0; c < g.w; ++c) {
      std::vector<double> win;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) win.push_back(g(r + dr, c + dc));
      std::sort(win.begin(), win.end());
      resid.push_back(g(r, c) - win[4]);
      absr.push_back(std::abs(resid.back()));
    }
  return {sigma, snr, p2 == 0 ? 0.0 : sigma * sigma / p2, pstd(resid), mean(absr)};
}

inline std::array<double, 6> sharpness(const ImageGray& img) {
  const Grid g = grid_of(img);
  const auto s = sobel(g);
  std::vector<double> mag;
  for (std::size_t i = 0; i < s.gx.size(); ++i) mag.push_back(std::sqrt(s.gx[i] * s.gx[i] + s.gy[i] * s.gy[i]));
  const double lv = pvar(laplacian(g));
  const auto spec = dft_magnitude_centered(g);
  const double radius = std::min(g.h, g.w) / 4.0;
  std::vector<double> hf, logs;
  for (int r = 0; r < g.h; ++r)
    for (int c = 0; c < g.w; ++c) {
      const double m = spec[static_cast<std::size_t>(r) * g.w + c];
      logs.push_back(std::log(1 + m));
      const double dr = r - g.h / 2, dc = c - g.w / 2;
      if (std::sqrt(dr * dr + dc * dc) >= radius) hf.push_back(m);
    }
  return {mean(mag), pstd(mag), lv, hf.empty() ? 0.0 : mean(hf), mean(logs), lv};
}

inline std::array<double, 2> texture(const ImageGray& img) {
  const Grid g = grid_of(img);
  std::vector<double> lv;
  for (int r = 0; r < g.h; ++r)
    for (int c = 0; c < g.w; ++c) {
      double s = 0, s2 = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          s += g(r + dr, c + dc) / 9;
          s2 += g(r + dr, c + dc) * g(r + dr, c + dc) / 9;
        }
      lv.push_back(s2 - s * s);
    }
  const auto e = canny(g, 50, 150);
  double edges = 0;
  for (int x : e) edges += x;
  return {mean(lv), edges / static_cast<double>(e.size())};
}

inline double dist(const Point2& a, const Point2& b) {
  return std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y));
}

// EAR for the eye starting at `f`: (|p1-p5| + |p2-p4|) / (2|p0-p3|).
inline double ear(const LandmarkSet& s, int f) {
  const auto& p = s.points;
  return (dist(p[f + 1], p[f + 5]) + dist(p[f + 2], p[f + 4])) / (2 * dist(p[f], p[f + 3]));
}

inline double mar(const LandmarkSet& s) {
  const auto& p = s.points;
  return (dist(p[61], p[67]) + dist(p[63], p[65])) / (2 * dist(p[60], p[64]));
}

inline Point2 mean_point(const LandmarkSet& s, int first, int count) {
  Point2 m;
  for (int i = first; i < first + count; ++i) {
    m.x += s.points[i].x / count;
    m.y += s.points[i].y / count;
  }
  return m;
}

inline std::array<double, 16> geometry(const LandmarkSet* s, double W, double H) {
  std::array<double, 16> f{};
  if (!s) return f;
  const auto& p = s->points;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& q : p) {
    x0 = std::min(x0, q.x), x1 = std::max(x1, q.x);
    y0 = std::min(y0, q.y), y1 = std::max(y1, q.y);
  }
  const Point2 le = mean_point(*s, 36, 6), re = mean_point(*s, 42, 6);
  const double iod = dist(le, re);
  static constexpr int pairs[23][2] = {{0, 16}, {1, 15}, {2, 14}, {3, 13}, {4, 12}, {5, 11}, {6, 10}, {7, 9},
                                       {17, 26}, {18, 25}, {19, 24}, {20, 23}, {21, 22}, {36, 45}, {37, 44},
                                       {38, 43}, {39, 42}, {40, 47}, {41, 46}, {48, 54}, {49, 53}, {50, 52},
                                       {59, 55}};
  double asym = 0;
  for (const auto& pr : pairs) asym += std::abs(dist(p[pr[0]], p[27]) - dist(p[pr[1]], p[27]));
  const Point2 mouth = mean_point(*s, 48, 20);
  f[0] = 1;
  f[1] = s->face_count;
  f[2] = (x1 - x0) * (y1 - y0) / (W * H);
  f[3] = ((x0 + x1) / 2 - W / 2) / W;
  f[4] = ((y0 + y1) / 2 - H / 2) / H;
  f[5] = ear(*s, 36);
  f[6] = ear(*s, 42);
  f[7] = (f[5] + f[6]) / 2;
  f[8] = std::abs(f[5] - f[6]);
  f[9] = mar(*s);
  f[10] = std::max(0.0, std::min(1.0, 1 - asym / 23 / iod));
  f[11] = std::atan2(re.y - le.y, re.x - le.x) * 180 / std::numbers::pi;
  f[12] = (p[30].x - (le.x + re.x) / 2) / iod;
  f[13] = (mouth.y - p[30].y) / (y1 - y0);
  f[14] = (x1 - x0) / W;
  f[15] = (y1 - y0) / H;
  return f;
}

inline std::array<double, 42> classical(const ImageGray& img, const LandmarkSet* lm) {
  std::array<double, 42> out{};
  std::size_t k = 0;
  for (double v : lighting(img)) out[k++] = v;
  for (double v : quality(img)) out[k++] = v;
  for (double v : noise(img)) out[k++] = v;
  for (double v : sharpness(img)) out[k++] = v;
  for (double v : texture(img)) out[k++] = v;
  for (double v : geometry(lm, img.width(), img.height())) out[k++] = v;
  return out;
}

// Rotate by `deg` about the landmark centroid, scale, then translate.
inline LandmarkSet similarity(const LandmarkSet& s, double deg, double scale, double tx, double ty) {
  const double a = deg * std::numbers::pi / 180;
  Point2 c{};
  for (const auto& p : s.points) c.x += p.x / 68, c.y += p.y / 68;
  LandmarkSet out = s;
  for (auto& p : out.points) {
    const double x = p.x - c.x, y = p.y - c.y;
    p = {c.x + tx + scale * (std::cos(a) * x - std::sin(a) * y), c.y + ty + scale * (std::sin(a) * x + std::cos(a) * y)};
  }
  return out;
}

// A plausible frontal 68-point face inside a 100x100 frame: jaw arc, brows,
// nose, hexagonal eyes and a two-ring mouth.
inline LandmarkSet synthetic_face(double jitter_seed = 0, double jitter = 0.3) {
  LandmarkSet s;
  s.image_id = lnup::ImageId("face");
  auto& p = s.points;
  auto j = [&](int i) { return jitter * std::sin(1.7 * i + jitter_seed); };
  for (int i = 0; i <= 16; ++i) {
    const double t = std::numbers::pi * (1 - i / 16.0);
    p[i] = {50 + 35 * std::cos(t) + j(i), 45 + 40 * std::sin(t) * 0.9 + j(i + 100)};
  }
  for (int i = 0; i < 5; ++i) {
    p[17 + i] = {22 + 6 * i + j(17 + i), 30 - (i == 2 ? 3 : i == 1 || i == 3 ? 2 : 0) + j(200 + i)};
    p[22 + i] = {54 + 6 * i + j(22 + i), 30 - (i == 2 ? 3 : i == 1 || i == 3 ? 2 : 0) + j(300 + i)};
  }
  for (int i = 0; i < 4; ++i) p[27 + i] = {50 + j(27 + i), 38 + 5 * i + j(400 + i)};
  for (int i = 0; i < 5; ++i) p[31 + i] = {42 + 4 * i + j(31 + i), 58 + (i == 2 ? 1 : 0) + j(500 + i)};
  auto eye = [&](int f, double cx) {
    const double dx[6] = {-6, -2, 2, 6, 2, -2}, dy[6] = {0, -2.5, -2.5, 0, 2.5, 2.5};
    for (int i = 0; i < 6; ++i) p[f + i] = {cx + dx[i] + j(f + i), 40 + dy[i] + j(600 + f + i)};
  };
  eye(36, 35);
  eye(42, 65);
  for (int i = 0; i < 12; ++i) {
    const double t = 2 * std::numbers::pi * i / 12.0;
    p[48 + i] = {50 - 12 * std::cos(t) + j(48 + i), 72 - 6 * std::sin(t) + j(700 + i)};
  }
  for (int i = 0; i < 8; ++i) {
    const double t = 2 * std::numbers::pi * i / 8.0;
    p[60 + i] = {50 - 8 * std::cos(t) + j(60 + i), 72 - 3 * std::sin(t) + j(800 + i)};
  }
  return s;
}

}  // namespace oracle
