#pragma once

// Classical image features (42 values in six categories), face geometry from
// 68-point landmarks, feature-vector assembly and z-score standardization.
//
// Classical feature order (see kClassicalFeatureNames):
//   lighting[6]   mean, std, entropy, dark ratio, bright ratio, laplacian var
//   quality[7]    local contrast, global contrast, dynamic range,
//                 brightness entropy, michelson, rms contrast, std
//   noise[5]      sigma, snr_db, noise-to-signal, residual std, residual mad
//   sharpness[6]  grad mean, grad std, laplacian var, hf energy,
//                 mean log magnitude, laplacian var (repeated)
//   texture[2]    local variance, canny edge density
//   geometry[16]  see geometry_features()

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "lnup/core.hpp"
#include "lnup/corpus.hpp"
#include "lnup/image.hpp"
#include "lnup/imgproc.hpp"

namespace lnup {

inline constexpr std::size_t kLightingCount = 6;
inline constexpr std::size_t kQualityCount = 7;
inline constexpr std::size_t kNoiseCount = 5;
inline constexpr std::size_t kSharpnessCount = 6;
inline constexpr std::size_t kTextureCount = 2;
inline constexpr std::size_t kGeometryCount = 16;
inline constexpr std::size_t kClassicalCount =
    kLightingCount + kQualityCount + kNoiseCount + kSharpnessCount + kTextureCount + kGeometryCount;
static_assert(kClassicalCount == 42);

inline constexpr double kFeatureClip = 1e6;
inline constexpr double kDarkThreshold = 50;     // pixels strictly below are dark
inline constexpr double kBrightThreshold = 200;  // pixels strictly above are bright
inline constexpr double kCannyLow = 50;
inline constexpr double kCannyHigh = 150;

inline constexpr std::array<const char*, kClassicalCount> kClassicalFeatureNames = {
    "light_mean", "light_std", "light_entropy", "light_dark_ratio", "light_bright_ratio", "light_laplacian_var",
    "qual_local_contrast", "qual_global_contrast", "qual_dynamic_range", "qual_brightness_entropy",
    "qual_michelson", "qual_rms_contrast", "qual_std",
    "noise_sigma", "noise_snr_db", "noise_nsr", "noise_residual_std", "noise_residual_mad",
    "sharp_grad_mean", "sharp_grad_std", "sharp_laplacian_var", "sharp_hf_energy", "sharp_log_magnitude",
    "sharp_laplacian_var_repeat",
    "tex_local_variance", "tex_edge_density",
    "geo_face_detected", "geo_face_count", "geo_area_ratio", "geo_offset_x", "geo_offset_y", "geo_ear_left",
    "geo_ear_right", "geo_ear_mean", "geo_ear_diff", "geo_mar", "geo_symmetry", "geo_roll_deg", "geo_yaw",
    "geo_pitch", "geo_width_ratio", "geo_height_ratio"};

namespace detail {

inline std::array<std::size_t, 256> histogram(const ImageGray& img) {
  std::array<std::size_t, 256> h{};
  for (auto p : img.pixels()) ++h[p];
  return h;
}

// Shannon entropy (natural log) of the normalized 256-bin histogram.
inline double entropy(const std::array<std::size_t, 256>& hist, std::size_t n) {
  double e = 0.0;
  for (auto c : hist) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(n);
    e -= p * std::log(p);
  }
  return e;
}

// k-th smallest intensity (0-based) read off the cumulative histogram.
inline int order_statistic(const std::array<std::size_t, 256>& hist, std::size_t k) {
  std::size_t seen = 0;
  for (int v = 0; v < 256; ++v) {
    seen += hist[v];
    if (seen > k) return v;
  }
  return 255;
}

// Linear interpolation between order statistics at position q * (n - 1).
inline double percentile(const std::array<std::size_t, 256>& hist, std::size_t n, double q) {
  const double pos = q * static_cast<double>(n - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  const double a = order_statistic(hist, lo);
  if (frac == 0.0) return a;
  const double b = order_statistic(hist, std::min(lo + 1, n - 1));
  return a + (b - a) * frac;
}

}  // namespace detail

inline std::array<double, kLightingCount> lighting_features(const ImageGray& img) {
  const auto px = img.pixels();
  const auto hist = detail::histogram(img);
  std::size_t dark = 0, bright = 0;
  for (auto p : px) {
    dark += p < kDarkThreshold;
    bright += p > kBrightThreshold;
  }
  const double n = static_cast<double>(px.size());
  return {imgproc::mean_of(px), imgproc::stddev_of(px), detail::entropy(hist, px.size()),
          static_cast<double>(dark) / n, static_cast<double>(bright) / n, imgproc::laplacian_variance(img)};
}

inline std::array<double, kQualityCount> quality_features(const ImageGray& img) {
  const auto px = img.pixels();
  const std::size_t n = px.size();
  const auto hist = detail::histogram(img);
  const double mu = imgproc::mean_of(px);

  const auto g = imgproc::sobel(img);
  std::vector<int> combined(n);
  for (std::size_t i = 0; i < n; ++i) combined[i] = std::abs(g.gx[i]) + std::abs(g.gy[i]);
  const double local_contrast = imgproc::variance_of(std::span<const int>(combined));

  double global = 0.0;
  for (int i = 0; i < 256; ++i) {
    if (!hist[i]) continue;
    global += (i - mu) * (i - mu) * static_cast<double>(hist[i]) / static_cast<double>(n);
  }
  global = std::sqrt(global);

  const double range = detail::percentile(hist, n, 0.95) - detail::percentile(hist, n, 0.05);
  const auto [lo_it, hi_it] = std::minmax_element(px.begin(), px.end());
  const double imin = *lo_it, imax = *hi_it;
  const double michelson = imax + imin == 0 ? 0.0 : (imax - imin) / (imax + imin);

  double ss = 0.0;
  for (auto p : px) ss += (p - mu) * (p - mu);
  const double rms = std::sqrt(ss / static_cast<double>(n));

  return {local_contrast, global, range, detail::entropy(hist, n), michelson, rms, imgproc::stddev_of(px)};
}

inline std::array<double, kNoiseCount> noise_features(const ImageGray& img) {
  const int h = img.height(), w = img.width();
  std::vector<int> diag;
  diag.reserve(static_cast<std::size_t>(h - 1) * (w - 1));
  for (int r = 0; r + 1 < h; ++r)
    for (int c = 0; c + 1 < w; ++c) diag.push_back(int(img.at(r, c)) - int(img.at(r + 1, c + 1)));
  const double sigma = imgproc::stddev_of(std::span<const int>(diag));

  double power = 0.0;
  for (auto p : img.pixels()) power += double(p) * double(p);
  power /= static_cast<double>(img.size());

  double snr;
  if (sigma == 0.0) snr = kFeatureClip;
  else if (power == 0.0) snr = -kFeatureClip;
  else snr = std::clamp(10.0 * std::log10(power / (sigma * sigma)), -kFeatureClip, kFeatureClip);
  const double nsr = power == 0.0 ? 0.0 : sigma * sigma / power;

  const auto med = imgproc::median3x3(img);
  std::vector<int> resid(img.size());
  double mad = 0.0;
  for (std::size_t i = 0; i < resid.size(); ++i) {
    resid[i] = int(img.pixels()[i]) - int(med[i]);
    mad += std::abs(resid[i]);
  }
  mad /= static_cast<double>(resid.size());
  return {sigma, snr, nsr, imgproc::stddev_of(std::span<const int>(resid)), mad};
}

inline std::array<double, kSharpnessCount> sharpness_features(const ImageGray& img) {
  const auto g = imgproc::sobel(img);
  std::vector<double> mag(img.size());
  for (std::size_t i = 0; i < mag.size(); ++i)
    mag[i] = std::sqrt(double(g.gx[i]) * g.gx[i] + double(g.gy[i]) * g.gy[i]);
  const double lap_var = imgproc::laplacian_variance(img);

  const auto spec = imgproc::centered_fft_magnitude(img);
  const int h = img.height(), w = img.width();
  const double radius = std::min(h, w) / 4.0;
  const int cr = h / 2, cc = w / 2;
  double hf = 0.0, logmag = 0.0;
  std::size_t hf_n = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double m = spec[static_cast<std::size_t>(r) * w + c];
      logmag += std::log1p(m);
      if (std::hypot(r - cr, c - cc) >= radius) {
        hf += m;
        ++hf_n;
      }
    }
  hf = hf_n ? hf / static_cast<double>(hf_n) : 0.0;
  logmag /= static_cast<double>(spec.size());

  const std::span<const double> ms(mag);
  return {imgproc::mean_of(ms), imgproc::stddev_of(ms), lap_var, hf, logmag, lap_var};
}

inline std::array<double, kTextureCount> texture_features(const ImageGray& img) {
  const auto lv = imgproc::local_variance3x3(img);
  const auto edges = imgproc::canny(img, kCannyLow, kCannyHigh);
  std::size_t count = 0;
  for (auto e : edges) count += e;
  return {imgproc::mean_of(std::span<const double>(lv)), static_cast<double>(count) / static_cast<double>(edges.size())};
}

// ---------------------------------------------------------------------------
// Face geometry

namespace landmarks68 {
inline constexpr int kLeftEyeFirst = 36;   // 36..41
inline constexpr int kRightEyeFirst = 42;  // 42..47
inline constexpr int kInnerLipFirst = 60;  // 60..67
inline constexpr int kNoseBridge = 27;
inline constexpr int kNoseTip = 30;
inline constexpr int kMouthFirst = 48;  // 48..67

// Mirrored pairs: 8 jaw, 5 brow, 6 eye, 4 outer lip.
inline constexpr std::array<std::array<int, 2>, 23> kMirrorPairs = {{
    {0, 16}, {1, 15}, {2, 14}, {3, 13}, {4, 12}, {5, 11}, {6, 10}, {7, 9},
    {17, 26}, {18, 25}, {19, 24}, {20, 23}, {21, 22},
    {36, 45}, {37, 44}, {38, 43}, {39, 42}, {40, 47}, {41, 46},
    {48, 54}, {49, 53}, {50, 52}, {59, 55},
}};
}  // namespace landmarks68

inline double distance(const Point2& a, const Point2& b) { return std::hypot(a.x - b.x, a.y - b.y); }

// (|p1 p5| + |p2 p4|) / (2 |p0 p3|) over six consecutive contour points;
// the inner lip uses the same scheme on (60, 61, 63, 64, 65, 67).
inline double aspect_ratio(const Point2& p0, const Point2& p1, const Point2& p2, const Point2& p3, const Point2& p4,
                           const Point2& p5) {
  const double c = distance(p0, p3);
  if (c == 0.0) return 0.0;
  return (distance(p1, p5) + distance(p2, p4)) / (2.0 * c);
}

inline double eye_aspect_ratio(std::span<const Point2> pts, int first) {
  return aspect_ratio(pts[first], pts[first + 1], pts[first + 2], pts[first + 3], pts[first + 4], pts[first + 5]);
}

inline double mouth_aspect_ratio(std::span<const Point2> pts) {
  const int f = landmarks68::kInnerLipFirst;
  return aspect_ratio(pts[f], pts[f + 1], pts[f + 3], pts[f + 4], pts[f + 5], pts[f + 7]);
}

inline Point2 centroid(std::span<const Point2> pts) {
  Point2 c;
  for (const auto& p : pts) {
    c.x += p.x;
    c.y += p.y;
  }
  c.x /= static_cast<double>(pts.size());
  c.y /= static_cast<double>(pts.size());
  return c;
}

// [detected, face_count, area_ratio, offset_x, offset_y, ear_left, ear_right,
//  ear_mean, |ear_left - ear_right|, mar, symmetry, roll_deg, yaw, pitch,
//  width_ratio, height_ratio]. All zeros when no landmarks are present.
inline std::array<double, kGeometryCount> geometry_features(const LandmarkSet* landmarks, int image_width,
                                                            int image_height) {
  std::array<double, kGeometryCount> f{};
  if (!landmarks) return f;
  using namespace landmarks68;
  const std::span<const Point2> pts(landmarks->points);
  const double W = image_width, H = image_height;

  double minx = pts[0].x, maxx = pts[0].x, miny = pts[0].y, maxy = pts[0].y;
  for (const auto& p : pts) {
    minx = std::min(minx, p.x);
    maxx = std::max(maxx, p.x);
    miny = std::min(miny, p.y);
    maxy = std::max(maxy, p.y);
  }
  const double bw = maxx - minx, bh = maxy - miny;

  const Point2 left_eye = centroid(pts.subspan(kLeftEyeFirst, 6));
  const Point2 right_eye = centroid(pts.subspan(kRightEyeFirst, 6));
  const double iod = distance(left_eye, right_eye);
  const Point2 eye_mid{(left_eye.x + right_eye.x) / 2, (left_eye.y + right_eye.y) / 2};
  const Point2 mouth = centroid(pts.subspan(kMouthFirst, 20));
  const Point2& nose = pts[kNoseTip];
  const Point2& bridge = pts[kNoseBridge];

  const double ear_l = eye_aspect_ratio(pts, kLeftEyeFirst);
  const double ear_r = eye_aspect_ratio(pts, kRightEyeFirst);

  double symmetry = 0.0;
  if (iod > 0) {
    double acc = 0.0;
    for (const auto& [l, r] : kMirrorPairs) acc += std::abs(distance(pts[l], bridge) - distance(pts[r], bridge));
    symmetry = std::clamp(1.0 - acc / static_cast<double>(kMirrorPairs.size()) / iod, 0.0, 1.0);
  }

  f[0] = 1.0;
  f[1] = landmarks->face_count;
  f[2] = W * H > 0 ? bw * bh / (W * H) : 0.0;
  f[3] = W > 0 ? ((minx + maxx) / 2 - W / 2) / W : 0.0;
  f[4] = H > 0 ? ((miny + maxy) / 2 - H / 2) / H : 0.0;
  f[5] = ear_l;
  f[6] = ear_r;
  f[7] = (ear_l + ear_r) / 2;
  f[8] = std::abs(ear_l - ear_r);
  f[9] = mouth_aspect_ratio(pts);
  f[10] = symmetry;
  f[11] = std::atan2(right_eye.y - left_eye.y, right_eye.x - left_eye.x) * 180.0 / std::numbers::pi;
  f[12] = iod > 0 ? (nose.x - eye_mid.x) / iod : 0.0;
  f[13] = bh > 0 ? (mouth.y - nose.y) / bh : 0.0;
  f[14] = W > 0 ? bw / W : 0.0;
  f[15] = H > 0 ? bh / H : 0.0;
  return f;
}

// All 42 classical features in the documented order.
inline std::array<double, kClassicalCount> classical_features(const ImageGray& img, const LandmarkSet* landmarks) {
  std::array<double, kClassicalCount> out{};
  auto it = out.begin();
  auto append = [&](const auto& part) { it = std::copy(part.begin(), part.end(), it); };
  append(lighting_features(img));
  append(quality_features(img));
  append(noise_features(img));
  append(sharpness_features(img));
  append(texture_features(img));
  append(geometry_features(landmarks, img.width(), img.height()));
  return out;
}

// ---------------------------------------------------------------------------
// Feature vectors

struct FeatureVector {
  ImageId image_id;
  std::vector<double> values;  // embedding components, then 42 classical features
};

// NaN and infinities become 0; everything else is clipped to +-1e6.
inline double sanitize(double v) {
  if (!std::isfinite(v)) return 0.0;
  return std::clamp(v, -kFeatureClip, kFeatureClip);
}

inline FeatureVector assemble_feature_vector(const EmbeddingRecord& embedding, std::span<const double> classical,
                                             std::optional<std::size_t> expected_dim = std::nullopt) {
  if (expected_dim && embedding.vector.size() != *expected_dim)
    throw data_error("embedding for " + embedding.image_id.str() + " has dimension " +
                     std::to_string(embedding.vector.size()) + ", expected " + std::to_string(*expected_dim));
  if (classical.size() != kClassicalCount) throw data_error("expected 42 classical features");
  FeatureVector fv{embedding.image_id, {}};
  fv.values.reserve(embedding.vector.size() + kClassicalCount);
  for (float v : embedding.vector) fv.values.push_back(sanitize(v));
  for (double v : classical) fv.values.push_back(sanitize(v));
  return fv;
}

inline FeatureVector assemble_feature_vector(const EmbeddingRecord& embedding, const ImageGray& img,
                                             const LandmarkSet* landmarks,
                                             std::optional<std::size_t> expected_dim = std::nullopt) {
  const auto classical = classical_features(img, landmarks);
  return assemble_feature_vector(embedding, classical, expected_dim);
}

inline std::vector<std::string> feature_column_names(std::size_t embedding_dim) {
  std::vector<std::string> names;
  names.reserve(embedding_dim + kClassicalCount);
  for (std::size_t i = 0; i < embedding_dim; ++i) names.push_back("emb_" + std::to_string(i));
  for (const char* n : kClassicalFeatureNames) names.emplace_back(n);
  return names;
}

// ---------------------------------------------------------------------------
// Standardization

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;  // population; 0 marks a constant dimension

  std::size_t dim() const noexcept { return mean.size(); }

  std::vector<double> apply(std::span<const double> x) const {
    if (x.size() != mean.size())
      throw data_error("standardizer expects " + std::to_string(mean.size()) + " values, got " +
                       std::to_string(x.size()));
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = stddev[i] > 0 ? (x[i] - mean[i]) / stddev[i] : 0.0;
    return z;
  }

  FeatureVector apply(const FeatureVector& v) const { return {v.image_id, apply(std::span<const double>(v.values))}; }

  std::vector<double> inverse(std::span<const double> z) const {
    std::vector<double> x(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) x[i] = stddev[i] > 0 ? z[i] * stddev[i] + mean[i] : mean[i];
    return x;
  }
};

inline Standardizer fit_standardizer(std::span<const FeatureVector> train) {
  if (train.empty()) throw data_error("cannot fit a standardizer on an empty training set");
  const std::size_t d = train.front().values.size();
  Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (const auto& v : train) {
    if (v.values.size() != d) throw data_error("inconsistent feature dimension at " + v.image_id.str());
    for (std::size_t i = 0; i < d; ++i) s.mean[i] += v.values[i];
  }
  const double n = static_cast<double>(train.size());
  for (auto& m : s.mean) m /= n;
  for (const auto& v : train)
    for (std::size_t i = 0; i < d; ++i) {
      const double dv = v.values[i] - s.mean[i];
      s.stddev[i] += dv * dv;
    }
  for (auto& sd : s.stddev) sd = std::sqrt(sd / n);
  return s;
}

inline FeatureVector apply_standardizer(const Standardizer& s, const FeatureVector& v) { return s.apply(v); }

// ---------------------------------------------------------------------------
// Feature CSV: image_id,label,<columns...>; header row mandatory.

struct LabeledFeatures {
  std::vector<FeatureVector> vectors;
  std::vector<int> labels;
  std::size_t embedding_dim = 0;
};

inline void write_feature_csv(std::ostream& out, const LabeledFeatures& data) {
  out << "image_id,label";
  for (const auto& name : feature_column_names(data.embedding_dim)) out << ',' << name;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < data.vectors.size(); ++i) {
    out << data.vectors[i].image_id.str() << ',' << data.labels[i];
    for (double v : data.vectors[i].values) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline LabeledFeatures read_feature_csv(std::istream& in, const std::string& name = "features") {
  LabeledFeatures data;
  std::string line;
  if (!std::getline(in, line) || line.rfind("image_id,label", 0) != 0)
    throw data_error(name + ": missing feature CSV header");
  const std::size_t columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 1;
  if (columns < kClassicalCount) throw data_error(name + ": too few feature columns");
  data.embedding_dim = columns - kClassicalCount;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (cells.size() != columns + 2) throw data_error(where + ": expected " + std::to_string(columns + 2) + " cells");
    FeatureVector fv{ImageId(cells[0]), {}};
    fv.values.reserve(columns);
    try {
      data.labels.push_back(std::stoi(cells[1]));
      for (std::size_t c = 2; c < cells.size(); ++c) fv.values.push_back(std::stod(cells[c]));
    } catch (const std::exception&) {
      throw data_error(where + ": non-numeric cell");
    }
    data.vectors.push_back(std::move(fv));
  }
  return data;
}

}  // namespace lnup
