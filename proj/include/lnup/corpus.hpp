#pragma once

// Embedding corpora, landmark sidecars, and mechanical curation.
//
// Embedding files come in two formats, detected by their first bytes:
//
//   JSONL   one object per line:
//           {"image_id": str, "identity_id": str, "vector": [float, ...]}
//   binary  "LNUP", u32 dim, u64 count, then per record:
//           u16 id_len, id bytes, u16 identity_len, identity bytes,
//           dim x f32. All integers and floats little-endian.
//
// Bit 31 of the binary dim field is reserved as the "pre-normalized" flag
// used by persisted search indexes; plain embedding files leave it clear.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "lnup/core.hpp"
#include "lnup/image.hpp"
#include "lnup/imgproc.hpp"

namespace lnup {

struct EmbeddingRecord {
  ImageId image_id;
  std::string identity_id;
  std::vector<float> vector;
};

struct CorpusManifest {
  std::vector<std::string> sources;
  std::size_t dim = 0;
  std::size_t count = 0;
};

// Immutable after construction; safe for concurrent reads.
class CorpusHandle {
 public:
  CorpusHandle() = default;

  // Validates uniform dimension, finite components, unique ids.
  static CorpusHandle from_records(std::vector<EmbeddingRecord> records,
                                   std::vector<std::string> sources = {},
                                   std::optional<std::size_t> expected_dim = std::nullopt) {
    CorpusHandle h;
    h.records_ = std::move(records);
    h.manifest_.sources = std::move(sources);
    h.manifest_.count = h.records_.size();
    if (expected_dim) h.manifest_.dim = *expected_dim;
    else if (!h.records_.empty()) h.manifest_.dim = h.records_.front().vector.size();

    h.row_of_.reserve(h.records_.size());
    for (std::size_t i = 0; i < h.records_.size(); ++i) {
      const auto& rec = h.records_[i];
      if (rec.image_id.empty()) throw data_error("record " + std::to_string(i) + " has an empty image_id");
      if (rec.vector.size() != h.manifest_.dim)
        throw data_error("dimension mismatch for " + rec.image_id.str() + ": expected " +
                         std::to_string(h.manifest_.dim) + ", got " + std::to_string(rec.vector.size()));
      for (float v : rec.vector)
        if (!std::isfinite(v)) throw data_error("non-finite component in " + rec.image_id.str());
      if (!h.row_of_.emplace(rec.image_id, i).second)
        throw data_error("duplicate image_id " + rec.image_id.str());
      h.identity_index_[rec.identity_id].push_back(rec.image_id);
    }
    return h;
  }

  const std::vector<EmbeddingRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  std::size_t dim() const noexcept { return manifest_.dim; }
  const CorpusManifest& manifest() const noexcept { return manifest_; }

  // identity -> image ids in corpus order. Ordered map for canonical iteration.
  const std::map<std::string, std::vector<ImageId>>& identity_index() const noexcept {
    return identity_index_;
  }

  const EmbeddingRecord* find(const ImageId& id) const {
    auto it = row_of_.find(id);
    return it == row_of_.end() ? nullptr : &records_[it->second];
  }

  const EmbeddingRecord& at(const ImageId& id) const {
    if (const auto* rec = find(id)) return *rec;
    throw data_error("no embedding for image " + id.str());
  }

  bool contains(const ImageId& id) const { return row_of_.count(id) != 0; }

 private:
  std::vector<EmbeddingRecord> records_;
  std::unordered_map<ImageId, std::size_t, ImageIdHash> row_of_;
  std::map<std::string, std::vector<ImageId>> identity_index_;
  CorpusManifest manifest_;
};

// ---------------------------------------------------------------------------
// Binary container

inline constexpr std::array<char, 4> kEmbeddingMagic = {'L', 'N', 'U', 'P'};
inline constexpr std::uint32_t kNormalizedFlag = 0x8000'0000u;

namespace detail {

inline void put_le(std::string& buf, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

class ByteReader {
 public:
  ByteReader(std::span<const unsigned char> data, std::string name) : data_(data), name_(std::move(name)) {}

  const unsigned char* take(std::size_t n) {
    if (data_.size() - pos_ < n) throw data_error(name_ + ": truncated binary embedding file");
    const unsigned char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t uint(int bytes) { return get_le(take(bytes), bytes); }
  std::string str(std::size_t n) {
    const unsigned char* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::span<const unsigned char> data_;
  std::string name_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

struct BinaryContents {
  std::vector<EmbeddingRecord> records;
  std::uint32_t dim = 0;
  bool normalized = false;
};

inline std::string encode_embeddings_binary(std::span<const EmbeddingRecord> records, std::size_t dim,
                                            bool normalized = false) {
  if (dim >= kNormalizedFlag) throw usage_error("embedding dimension too large for binary format");
  std::string buf(kEmbeddingMagic.begin(), kEmbeddingMagic.end());
  detail::put_le(buf, static_cast<std::uint32_t>(dim) | (normalized ? kNormalizedFlag : 0u), 4);
  detail::put_le(buf, records.size(), 8);
  for (const auto& rec : records) {
    if (rec.image_id.str().size() > 0xffff || rec.identity_id.size() > 0xffff)
      throw data_error("identifier longer than 65535 bytes: " + rec.image_id.str().substr(0, 64));
    if (rec.vector.size() != dim) throw data_error("dimension mismatch for " + rec.image_id.str());
    detail::put_le(buf, rec.image_id.str().size(), 2);
    buf += rec.image_id.str();
    detail::put_le(buf, rec.identity_id.size(), 2);
    buf += rec.identity_id;
    for (float v : rec.vector) detail::put_le(buf, std::bit_cast<std::uint32_t>(v), 4);
  }
  return buf;
}

inline BinaryContents decode_embeddings_binary(std::span<const unsigned char> bytes, const std::string& name) {
  detail::ByteReader rd(bytes, name);
  const unsigned char* magic = rd.take(4);
  if (!std::equal(kEmbeddingMagic.begin(), kEmbeddingMagic.end(), magic))
    throw data_error(name + ": bad magic, not an LNUP container");
  BinaryContents out;
  const auto raw_dim = static_cast<std::uint32_t>(rd.uint(4));
  out.normalized = (raw_dim & kNormalizedFlag) != 0;
  out.dim = raw_dim & ~kNormalizedFlag;
  const std::uint64_t count = rd.uint(8);
  // Each record needs at least 4 + 4*dim bytes; reject absurd counts early.
  if (count > bytes.size() / (4 + 4ull * out.dim)) throw data_error(name + ": record count exceeds file size");
  out.records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    EmbeddingRecord rec;
    rec.image_id = ImageId(rd.str(rd.uint(2)));
    rec.identity_id = rd.str(rd.uint(2));
    rec.vector.resize(out.dim);
    for (std::uint32_t d = 0; d < out.dim; ++d)
      rec.vector[d] = std::bit_cast<float>(static_cast<std::uint32_t>(rd.uint(4)));
    out.records.push_back(std::move(rec));
  }
  if (!rd.done()) throw data_error(name + ": trailing bytes after last record");
  return out;
}

inline void write_embeddings_binary(const std::filesystem::path& path, const CorpusHandle& corpus) {
  const std::string buf = encode_embeddings_binary(corpus.records(), corpus.dim());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw data_error("failed writing " + path.string());
}

inline void write_embeddings_jsonl(const std::filesystem::path& path, const CorpusHandle& corpus) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw data_error("cannot write " + path.string());
  for (const auto& rec : corpus.records()) {
    nlohmann::json j{{"image_id", rec.image_id.str()}, {"identity_id", rec.identity_id}, {"vector", rec.vector}};
    out << j.dump() << '\n';
  }
}

inline std::vector<EmbeddingRecord> parse_embeddings_jsonl(std::istream& in, const std::string& name) {
  std::vector<EmbeddingRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw data_error(where + ": malformed JSON (" + e.what() + ")");
    }
    try {
      EmbeddingRecord rec;
      rec.image_id = ImageId(j.at("image_id").get<std::string>());
      rec.identity_id = j.at("identity_id").get<std::string>();
      const auto& vec = j.at("vector");
      if (!vec.is_array()) throw data_error(where + ": vector must be an array");
      rec.vector.reserve(vec.size());
      for (const auto& x : vec) {
        if (!x.is_number()) throw data_error(where + ": non-numeric vector component");
        const auto f = static_cast<float>(x.get<double>());
        if (!std::isfinite(f)) throw data_error(where + ": non-finite component in " + rec.image_id.str());
        rec.vector.push_back(f);
      }
      records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw data_error(where + ": malformed record (" + e.what() + ")");
    }
  }
  return records;
}

// Loads either format; an optional expected dimension is enforced.
inline CorpusHandle ingest_embeddings(const std::filesystem::path& path,
                                      std::optional<std::size_t> expected_dim = std::nullopt) {
  const auto bytes = detail::slurp(path);
  const std::string name = path.string();
  std::vector<EmbeddingRecord> records;
  std::optional<std::size_t> dim = expected_dim;
  if (bytes.size() >= 4 && std::equal(kEmbeddingMagic.begin(), kEmbeddingMagic.end(), bytes.begin())) {
    auto contents = decode_embeddings_binary(bytes, name);
    if (expected_dim && contents.dim != *expected_dim)
      throw data_error(name + ": dimension mismatch, file has " + std::to_string(contents.dim) +
                       ", expected " + std::to_string(*expected_dim));
    dim = contents.dim;
    records = std::move(contents.records);
  } else {
    std::string text(bytes.begin(), bytes.end());
    std::istringstream in(text);
    records = parse_embeddings_jsonl(in, name);
  }
  try {
    return CorpusHandle::from_records(std::move(records), {name}, dim);
  } catch (const Error& e) {
    throw data_error(name + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Landmarks

inline constexpr std::size_t kLandmarkCount = 68;

struct Point2 {
  double x = 0;
  double y = 0;
};

struct LandmarkSet {
  ImageId image_id;
  std::array<Point2, kLandmarkCount> points{};
  int face_count = 1;
};

using LandmarkTable = std::unordered_map<ImageId, LandmarkSet, ImageIdHash>;

// Landmark JSONL: {"image_id": str, "points": [[x, y] x 68], "face_count": int}.
// Repeated entries for an image keep the first point set and raise face_count
// to at least the number of entries seen.
inline LandmarkTable parse_landmarks_jsonl(std::istream& in, const std::string& name) {
  LandmarkTable table;
  std::unordered_map<ImageId, int, ImageIdHash> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      LandmarkSet set;
      set.image_id = ImageId(j.at("image_id").get<std::string>());
      if (set.image_id.empty()) throw data_error(where + ": empty image_id");
      const auto& pts = j.at("points");
      if (!pts.is_array() || pts.size() != kLandmarkCount)
        throw data_error(where + ": landmark set for " + set.image_id.str() + " has " +
                         std::to_string(pts.is_array() ? pts.size() : 0) + " points, expected 68");
      for (std::size_t k = 0; k < kLandmarkCount; ++k) {
        const auto& p = pts[k];
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
          throw data_error(where + ": malformed point " + std::to_string(k) + " for " + set.image_id.str());
        set.points[k] = {p[0].get<double>(), p[1].get<double>()};
        if (!std::isfinite(set.points[k].x) || !std::isfinite(set.points[k].y))
          throw data_error(where + ": non-finite coordinate for " + set.image_id.str());
      }
      set.face_count = j.contains("face_count") ? j.at("face_count").get<int>() : 1;
      if (set.face_count < 1) set.face_count = 1;

      const int seen = ++entries[set.image_id];
      auto [it, inserted] = table.emplace(set.image_id, set);
      if (!inserted) it->second.face_count = std::max({it->second.face_count, set.face_count, seen});
    } catch (const nlohmann::json::exception& e) {
      throw data_error(where + ": malformed landmark record (" + e.what() + ")");
    }
  }
  return table;
}

inline LandmarkTable ingest_landmarks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open " + path.string());
  return parse_landmarks_jsonl(in, path.string());
}

// ---------------------------------------------------------------------------
// Curation

enum class RemovalReason { NoImage, NoFace, TooDark, TooBright, TooBlurry };

inline const char* to_string(RemovalReason r) {
  switch (r) {
    case RemovalReason::NoImage: return "NO_IMAGE";
    case RemovalReason::NoFace: return "NO_FACE";
    case RemovalReason::TooDark: return "TOO_DARK";
    case RemovalReason::TooBright: return "TOO_BRIGHT";
    case RemovalReason::TooBlurry: return "TOO_BLURRY";
  }
  return "UNKNOWN";
}

struct CurationConfig {
  double dark_mean = 30.0;     // mean < dark_mean -> TOO_DARK
  double bright_mean = 225.0;  // mean > bright_mean -> TOO_BRIGHT
  double min_laplacian_var = 15.0;
  std::string image_extension = ".pgm";
};

struct Removal {
  ImageId image_id;
  RemovalReason reason;
};

struct CurationReport {
  std::vector<Removal> removed;
  CorpusHandle retained;
};

// Reason for rejecting one image, checked in the order no-face, dark,
// bright, blurry. Returns nullopt when the image passes.
inline std::optional<RemovalReason> assess_image(const ImageGray& img, bool has_face, const CurationConfig& rules) {
  if (!has_face) return RemovalReason::NoFace;
  const double mean = imgproc::mean_of(img.pixels());
  if (mean < rules.dark_mean) return RemovalReason::TooDark;
  if (mean > rules.bright_mean) return RemovalReason::TooBright;
  if (imgproc::laplacian_variance(img) < rules.min_laplacian_var) return RemovalReason::TooBlurry;
  return std::nullopt;
}

// Images are looked up as <images>/<image_id><extension>. Missing or
// unreadable files are removed as NO_IMAGE.
inline CurationReport curate(const CorpusHandle& corpus, const LandmarkTable& landmarks,
                             const std::filesystem::path& images, const CurationConfig& rules = {}) {
  CurationReport report;
  std::vector<EmbeddingRecord> kept;
  for (const auto& rec : corpus.records()) {
    const auto path = images / (rec.image_id.str() + rules.image_extension);
    std::optional<RemovalReason> reason;
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) {
      reason = RemovalReason::NoImage;
    } else {
      try {
        reason = assess_image(load_grayscale_image(path), landmarks.count(rec.image_id) != 0, rules);
      } catch (const Error&) {
        reason = RemovalReason::NoImage;
      }
    }
    if (reason) report.removed.push_back({rec.image_id, *reason});
    else kept.push_back(rec);
  }
  report.retained = CorpusHandle::from_records(std::move(kept), corpus.manifest().sources, corpus.dim());
  return report;
}

}  // namespace lnup
