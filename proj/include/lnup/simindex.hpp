#pragma once

// Exact top-k inner-product search over L2-normalized embeddings.
//
// Scores are float x float products accumulated sequentially in double, so
// every code path that scores the same (query, row) pair yields the same bits.
// Ranking is by descending score, ties by ascending ImageId.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lnup/core.hpp"
#include "lnup/corpus.hpp"

namespace lnup {

class UnitVector {
 public:
  UnitVector() = default;
  const std::vector<float>& components() const noexcept { return v_; }
  std::size_t dim() const noexcept { return v_.size(); }

 private:
  friend UnitVector l2_normalize(std::span<const float> v);
  friend UnitVector l2_normalize(std::span<const double> v);
  friend class SearchIndex;
  explicit UnitVector(std::vector<float> v) : v_(std::move(v)) {}
  std::vector<float> v_;
};

namespace detail {
template <typename T>
std::vector<float> normalized_copy(std::span<const T> v) {
  if (v.empty()) throw data_error("cannot normalize an empty vector");
  double ss = 0.0;
  for (T x : v) {
    if (!std::isfinite(static_cast<double>(x))) throw data_error("cannot normalize a non-finite vector");
    ss += static_cast<double>(x) * static_cast<double>(x);
  }
  if (ss == 0.0) throw data_error("cannot normalize the zero vector");
  const double norm = std::sqrt(ss);
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(static_cast<double>(v[i]) / norm);
  return out;
}
}  // namespace detail

inline UnitVector l2_normalize(std::span<const float> v) { return UnitVector(detail::normalized_copy(v)); }
inline UnitVector l2_normalize(std::span<const double> v) { return UnitVector(detail::normalized_copy(v)); }

// The one scoring function. Both search paths and lineup ranking use it.
inline double inner_product(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

struct Hit {
  ImageId id;
  double score = 0.0;
  friend bool operator==(const Hit&, const Hit&) = default;
};

struct TopKResult {
  ImageId query_id;
  std::vector<Hit> hits;
  friend bool operator==(const TopKResult&, const TopKResult&) = default;
};

enum class Exclusion {
  None,
  SelfId,    // drop the row whose id equals the query id
  Identity,  // drop every row sharing the query's identity label
};

struct Query {
  ImageId id;
  std::string identity;
  UnitVector vector;
};

struct SearchOptions {
  std::size_t batch_size = 256;
  unsigned threads = 1;
};

// Flat n x d matrix of unit rows in insertion order. Immutable after build.
class SearchIndex {
 public:
  SearchIndex() = default;

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  const std::vector<ImageId>& row_ids() const noexcept { return ids_; }
  const std::vector<std::string>& row_identities() const noexcept { return identities_; }

  std::span<const float> row(std::size_t i) const noexcept {
    return std::span<const float>(matrix_).subspan(i * dim_, dim_);
  }
  // Position of row i's id in ascending id order; smaller wins ties.
  std::uint32_t tie_rank(std::size_t i) const noexcept { return tie_rank_[i]; }

  std::size_t identity_count(const std::string& identity) const {
    auto it = identity_count_.find(identity);
    return it == identity_count_.end() ? 0 : it->second;
  }
  bool contains(const ImageId& id) const { return row_of_.count(id) != 0; }

  // Rows whose vectors are already unit-norm (used when loading a saved index).
  static SearchIndex from_unit_rows(std::vector<EmbeddingRecord> rows, std::size_t dim) {
    SearchIndex idx;
    idx.dim_ = dim;
    idx.matrix_.reserve(rows.size() * dim);
    for (auto& r : rows) {
      if (r.vector.size() != dim) throw data_error("dimension mismatch for " + r.image_id.str());
      idx.matrix_.insert(idx.matrix_.end(), r.vector.begin(), r.vector.end());
      idx.ids_.push_back(std::move(r.image_id));
      idx.identities_.push_back(std::move(r.identity_id));
    }
    idx.finish();
    return idx;
  }

 private:
  void finish() {
    std::vector<std::uint32_t> order(ids_.size());
    for (std::uint32_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ids_[a] < ids_[b]; });
    tie_rank_.resize(ids_.size());
    for (std::uint32_t r = 0; r < order.size(); ++r) tie_rank_[order[r]] = r;
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!row_of_.emplace(ids_[i], i).second) throw data_error("duplicate image_id " + ids_[i].str());
      ++identity_count_[identities_[i]];
    }
  }

  friend SearchIndex build_index(const CorpusHandle& corpus);

  std::size_t dim_ = 0;
  std::vector<float> matrix_;
  std::vector<ImageId> ids_;
  std::vector<std::string> identities_;
  std::vector<std::uint32_t> tie_rank_;
  std::unordered_map<ImageId, std::size_t, ImageIdHash> row_of_;
  std::unordered_map<std::string, std::size_t> identity_count_;
};

inline SearchIndex build_index(const CorpusHandle& corpus) {
  if (corpus.empty()) throw data_error("cannot build an index over an empty corpus");
  SearchIndex idx;
  idx.dim_ = corpus.dim();
  idx.matrix_.reserve(corpus.size() * corpus.dim());
  for (const auto& rec : corpus.records()) {
    std::vector<float> unit;
    try {
      unit = detail::normalized_copy(std::span<const float>(rec.vector));
    } catch (const Error& e) {
      throw data_error("image " + rec.image_id.str() + ": " + e.what());
    }
    idx.matrix_.insert(idx.matrix_.end(), unit.begin(), unit.end());
    idx.ids_.push_back(rec.image_id);
    idx.identities_.push_back(rec.identity_id);
  }
  idx.finish();
  return idx;
}

namespace detail {

struct Candidate {
  double score;
  std::uint32_t tie;
  std::uint32_t row;
};

// Strict "ranks ahead of" ordering.
inline bool ahead(const Candidate& a, const Candidate& b) {
  return a.score > b.score || (a.score == b.score && a.tie < b.tie);
}

inline std::size_t eligible_rows(const SearchIndex& index, const Query& q, Exclusion rule) {
  switch (rule) {
    case Exclusion::None: return index.size();
    case Exclusion::SelfId: return index.size() - (index.contains(q.id) ? 1 : 0);
    case Exclusion::Identity: return index.size() - index.identity_count(q.identity);
  }
  return 0;
}

inline void check_query(const SearchIndex& index, const Query& q, std::size_t k, Exclusion rule) {
  if (k == 0) throw usage_error("k must be at least 1");
  if (q.vector.dim() != index.dim())
    throw data_error("query " + q.id.str() + " has dimension " + std::to_string(q.vector.dim()) +
                     ", index has " + std::to_string(index.dim()));
  const std::size_t eligible = eligible_rows(index, q, rule);
  if (k > eligible)
    throw data_error("query " + q.id.str() + ": k=" + std::to_string(k) + " exceeds " +
                     std::to_string(eligible) + " eligible rows");
}

inline bool excluded(const SearchIndex& index, std::size_t row, const Query& q, Exclusion rule) {
  switch (rule) {
    case Exclusion::None: return false;
    case Exclusion::SelfId: return index.row_ids()[row] == q.id;
    case Exclusion::Identity: return index.row_identities()[row] == q.identity;
  }
  return false;
}

inline TopKResult to_result(const SearchIndex& index, const Query& q, std::vector<Candidate>& cands) {
  std::sort(cands.begin(), cands.end(), ahead);
  TopKResult res{q.id, {}};
  res.hits.reserve(cands.size());
  for (const auto& c : cands) res.hits.push_back({index.row_ids()[c.row], c.score});
  return res;
}

}  // namespace detail

// Full scan of one query: score every eligible row, sort, keep k.
inline TopKResult brute_force_topk(const SearchIndex& index, const Query& query, std::size_t k,
                                   Exclusion exclude = Exclusion::None) {
  detail::check_query(index, query, k, exclude);
  std::vector<detail::Candidate> all;
  all.reserve(index.size());
  const auto qv = std::span<const float>(query.vector.components());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (detail::excluded(index, r, query, exclude)) continue;
    all.push_back({inner_product(qv, index.row(r)), index.tie_rank(r), static_cast<std::uint32_t>(r)});
  }
  std::sort(all.begin(), all.end(), detail::ahead);
  all.resize(k);
  return detail::to_result(index, query, all);
}

// Batched exact search. Queries are processed in batches of
// `opts.batch_size`; each batch scores row blocks against all of its queries
// and keeps a bounded heap per query. Output order follows input order and no
// result depends on batch boundaries or thread count.
inline std::vector<TopKResult> search_batch(const SearchIndex& index, std::span<const Query> queries,
                                            std::size_t k, Exclusion exclude = Exclusion::None,
                                            const SearchOptions& opts = {}) {
  if (opts.batch_size == 0) throw usage_error("batch size must be at least 1");
  for (const auto& q : queries) detail::check_query(index, q, k, exclude);

  constexpr std::size_t kRowBlock = 512;
  const std::size_t n = index.size();
  const std::size_t nbatches = (queries.size() + opts.batch_size - 1) / opts.batch_size;
  std::vector<TopKResult> results(queries.size());

  parallel_for(nbatches, opts.threads, [&](std::size_t b) {
    const std::size_t q0 = b * opts.batch_size;
    const std::size_t q1 = std::min(queries.size(), q0 + opts.batch_size);
    const std::size_t nq = q1 - q0;
    std::vector<std::vector<detail::Candidate>> heaps(nq);
    for (auto& h : heaps) h.reserve(k + 1);
    std::vector<double> block(nq * kRowBlock);

    for (std::size_t r0 = 0; r0 < n; r0 += kRowBlock) {
      const std::size_t r1 = std::min(n, r0 + kRowBlock);
      // Score tile: queries x rows.
      for (std::size_t qi = 0; qi < nq; ++qi) {
        const auto qv = std::span<const float>(queries[q0 + qi].vector.components());
        for (std::size_t r = r0; r < r1; ++r) block[qi * kRowBlock + (r - r0)] = inner_product(qv, index.row(r));
      }
      for (std::size_t qi = 0; qi < nq; ++qi) {
        const Query& q = queries[q0 + qi];
        auto& heap = heaps[qi];
        for (std::size_t r = r0; r < r1; ++r) {
          if (detail::excluded(index, r, q, exclude)) continue;
          const detail::Candidate c{block[qi * kRowBlock + (r - r0)], index.tie_rank(r), static_cast<std::uint32_t>(r)};
          // Heap top is the weakest retained candidate.
          if (heap.size() < k) {
            heap.push_back(c);
            std::push_heap(heap.begin(), heap.end(), detail::ahead);
          } else if (detail::ahead(c, heap.front())) {
            std::pop_heap(heap.begin(), heap.end(), detail::ahead);
            heap.back() = c;
            std::push_heap(heap.begin(), heap.end(), detail::ahead);
          }
        }
      }
    }
    for (std::size_t qi = 0; qi < nq; ++qi) results[q0 + qi] = detail::to_result(index, queries[q0 + qi], heaps[qi]);
  });
  return results;
}

// Queries for every row of a corpus, normalized the same way as the index.
inline std::vector<Query> queries_from(const CorpusHandle& corpus) {
  std::vector<Query> qs;
  qs.reserve(corpus.size());
  for (const auto& rec : corpus.records())
    qs.push_back({rec.image_id, rec.identity_id, l2_normalize(std::span<const float>(rec.vector))});
  return qs;
}

// Persisted index: the embedding binary container with the pre-normalized flag set.
inline void save_index(const std::filesystem::path& path, const SearchIndex& index) {
  std::vector<EmbeddingRecord> rows;
  rows.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    auto r = index.row(i);
    rows.push_back({index.row_ids()[i], index.row_identities()[i], std::vector<float>(r.begin(), r.end())});
  }
  const std::string buf = encode_embeddings_binary(rows, index.dim(), /*normalized=*/true);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw data_error("failed writing " + path.string());
}

inline SearchIndex load_index(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  auto contents = decode_embeddings_binary(bytes, path.string());
  if (!contents.normalized) throw data_error(path.string() + ": not a saved index (pre-normalized flag clear)");
  return SearchIndex::from_unit_rows(std::move(contents.records), contents.dim);
}

}  // namespace lnup
