#pragma once

// Six-member lineups: construction from the search index, probe ranking,
// corpus-level accuracy, and before/after rank-change accounting.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lnup/core.hpp"
#include "lnup/corpus.hpp"
#include "lnup/simindex.hpp"

namespace lnup {

inline constexpr std::size_t kFillerCount = 5;
inline constexpr int kMaxRank = static_cast<int>(kFillerCount);

struct Lineup {
  ImageId source;
  std::array<ImageId, kFillerCount> fillers;
  ImageId probe;
  std::uint64_t seed = 0;

  // Fillers followed by the probe.
  std::array<ImageId, kFillerCount + 1> members() const {
    std::array<ImageId, kFillerCount + 1> m;
    std::copy(fillers.begin(), fillers.end(), m.begin());
    m.back() = probe;
    return m;
  }
  friend bool operator==(const Lineup&, const Lineup&) = default;
};

struct LineupResult {
  Lineup lineup;
  int probe_rank = 0;
  bool success = false;
  friend bool operator==(const LineupResult&, const LineupResult&) = default;
};

struct LineupOptions {
  bool distinct_filler_identities = false;
  SearchOptions search;
};

// Probe candidates for a source: the identity's other images in ascending id
// order. The draw is keyed by (seed, source id) through a counter-based
// generator, so it does not depend on evaluation order.
inline ImageId draw_probe(const CorpusHandle& corpus, const ImageId& source, std::uint64_t seed) {
  const auto& rec = corpus.at(source);
  const auto& same = corpus.identity_index().at(rec.identity_id);
  std::vector<ImageId> others;
  for (const auto& id : same)
    if (id != source) others.push_back(id);
  if (others.empty()) throw data_error("no probe available for " + source.str() + ": identity has one image");
  std::sort(others.begin(), others.end());
  CounterRng rng(seed, source.str());
  return others[rng.uniform(others.size())];
}

namespace detail {

inline void check_lineup_preconditions(const SearchIndex& index, const CorpusHandle& corpus,
                                       const ImageId& source, const LineupOptions& opts) {
  const auto* rec = corpus.find(source);
  if (!rec) throw data_error("unknown source image " + source.str());
  if (corpus.identity_index().at(rec->identity_id).size() < 2)
    throw data_error("no probe available for " + source.str() + ": identity has one image");
  const std::size_t outside = index.size() - index.identity_count(rec->identity_id);
  if (outside < kFillerCount)
    throw data_error("insufficient fillers for " + source.str() + ": only " + std::to_string(outside) +
                     " images outside the source identity");
  if (opts.distinct_filler_identities && corpus.identity_index().size() - 1 < kFillerCount)
    throw data_error("insufficient filler identities for " + source.str());
}

// Picks fillers from an ordered hit list; nullopt when distinct identities
// were requested and the list ran out.
inline std::optional<std::array<ImageId, kFillerCount>> pick_fillers(const TopKResult& top, const CorpusHandle& corpus,
                                                                      bool distinct) {
  std::array<ImageId, kFillerCount> out;
  std::set<std::string> used;
  std::size_t n = 0;
  for (const auto& hit : top.hits) {
    if (n == kFillerCount) break;
    if (distinct && !used.insert(corpus.at(hit.id).identity_id).second) continue;
    out[n++] = hit.id;
  }
  if (n < kFillerCount) return std::nullopt;
  return out;
}

inline Query query_for(const CorpusHandle& corpus, const ImageId& id) {
  const auto& rec = corpus.at(id);
  return {rec.image_id, rec.identity_id, l2_normalize(std::span<const float>(rec.vector))};
}

}  // namespace detail

// Builds lineups for many sources with one batched search. Every source must
// satisfy the lineup preconditions.
inline std::vector<Lineup> build_lineups(const SearchIndex& index, const CorpusHandle& corpus,
                                         std::span<const ImageId> sources, std::uint64_t seed,
                                         const LineupOptions& opts = {}) {
  std::vector<Query> queries;
  queries.reserve(sources.size());
  for (const auto& s : sources) {
    detail::check_lineup_preconditions(index, corpus, s, opts);
    queries.push_back(detail::query_for(corpus, s));
  }

  std::vector<Lineup> out(sources.size());
  std::vector<std::size_t> pending(sources.size());
  for (std::size_t i = 0; i < pending.size(); ++i) pending[i] = i;
  // With distinct filler identities a query may need more than five hits;
  // widen k geometrically for the queries that came up short.
  std::size_t k = kFillerCount;
  while (!pending.empty()) {
    std::map<std::size_t, std::vector<std::size_t>> by_k;
    for (auto i : pending) {
      const std::size_t eligible = index.size() - index.identity_count(queries[i].identity);
      by_k[std::min(k, eligible)].push_back(i);
    }
    std::vector<std::size_t> still;
    for (const auto& [kk, group] : by_k) {
      std::vector<Query> batch;
      batch.reserve(group.size());
      for (auto i : group) batch.push_back(queries[i]);
      const auto tops = search_batch(index, batch, kk, Exclusion::Identity, opts.search);
      for (std::size_t j = 0; j < group.size(); ++j) {
        const std::size_t i = group[j];
        if (const auto fillers = detail::pick_fillers(tops[j], corpus, opts.distinct_filler_identities)) {
          out[i] = Lineup{sources[i], *fillers, draw_probe(corpus, sources[i], seed), seed};
        } else if (kk < k) {
          throw data_error("insufficient filler identities for " + sources[i].str());
        } else {
          still.push_back(i);
        }
      }
    }
    std::sort(still.begin(), still.end());
    pending = std::move(still);
    k *= 2;
  }
  return out;
}

inline Lineup build_lineup(const SearchIndex& index, const CorpusHandle& corpus, const ImageId& source,
                           std::uint64_t seed, const LineupOptions& opts = {}) {
  return build_lineups(index, corpus, std::span<const ImageId>(&source, 1), seed, opts).front();
}

// Rank of `probe` among `members` by descending inner product with `source`,
// ties broken by ascending id. Vectors are looked up through `vector_of`.
template <typename VectorOf>
int rank_among(const UnitVector& source, std::span<const ImageId> members, const ImageId& probe, VectorOf&& vector_of) {
  struct Scored {
    double score;
    const ImageId* id;
  };
  std::vector<Scored> scored;
  scored.reserve(members.size());
  const auto sv = std::span<const float>(source.components());
  for (const auto& m : members) {
    const UnitVector v = vector_of(m);
    scored.push_back({inner_product(sv, std::span<const float>(v.components())), &m});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    return a.score > b.score || (a.score == b.score && *a.id < *b.id);
  });
  for (std::size_t i = 0; i < scored.size(); ++i)
    if (*scored[i].id == probe) return static_cast<int>(i);
  throw data_error("probe " + probe.str() + " is not a lineup member");
}

inline LineupResult rank_probe(const Lineup& lineup, const CorpusHandle& embeddings) {
  const auto source = l2_normalize(std::span<const float>(embeddings.at(lineup.source).vector));
  const auto members = lineup.members();
  const int rank = rank_among(source, members, lineup.probe, [&](const ImageId& id) {
    return l2_normalize(std::span<const float>(embeddings.at(id).vector));
  });
  return {lineup, rank, rank == 0};
}

struct SkippedSource {
  ImageId source;
  std::string reason;
};

struct AccuracyReport {
  std::vector<LineupResult> results;  // ascending source id
  std::vector<SkippedSource> skipped;
  std::size_t successes = 0;
  double accuracy = 0.0;
};

inline constexpr const char* kNoEligibleSources = "no eligible sources";

struct SourcePartition {
  std::vector<ImageId> eligible;  // ascending, deduplicated
  std::vector<SkippedSource> skipped;
};

inline SourcePartition partition_sources(const CorpusHandle& corpus, const SearchIndex& index,
                                         std::span<const ImageId> sources, const LineupOptions& opts = {}) {
  std::vector<ImageId> ordered(sources.begin(), sources.end());
  std::sort(ordered.begin(), ordered.end());
  ordered.erase(std::unique(ordered.begin(), ordered.end()), ordered.end());
  SourcePartition out;
  for (const auto& s : ordered) {
    try {
      detail::check_lineup_preconditions(index, corpus, s, opts);
      out.eligible.push_back(s);
    } catch (const Error& e) {
      out.skipped.push_back({s, e.what()});
    }
  }
  return out;
}

// Sources violating lineup preconditions are skipped and reported.
inline AccuracyReport evaluate_corpus(const CorpusHandle& corpus, const SearchIndex& index,
                                      std::span<const ImageId> sources, std::uint64_t seed,
                                      const LineupOptions& opts = {}) {
  auto [eligible, skipped] = partition_sources(corpus, index, sources, opts);
  AccuracyReport report;
  report.skipped = std::move(skipped);
  if (eligible.empty()) throw data_error(kNoEligibleSources);

  const auto lineups = build_lineups(index, corpus, eligible, seed, opts);
  report.results.resize(lineups.size());
  parallel_for(lineups.size(), opts.search.threads,
               [&](std::size_t i) { report.results[i] = rank_probe(lineups[i], corpus); });
  for (const auto& r : report.results) report.successes += r.success ? 1 : 0;
  report.accuracy = static_cast<double>(report.successes) / static_cast<double>(report.results.size());
  return report;
}

inline std::vector<ImageId> all_sources(const CorpusHandle& corpus) {
  std::vector<ImageId> ids;
  ids.reserve(corpus.size());
  for (const auto& r : corpus.records()) ids.push_back(r.image_id);
  return ids;
}

// ---------------------------------------------------------------------------
// Rank changes

struct RankChange {
  ImageId lineup;  // keyed by source id
  int rank_before = 0;
  int rank_after = 0;
  int change = 0;  // rank_before - rank_after; positive is an improvement
  bool failed_restoration = false;
};

struct RankChangeReport {
  std::vector<RankChange> per_lineup;
  std::array<std::size_t, 2 * kMaxRank + 1> histogram{};  // index = change + 5
  std::size_t compared = 0;
  std::size_t failed_restorations = 0;

  std::size_t count(int change) const { return histogram[static_cast<std::size_t>(change + kMaxRank)]; }
  double percentage(int change) const {
    return compared == 0 ? 0.0 : 100.0 * static_cast<double>(count(change)) / static_cast<double>(compared);
  }
};

// Re-ranks each lineup with members drawn from `after` and the source from
// `original`; membership is fixed from the before pass. Lineups with a
// member missing from `after`, or listed in `failed`, are counted as failed
// restorations.
inline RankChangeReport compare_variants(std::span<const LineupResult> before, const CorpusHandle& original,
                                         const CorpusHandle& after, const std::set<ImageId>& failed = {}) {
  RankChangeReport report;
  for (const auto& res : before) {
    RankChange rc;
    rc.lineup = res.lineup.source;
    rc.rank_before = res.probe_rank;
    const auto members = res.lineup.members();
    bool ok = failed.count(res.lineup.source) == 0;
    for (const auto& m : members) ok = ok && after.contains(m);
    if (!ok) {
      rc.failed_restoration = true;
      rc.rank_after = rc.rank_before;
      ++report.failed_restorations;
    } else {
      // Sources are never restored: always score against the original.
      const auto source = l2_normalize(std::span<const float>(original.at(res.lineup.source).vector));
      rc.rank_after = rank_among(source, members, res.lineup.probe, [&](const ImageId& id) {
        return l2_normalize(std::span<const float>(after.at(id).vector));
      });
      rc.change = rc.rank_before - rc.rank_after;
      ++report.histogram[static_cast<std::size_t>(rc.change + kMaxRank)];
      ++report.compared;
    }
    report.per_lineup.push_back(rc);
  }
  return report;
}

struct OutcomeTable {
  std::size_t improvements = 0;
  std::size_t degradations = 0;
  std::size_t unchanged = 0;
  std::size_t success_conversions = 0;
  std::size_t failed_restorations = 0;
  std::size_t total = 0;
  double mean_improvement = 0.0;   // mean change over improved lineups
  double mean_degradation = 0.0;   // mean |change| over degraded lineups
  double mean_rank_before = 0.0;   // over compared lineups
  double mean_rank_after = 0.0;

  static OutcomeTable from_counts(std::size_t improvements, std::size_t degradations, std::size_t unchanged,
                                  std::size_t success_conversions, std::size_t failed_restorations = 0) {
    OutcomeTable t;
    t.improvements = improvements;
    t.degradations = degradations;
    t.unchanged = unchanged;
    t.success_conversions = success_conversions;
    t.failed_restorations = failed_restorations;
    t.total = improvements + degradations + unchanged + failed_restorations;
    return t;
  }

  double percent(std::size_t count) const {
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(count) / static_cast<double>(total);
  }
};

inline OutcomeTable summarize_outcomes(const RankChangeReport& report) {
  OutcomeTable t;
  double sum_impr = 0, sum_degr = 0, sum_before = 0, sum_after = 0;
  for (const auto& rc : report.per_lineup) {
    ++t.total;
    if (rc.failed_restoration) {
      ++t.failed_restorations;
      continue;
    }
    sum_before += rc.rank_before;
    sum_after += rc.rank_after;
    if (rc.change > 0) {
      ++t.improvements;
      sum_impr += rc.change;
      if (rc.rank_after == 0) ++t.success_conversions;
    } else if (rc.change < 0) {
      ++t.degradations;
      sum_degr += -rc.change;
    } else {
      ++t.unchanged;
    }
  }
  if (t.improvements) t.mean_improvement = sum_impr / static_cast<double>(t.improvements);
  if (t.degradations) t.mean_degradation = sum_degr / static_cast<double>(t.degradations);
  const std::size_t compared = t.total - t.failed_restorations;
  if (compared) {
    t.mean_rank_before = sum_before / static_cast<double>(compared);
    t.mean_rank_after = sum_after / static_cast<double>(compared);
  }
  return t;
}

// Same as above, cross-checking the report against the before-pass results.
inline OutcomeTable summarize_outcomes(const RankChangeReport& report, std::span<const LineupResult> before) {
  if (before.size() != report.per_lineup.size())
    throw data_error("rank-change report does not match the before-pass results");
  for (std::size_t i = 0; i < before.size(); ++i)
    if (before[i].lineup.source != report.per_lineup[i].lineup ||
        before[i].probe_rank != report.per_lineup[i].rank_before)
      throw data_error("rank-change report disagrees with before-pass result for " + before[i].lineup.source.str());
  return summarize_outcomes(report);
}

// ---------------------------------------------------------------------------
// Files

inline std::string format_percent(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", p);
  return buf;
}

inline nlohmann::json to_json(const Lineup& l) {
  nlohmann::json fillers = nlohmann::json::array();
  for (const auto& f : l.fillers) fillers.push_back(f.str());
  return {{"source", l.source.str()}, {"fillers", fillers}, {"probe", l.probe.str()}, {"seed", l.seed}};
}

inline Lineup lineup_from_json(const nlohmann::json& j) {
  Lineup l;
  l.source = ImageId(j.at("source").get<std::string>());
  const auto& f = j.at("fillers");
  if (!f.is_array() || f.size() != kFillerCount) throw data_error("lineup " + l.source.str() + " must have 5 fillers");
  for (std::size_t i = 0; i < kFillerCount; ++i) l.fillers[i] = ImageId(f[i].get<std::string>());
  l.probe = ImageId(j.at("probe").get<std::string>());
  l.seed = j.at("seed").get<std::uint64_t>();
  return l;
}

// Lineup manifest JSONL: {"source": id, "fillers": [5 ids], "probe": id, "seed": int}.
inline void write_lineup_manifest(std::ostream& out, std::span<const Lineup> lineups) {
  for (const auto& l : lineups) out << to_json(l).dump() << '\n';
}

inline std::vector<Lineup> read_lineup_manifest(std::istream& in, const std::string& name = "manifest") {
  std::vector<Lineup> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(lineup_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw data_error(name + ":" + std::to_string(lineno) + ": malformed lineup (" + e.what() + ")");
    }
  }
  return out;
}

// Results CSV: source_id,probe_rank,success
inline void write_results_csv(std::ostream& out, std::span<const LineupResult> results) {
  out << "source_id,probe_rank,success\n";
  for (const auto& r : results) out << r.lineup.source.str() << ',' << r.probe_rank << ',' << (r.success ? 1 : 0) << '\n';
}

// Rank-change CSV: change,count,percentage for change = -5..+5.
inline void write_rank_change_csv(std::ostream& out, const RankChangeReport& report) {
  out << "change,count,percentage\n";
  for (int c = -kMaxRank; c <= kMaxRank; ++c)
    out << (c > 0 ? "+" : "") << c << ',' << report.count(c) << ',' << format_percent(report.percentage(c)) << '\n';
}

// Outcome CSV: category,count,percentage.
inline void write_outcome_csv(std::ostream& out, const OutcomeTable& t) {
  out << "category,count,percentage\n";
  auto row = [&](const char* name, std::size_t n) { out << name << ',' << n << ',' << format_percent(t.percent(n)) << '\n'; };
  row("Rank Improvements", t.improvements);
  row("Rank Degradations", t.degradations);
  row("Rank Unchanged", t.unchanged);
  row("Success Conversions (Rank 0)", t.success_conversions);
  row("Failed Restoration", t.failed_restorations);
  out << "Total Analyzed," << t.total << ',' << format_percent(t.total ? 100.0 : 0.0) << '\n';
}

}  // namespace lnup
