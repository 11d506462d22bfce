#pragma once

// End-to-end orchestration: configuration, staged report files, the external
// restoration hook, and the run_* entry points behind the CLI subcommands.

#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "lnup/core.hpp"
#include "lnup/corpus.hpp"
#include "lnup/failpred.hpp"
#include "lnup/features.hpp"
#include "lnup/image.hpp"
#include "lnup/lineup.hpp"
#include "lnup/simindex.hpp"

namespace lnup {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

inline nlohmann::json default_config_json() {
  const failpred::EnsembleConfig e;
  const failpred::SplitFractions f;
  const CurationConfig c;
  return {
      {"paths",
       {{"embeddings", ""},
        {"restored_embeddings", ""},
        {"feature_embeddings", ""},
        {"images", ""},
        {"landmarks", ""},
        {"output", ""},
        {"model", ""},
        {"features", ""}}},
      {"embedding_dim", 0},
      {"lineup", {{"seed", 0}, {"distinct_filler_identities", false}}},
      {"index", {{"batch_size", 256}}},
      {"features", {{"target", "source"}}},
      {"curation",
       {{"dark_mean", c.dark_mean},
        {"bright_mean", c.bright_mean},
        {"min_laplacian_var", c.min_laplacian_var},
        {"image_extension", c.image_extension}}},
      {"ensemble",
       {{"seed", 0},
        {"precision_ratios", e.precision_ratios},
        {"recall_ratios", e.recall_ratios},
        {"n_estimators", e.n_estimators},
        {"max_iterations", e.max_iterations},
        {"threshold_override", nullptr}}},
      {"split", {{"train", f.train}, {"val", f.val}, {"test", f.test}, {"seed", 0}}},
      {"restore", {{"command", ""}, {"timeout_seconds", 600.0}, {"max_failure_fraction", 0.5}}},
      {"parallelism", 1},
  };
}

namespace detail {

// Every key in `patch` must already exist in `base`; nulls in base accept any
// value.
inline void merge_known(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw usage_error("config " + (prefix.empty() ? "root" : prefix) + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw usage_error("unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object()) merge_known(slot, it.value(), key);
    else slot = it.value();
  }
}

inline std::vector<std::string> split_dotted(const std::string& key) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    parts.push_back(key.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return parts;
}

}  // namespace detail

// Sets `key` (dotted path, e.g. "lineup.seed") to `value`. String slots take
// the text verbatim; everything else parses it as JSON.
inline void apply_override(nlohmann::json& config, const std::string& key, const std::string& value) {
  nlohmann::json* node = &config;
  for (const auto& part : detail::split_dotted(key)) {
    if (!node->is_object() || !node->contains(part)) throw usage_error("unknown config key '" + key + "'");
    node = &(*node)[part];
  }
  if (node->is_object()) throw usage_error("config key '" + key + "' is a section, not a value");
  if (node->is_string()) {
    *node = value;
    return;
  }
  try {
    *node = nlohmann::json::parse(value);
  } catch (const nlohmann::json::exception&) {
    throw usage_error("config key '" + key + "': cannot parse '" + value + "'");
  }
}

// Which lineup image the failure features describe.
enum class FeatureTarget { Source, Probe };

inline const ImageId& feature_image(const Lineup& l, FeatureTarget t) { return t == FeatureTarget::Probe ? l.probe : l.source; }

struct PipelineConfig {
  struct Paths {
    fs::path embeddings, restored_embeddings, feature_embeddings, images, landmarks, output, model, features;
  } paths;
  std::size_t embedding_dim = 0;  // 0 infers from the file
  std::uint64_t lineup_seed = 0;
  LineupOptions lineup;
  FeatureTarget feature_target = FeatureTarget::Source;
  CurationConfig curation;
  failpred::EnsembleConfig ensemble;
  failpred::SplitFractions split;
  std::uint64_t split_seed = 0;
  std::string hook_command;
  double hook_timeout_seconds = 600;
  double max_hook_failure_fraction = 0.5;
  unsigned parallelism = 1;

  fs::path model_path() const { return paths.model.empty() ? paths.output / "model.json" : paths.model; }
  fs::path features_path() const { return paths.features.empty() ? paths.output / "features.csv" : paths.features; }
  fs::path feature_embeddings_path() const {
    return paths.feature_embeddings.empty() ? paths.embeddings : paths.feature_embeddings;
  }
};

inline PipelineConfig config_from_json(const nlohmann::json& raw) {
  nlohmann::json j = default_config_json();
  detail::merge_known(j, raw, "");
  PipelineConfig c;
  try {
    const auto& p = j.at("paths");
    c.paths.embeddings = p.at("embeddings").get<std::string>();
    c.paths.restored_embeddings = p.at("restored_embeddings").get<std::string>();
    c.paths.feature_embeddings = p.at("feature_embeddings").get<std::string>();
    c.paths.images = p.at("images").get<std::string>();
    c.paths.landmarks = p.at("landmarks").get<std::string>();
    c.paths.output = p.at("output").get<std::string>();
    c.paths.model = p.at("model").get<std::string>();
    c.paths.features = p.at("features").get<std::string>();
    c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    c.lineup_seed = j.at("lineup").at("seed").get<std::uint64_t>();
    c.lineup.distinct_filler_identities = j.at("lineup").at("distinct_filler_identities").get<bool>();
    const auto batch = j.at("index").at("batch_size").get<long long>();
    if (batch < 1) throw usage_error("index.batch_size must be at least 1");
    c.lineup.search.batch_size = static_cast<std::size_t>(batch);
    const auto target = j.at("features").at("target").get<std::string>();
    if (target == "source") c.feature_target = FeatureTarget::Source;
    else if (target == "probe") c.feature_target = FeatureTarget::Probe;
    else throw usage_error("features.target must be \"source\" or \"probe\"");
    const auto& cu = j.at("curation");
    c.curation.dark_mean = cu.at("dark_mean").get<double>();
    c.curation.bright_mean = cu.at("bright_mean").get<double>();
    c.curation.min_laplacian_var = cu.at("min_laplacian_var").get<double>();
    c.curation.image_extension = cu.at("image_extension").get<std::string>();
    const auto& en = j.at("ensemble");
    c.ensemble.seed = en.at("seed").get<std::uint64_t>();
    c.ensemble.precision_ratios = en.at("precision_ratios").get<std::vector<double>>();
    c.ensemble.recall_ratios = en.at("recall_ratios").get<std::vector<double>>();
    c.ensemble.n_estimators = en.at("n_estimators").get<int>();
    c.ensemble.max_iterations = en.at("max_iterations").get<int>();
    if (!en.at("threshold_override").is_null()) c.ensemble.threshold_override = en.at("threshold_override").get<double>();
    const auto& sp = j.at("split");
    c.split = {sp.at("train").get<double>(), sp.at("val").get<double>(), sp.at("test").get<double>()};
    c.split_seed = sp.at("seed").get<std::uint64_t>();
    const auto& r = j.at("restore");
    c.hook_command = r.at("command").get<std::string>();
    c.hook_timeout_seconds = r.at("timeout_seconds").get<double>();
    c.max_hook_failure_fraction = r.at("max_failure_fraction").get<double>();
    const auto par = j.at("parallelism").get<long long>();
    if (par < 1) throw usage_error("parallelism must be at least 1");
    c.parallelism = static_cast<unsigned>(par);
  } catch (const nlohmann::json::exception& e) {
    throw usage_error(std::string("bad config value: ") + e.what());
  }
  if (!(c.hook_timeout_seconds > 0)) throw usage_error("restore.timeout_seconds must be positive");
  if (c.max_hook_failure_fraction < 0 || c.max_hook_failure_fraction > 1)
    throw usage_error("restore.max_failure_fraction must lie in [0, 1]");
  c.lineup.search.threads = c.parallelism;
  c.ensemble.threads = c.parallelism;
  return c;
}

// Defaults, then the optional JSON file, then dotted overrides in order.
inline PipelineConfig load_config(const std::optional<fs::path>& file,
                                  const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  nlohmann::json j = default_config_json();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw usage_error("cannot open config " + file->string());
    try {
      detail::merge_known(j, nlohmann::json::parse(in), "");
    } catch (const nlohmann::json::parse_error& e) {
      throw usage_error(file->string() + ": " + e.what());
    }
  }
  for (const auto& [k, v] : overrides) apply_override(j, k, v);
  return config_from_json(j);
}

namespace detail {

inline void require_file(const fs::path& p, const char* what) {
  if (p.empty()) throw usage_error(std::string("paths.") + what + " is not set");
  std::error_code ec;
  if (!fs::exists(p, ec)) throw usage_error(std::string("paths.") + what + " does not exist: " + p.string());
}

inline void require_output(const PipelineConfig& c) {
  if (c.paths.output.empty()) throw usage_error("paths.output is not set");
  std::error_code ec;
  fs::create_directories(c.paths.output, ec);
  if (ec || !fs::is_directory(c.paths.output))
    throw data_error("cannot create output directory " + c.paths.output.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Staged outputs: files are written as <name>.partial and renamed together on
// commit. Anything uncommitted is removed when the stage goes away.

class StagedOutputs {
 public:
  explicit StagedOutputs(fs::path dir) : dir_(std::move(dir)) {}
  StagedOutputs(const StagedOutputs&) = delete;
  StagedOutputs& operator=(const StagedOutputs&) = delete;

  ~StagedOutputs() {
    if (committed_) return;
    for (auto& f : files_) {
      f.stream.reset();
      std::error_code ec;
      fs::remove(partial(f.name), ec);
    }
  }

  std::ostream& open(const std::string& name) {
    auto s = std::make_unique<std::ofstream>(partial(name), std::ios::binary | std::ios::trunc);
    if (!*s) throw data_error("cannot write " + (dir_ / name).string());
    files_.push_back({name, std::move(s)});
    return *files_.back().stream;
  }

  void commit() {
    for (auto& f : files_) {
      f.stream->close();
      if (f.stream->fail()) throw data_error("error writing " + (dir_ / f.name).string());
    }
    for (auto& f : files_) fs::rename(partial(f.name), dir_ / f.name);
    committed_ = true;
  }

 private:
  struct File {
    std::string name;
    std::unique_ptr<std::ofstream> stream;
  };
  fs::path partial(const std::string& name) const { return dir_ / (name + ".partial"); }

  fs::path dir_;
  std::vector<File> files_;
  bool committed_ = false;
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Restoration hook

struct HookStatus {
  ImageId image_id;
  int exit_code = 0;
  bool timed_out = false;
  bool output_missing = false;
  bool ok() const { return exit_code == 0 && !timed_out && !output_missing; }
};

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char ch : s) {
    if (ch == '\'') out += "'\\''";
    else out += ch;
  }
  return out + "'";
}

class RestorationHook {
 public:
  RestorationHook(std::string command, double timeout_seconds) : command_(std::move(command)), timeout_(timeout_seconds) {
    if (command_.find("{input}") == std::string::npos || command_.find("{output}") == std::string::npos)
      throw usage_error("restore.command must contain both {input} and {output}");
    if (!(timeout_ > 0)) throw usage_error("restore.timeout_seconds must be positive");
  }

  const std::string& command() const noexcept { return command_; }
  double timeout_seconds() const noexcept { return timeout_; }

  std::string render(const fs::path& input, const fs::path& output) const {
    std::string cmd = command_;
    auto replace_all = [&](const std::string& key, const std::string& val) {
      for (auto pos = cmd.find(key); pos != std::string::npos; pos = cmd.find(key, pos + val.size()))
        cmd.replace(pos, key.size(), val);
    };
    replace_all("{input}", shell_quote(input.string()));
    replace_all("{output}", shell_quote(output.string()));
    return cmd;
  }

  // Runs through /bin/sh in its own process group; the whole group is killed
  // on timeout. The hook's stdout goes to stderr.
  HookStatus run(const ImageId& id, const fs::path& input, const fs::path& output) const {
    HookStatus st{id};
    const std::string cmd = render(input, output);
    std::error_code ec;
    fs::remove(output, ec);
    const pid_t pid = fork();
    if (pid < 0) {
      st.exit_code = -1;
      return st;
    }
    if (pid == 0) {
      setpgid(0, 0);
      dup2(STDERR_FILENO, STDOUT_FILENO);
      execl("/bin/sh", "sh", "-c", cmd.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    setpgid(pid, pid);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_);
    auto pause = std::chrono::milliseconds(1);
    int status = 0;
    for (;;) {
      const pid_t r = waitpid(pid, &status, WNOHANG);
      if (r == pid) break;
      if (r < 0 && errno != EINTR) {
        st.exit_code = -1;
        return st;
      }
      if (std::chrono::steady_clock::now() >= deadline) {
        kill(-pid, SIGKILL);
        kill(pid, SIGKILL);
        waitpid(pid, &status, 0);
        st.timed_out = true;
        st.exit_code = -1;
        return st;
      }
      std::this_thread::sleep_for(pause);
      pause = std::min(pause * 2, std::chrono::milliseconds(20));
    }
    st.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + (WIFSIGNALED(status) ? WTERMSIG(status) : 0);
    if (st.exit_code == 0 && !fs::is_regular_file(output, ec)) st.output_missing = true;
    return st;
  }

 private:
  std::string command_;
  double timeout_;
};

inline void write_hook_status_csv(std::ostream& out, std::span<const HookStatus> statuses) {
  out << "image_id,exit_code,timed_out,output_missing,ok\n";
  for (const auto& s : statuses)
    out << s.image_id.str() << ',' << s.exit_code << ',' << (s.timed_out ? 1 : 0) << ',' << (s.output_missing ? 1 : 0)
        << ',' << (s.ok() ? 1 : 0) << '\n';
}

inline std::vector<HookStatus> read_hook_status_csv(std::istream& in, const std::string& name) {
  std::vector<HookStatus> out;
  std::string line;
  if (!std::getline(in, line) || line.rfind("image_id,", 0) != 0) throw data_error(name + ": missing header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, code, timed, missing, ok;
    if (!std::getline(ss, id, ',') || !std::getline(ss, code, ',') || !std::getline(ss, timed, ',') ||
        !std::getline(ss, missing, ','))
      throw data_error(name + ":" + std::to_string(lineno) + ": malformed row");
    try {
      out.push_back({ImageId(id), std::stoi(code), timed == "1", missing == "1"});
    } catch (const std::exception&) {
      throw data_error(name + ":" + std::to_string(lineno) + ": malformed row");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared loaders

inline CorpusHandle load_corpus(const PipelineConfig& c) {
  detail::require_file(c.paths.embeddings, "embeddings");
  return ingest_embeddings(c.paths.embeddings, c.embedding_dim ? std::optional<std::size_t>(c.embedding_dim) : std::nullopt);
}

inline std::vector<Lineup> load_manifest(const PipelineConfig& c) {
  const auto path = c.paths.output / "lineups.jsonl";
  std::ifstream in(path);
  if (!in) throw data_error("missing lineup manifest " + path.string() + " (run evaluate first)");
  return read_lineup_manifest(in, path.string());
}

// Before-pass ranks recomputed from the manifest and the original corpus.
inline std::vector<LineupResult> rank_manifest(const std::vector<Lineup>& lineups, const CorpusHandle& corpus,
                                               unsigned threads) {
  std::vector<LineupResult> out(lineups.size());
  parallel_for(lineups.size(), threads, [&](std::size_t i) { out[i] = rank_probe(lineups[i], corpus); });
  return out;
}

// ---------------------------------------------------------------------------
// ingest / curate / index / lineups / evaluate

struct IngestSummary {
  std::size_t images = 0;
  std::size_t identities = 0;
  std::size_t dim = 0;
};

inline IngestSummary run_ingest(const PipelineConfig& c) {
  detail::require_output(c);
  const auto corpus = load_corpus(c);
  StagedOutputs out(c.paths.output);
  out.open("embeddings.lnup") << encode_embeddings_binary(corpus.records(), corpus.dim());
  out.commit();
  return {corpus.size(), corpus.identity_index().size(), corpus.dim()};
}

inline CurationReport run_curate(const PipelineConfig& c) {
  detail::require_output(c);
  const auto corpus = load_corpus(c);
  detail::require_file(c.paths.images, "images");
  LandmarkTable landmarks;
  if (!c.paths.landmarks.empty()) {
    detail::require_file(c.paths.landmarks, "landmarks");
    landmarks = ingest_landmarks(c.paths.landmarks);
  }
  auto report = curate(corpus, landmarks, c.paths.images, c.curation);
  StagedOutputs out(c.paths.output);
  out.open("curated.lnup") << encode_embeddings_binary(report.retained.records(), report.retained.dim());
  auto& csv = out.open("curation.csv");
  csv << "image_id,reason\n";
  for (const auto& r : report.removed) csv << r.image_id.str() << ',' << to_string(r.reason) << '\n';
  out.commit();
  return report;
}

inline void run_index(const PipelineConfig& c) {
  detail::require_output(c);
  const auto index = build_index(load_corpus(c));
  const auto path = c.paths.output / "index.lnup";
  const auto tmp = c.paths.output / "index.lnup.partial";
  try {
    save_index(tmp, index);
    fs::rename(tmp, path);
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
}

inline std::vector<Lineup> run_lineups(const PipelineConfig& c) {
  detail::require_output(c);
  const auto corpus = load_corpus(c);
  const auto index = build_index(corpus);
  const auto sources = all_sources(corpus);
  const auto part = partition_sources(corpus, index, sources, c.lineup);
  const auto lineups = part.eligible.empty() ? std::vector<Lineup>{}
                                             : build_lineups(index, corpus, part.eligible, c.lineup_seed, c.lineup);
  StagedOutputs out(c.paths.output);
  write_lineup_manifest(out.open("lineups.jsonl"), lineups);
  out.commit();
  return lineups;
}

inline nlohmann::json accuracy_json(const AccuracyReport& r, bool eligible) {
  nlohmann::json skipped = nlohmann::json::array();
  for (const auto& s : r.skipped) skipped.push_back({{"source", s.source.str()}, {"reason", s.reason}});
  nlohmann::json j{{"lineups", r.results.size()}, {"successes", r.successes}, {"skipped", skipped}};
  if (eligible) {
    j["status"] = "ok";
    j["accuracy"] = r.accuracy;
  } else {
    j["status"] = kNoEligibleSources;
    j["accuracy"] = nullptr;
  }
  return j;
}

struct EvaluateOutcome {
  AccuracyReport report;
  bool eligible = true;  // false: no source could form a lineup
};

// Writes lineups.jsonl, results.csv and accuracy.json.
inline EvaluateOutcome run_evaluate(const PipelineConfig& c) {
  detail::require_output(c);
  const auto corpus = load_corpus(c);
  const auto index = build_index(corpus);
  const auto sources = all_sources(corpus);
  EvaluateOutcome outcome;
  auto part = partition_sources(corpus, index, sources, c.lineup);
  if (part.eligible.empty()) {
    outcome.eligible = false;
    outcome.report.skipped = std::move(part.skipped);
  } else {
    outcome.report = evaluate_corpus(corpus, index, part.eligible, c.lineup_seed, c.lineup);
    outcome.report.skipped = std::move(part.skipped);
  }
  std::vector<Lineup> lineups;
  for (const auto& r : outcome.report.results) lineups.push_back(r.lineup);

  StagedOutputs out(c.paths.output);
  write_lineup_manifest(out.open("lineups.jsonl"), lineups);
  write_results_csv(out.open("results.csv"), outcome.report.results);
  out.open("accuracy.json") << accuracy_json(outcome.report, outcome.eligible).dump(2) << '\n';
  out.commit();
  return outcome;
}

// ---------------------------------------------------------------------------
// features / train / predict

struct FeatureSummary {
  std::size_t rows = 0;
  std::size_t skipped = 0;  // sources without a readable image or feature embedding
  std::size_t failures = 0;
};

// One row per lineup: features of the source (or probe) image, label 1 when
// the lineup failed (probe rank > 0).
inline LabeledFeatures compute_lineup_features(const PipelineConfig& c, const std::vector<LineupResult>& results,
                                               const CorpusHandle& feature_embeddings, const LandmarkTable& landmarks,
                                               std::size_t* skipped = nullptr) {
  std::vector<std::optional<FeatureVector>> rows(results.size());
  parallel_for(results.size(), c.parallelism, [&](std::size_t i) {
    const auto& id = feature_image(results[i].lineup, c.feature_target);
    const auto* emb = feature_embeddings.find(id);
    if (!emb) return;
    const auto path = c.paths.images / (id.str() + c.curation.image_extension);
    std::error_code ec;
    if (!fs::is_regular_file(path, ec)) return;
    const auto img = load_grayscale_image(path);
    const auto lm = landmarks.find(id);
    rows[i] = assemble_feature_vector(*emb, img, lm == landmarks.end() ? nullptr : &lm->second,
                                      feature_embeddings.dim());
  });
  LabeledFeatures data;
  data.embedding_dim = feature_embeddings.dim();
  std::size_t missing = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i]) {
      ++missing;
      continue;
    }
    data.vectors.push_back(std::move(*rows[i]));
    data.labels.push_back(results[i].success ? 0 : 1);
  }
  if (skipped) *skipped = missing;
  return data;
}

inline FeatureSummary run_features(const PipelineConfig& c) {
  detail::require_output(c);
  detail::require_file(c.paths.images, "images");
  const auto corpus = load_corpus(c);
  const auto results = rank_manifest(load_manifest(c), corpus, c.parallelism);
  detail::require_file(c.feature_embeddings_path(), "feature_embeddings");
  const auto feature_embeddings = ingest_embeddings(c.feature_embeddings_path());
  LandmarkTable landmarks;
  if (!c.paths.landmarks.empty()) {
    detail::require_file(c.paths.landmarks, "landmarks");
    landmarks = ingest_landmarks(c.paths.landmarks);
  }
  FeatureSummary s;
  const auto data = compute_lineup_features(c, results, feature_embeddings, landmarks, &s.skipped);
  s.rows = data.vectors.size();
  s.failures = static_cast<std::size_t>(std::count(data.labels.begin(), data.labels.end(), 1));

  const auto path = c.features_path();
  StagedOutputs out(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  write_feature_csv(out.open(path.filename().string()), data);
  out.commit();
  return s;
}

inline LabeledFeatures load_features(const PipelineConfig& c) {
  const auto path = c.features_path();
  std::ifstream in(path);
  if (!in) throw data_error("missing feature file " + path.string() + " (run features first)");
  return read_feature_csv(in, path.string());
}

inline failpred::Dataset to_dataset(const LabeledFeatures& f) {
  failpred::Dataset d;
  for (std::size_t i = 0; i < f.vectors.size(); ++i) {
    d.x.push_back(f.vectors[i].values);
    d.y.push_back(f.labels[i]);
    d.ids.push_back(f.vectors[i].image_id.str());
  }
  d.validate();
  return d;
}

struct TrainOutcome {
  failpred::TrainedEnsemble trained;
  failpred::Metrics test;
  std::array<std::size_t, 3> sizes{};
};

// Stratified train/val/test split, ensemble training, threshold search on
// val, metrics on test. Writes the model artifact and training_report.json.
inline TrainOutcome run_train(const PipelineConfig& c) {
  detail::require_output(c);
  const auto data = to_dataset(load_features(c));
  const auto split = failpred::stratified_split(data, c.split, c.split_seed);
  TrainOutcome o{failpred::train_ensemble(split.train, split.val, c.ensemble), {},
                 {split.train.size(), split.val.size(), split.test.size()}};
  if (split.test.size()) o.test = failpred::evaluate_classifier(o.trained.model, split.test, c.parallelism);

  auto report = failpred::to_json(o.trained.report);
  report["split"] = {{"train", o.sizes[0]}, {"val", o.sizes[1]}, {"test", o.sizes[2]}};
  report["test"] = failpred::to_json(o.test);

  const auto model_path = c.model_path();
  StagedOutputs model_out(model_path.parent_path().empty() ? fs::path(".") : model_path.parent_path());
  model_out.open(model_path.filename().string()) << failpred::to_json(o.trained.model).dump() << '\n';
  StagedOutputs out(c.paths.output);
  out.open("training_report.json") << report.dump(2) << '\n';
  model_out.commit();
  out.commit();
  return o;
}

struct Prediction {
  ImageId source;
  double probability = 0;
  bool predicted_failure = false;
};

inline void write_predictions_csv(std::ostream& out, std::span<const Prediction> preds) {
  out << "source_id,probability,predicted_failure\n";
  for (const auto& p : preds)
    out << p.source.str() << ',' << format_double(p.probability) << ',' << (p.predicted_failure ? 1 : 0) << '\n';
}

inline std::vector<Prediction> read_predictions_csv(std::istream& in, const std::string& name) {
  std::vector<Prediction> out;
  std::string line;
  if (!std::getline(in, line) || line.rfind("source_id,", 0) != 0) throw data_error(name + ": missing header");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, p, f;
    if (!std::getline(ss, id, ',') || !std::getline(ss, p, ',') || !std::getline(ss, f, ','))
      throw data_error(name + ":" + std::to_string(lineno) + ": malformed row");
    try {
      out.push_back({ImageId(id), std::stod(p), f == "1"});
    } catch (const std::exception&) {
      throw data_error(name + ":" + std::to_string(lineno) + ": malformed row");
    }
  }
  return out;
}

// Classifies every lineup in the manifest from its feature row.
inline std::vector<Prediction> predict_lineups(const failpred::EnsembleModel& model, const std::vector<Lineup>& lineups,
                                               const LabeledFeatures& features, unsigned threads,
                                               FeatureTarget target = FeatureTarget::Source) {
  std::map<ImageId, const FeatureVector*> by_id;
  for (const auto& v : features.vectors) by_id.emplace(v.image_id, &v);
  std::vector<Prediction> out(lineups.size());
  std::vector<const FeatureVector*> rows(lineups.size());
  for (std::size_t i = 0; i < lineups.size(); ++i) {
    const auto& key = feature_image(lineups[i], target);
    const auto it = by_id.find(key);
    if (it == by_id.end()) throw data_error("no feature row for lineup " + lineups[i].source.str() + " (image " + key.str() + ")");
    rows[i] = it->second;
    out[i].source = lineups[i].source;
  }
  parallel_for(lineups.size(), threads, [&](std::size_t i) {
    out[i].probability = model.predict_proba_raw(rows[i]->values);
    out[i].predicted_failure = out[i].probability >= model.threshold();
  });
  return out;
}

inline std::vector<Prediction> run_predict(const PipelineConfig& c) {
  detail::require_output(c);
  detail::require_file(c.model_path(), "model");
  const auto model = failpred::load_model(c.model_path());
  const auto preds = predict_lineups(model, load_manifest(c), load_features(c), c.parallelism, c.feature_target);
  StagedOutputs out(c.paths.output);
  write_predictions_csv(out.open("predictions.csv"), preds);
  out.commit();
  return preds;
}

inline std::vector<Prediction> load_predictions(const PipelineConfig& c) {
  const auto path = c.paths.output / "predictions.csv";
  std::ifstream in(path);
  if (!in) throw data_error("missing " + path.string() + " (run predict first)");
  return read_predictions_csv(in, path.string());
}

// ---------------------------------------------------------------------------
// restore

struct RestoreOutcome {
  std::vector<HookStatus> statuses;  // ascending image id
  std::size_t failures = 0;
  bool threshold_exceeded = false;

  double failure_fraction() const {
    return statuses.empty() ? 0.0 : static_cast<double>(failures) / static_cast<double>(statuses.size());
  }
};

// Lineups selected for restoration: those whose source is predicted to fail.
inline std::vector<Lineup> selected_lineups(const std::vector<Lineup>& lineups, std::span<const Prediction> preds) {
  std::set<ImageId> flagged;
  for (const auto& p : preds)
    if (p.predicted_failure) flagged.insert(p.source);
  std::vector<Lineup> out;
  for (const auto& l : lineups)
    if (flagged.count(l.source)) out.push_back(l);
  return out;
}

// Runs the hook once per distinct member of the selected lineups, writing
// restored images under <output>/restored. Sources are never passed to the
// hook. Individual failures are recorded, never thrown.
inline RestoreOutcome restore_members(const PipelineConfig& c, const std::vector<Lineup>& selected) {
  const RestorationHook hook(c.hook_command, c.hook_timeout_seconds);
  detail::require_file(c.paths.images, "images");
  const auto dir = c.paths.output / "restored";
  fs::create_directories(dir);

  std::set<ImageId> members;
  for (const auto& l : selected)
    for (const auto& m : l.members()) members.insert(m);

  const std::vector<ImageId> ids(members.begin(), members.end());
  RestoreOutcome out;
  out.statuses.resize(ids.size());
  parallel_for(ids.size(), c.parallelism, [&](std::size_t i) {
    const auto name = ids[i].str() + c.curation.image_extension;
    out.statuses[i] = hook.run(ids[i], c.paths.images / name, dir / name);
  });
  for (const auto& s : out.statuses) out.failures += s.ok() ? 0 : 1;
  out.threshold_exceeded = out.failure_fraction() > c.max_hook_failure_fraction;
  return out;
}

inline RestoreOutcome run_restore(const PipelineConfig& c) {
  detail::require_output(c);
  const auto selected = selected_lineups(load_manifest(c), load_predictions(c));
  auto outcome = restore_members(c, selected);
  StagedOutputs out(c.paths.output);
  write_hook_status_csv(out.open("hook_status.csv"), outcome.statuses);
  out.commit();
  return outcome;
}

// ---------------------------------------------------------------------------
// compare / report

struct LineupComparison {
  Lineup lineup;
  double probability = 0;
  bool failed_before = false;  // ground truth: probe rank > 0 before restoration
  RankChange change;
};

// Tables: all selected lineups (rank-change distribution), predicted
// failures that really failed, and predicted failures that had succeeded.
struct ComparisonResults {
  std::vector<LineupComparison> lineups;  // manifest order
  RankChangeReport all;
  OutcomeTable all_outcomes;
  OutcomeTable true_positives;
  OutcomeTable false_positives;
  std::vector<HookStatus> hooks;
};

inline RankChangeReport report_from_changes(std::vector<RankChange> changes) {
  RankChangeReport r;
  for (auto& rc : changes) {
    if (rc.failed_restoration) {
      ++r.failed_restorations;
    } else {
      if (rc.change < -kMaxRank || rc.change > kMaxRank) throw data_error("rank change out of range for " + rc.lineup.str());
      ++r.histogram[static_cast<std::size_t>(rc.change + kMaxRank)];
      ++r.compared;
    }
    r.per_lineup.push_back(std::move(rc));
  }
  return r;
}

inline ComparisonResults assemble_comparison(std::vector<LineupComparison> rows, std::vector<HookStatus> hooks) {
  ComparisonResults res;
  std::vector<RankChange> all, tp, fp;
  for (const auto& r : rows) {
    all.push_back(r.change);
    (r.failed_before ? tp : fp).push_back(r.change);
  }
  res.lineups = std::move(rows);
  res.all = report_from_changes(all);
  res.all_outcomes = summarize_outcomes(res.all);
  res.true_positives = summarize_outcomes(report_from_changes(tp));
  res.false_positives = summarize_outcomes(report_from_changes(fp));
  res.hooks = std::move(hooks);
  return res;
}

// Re-ranks the selected lineups against the restored embeddings. Sources are
// always scored from the original corpus; lineups touching a failed hook run
// or a member absent from `restored` count as failed restorations.
inline ComparisonResults compare_selected(const std::vector<Lineup>& selected, std::span<const Prediction> preds,
                                          const CorpusHandle& original, const CorpusHandle& restored,
                                          std::vector<HookStatus> hooks, unsigned threads) {
  if (restored.dim() != original.dim() && !restored.empty())
    throw data_error("restored embeddings have dimension " + std::to_string(restored.dim()) + ", original " +
                     std::to_string(original.dim()));
  std::set<ImageId> failed_images;
  for (const auto& h : hooks)
    if (!h.ok()) failed_images.insert(h.image_id);
  std::set<ImageId> failed_sources;
  for (const auto& l : selected)
    for (const auto& m : l.members())
      if (failed_images.count(m)) failed_sources.insert(l.source);

  std::map<ImageId, double> proba;
  for (const auto& p : preds) proba[p.source] = p.probability;

  const auto before = rank_manifest(selected, original, threads);
  const auto report = compare_variants(before, original, restored, failed_sources);
  std::vector<LineupComparison> rows;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto it = proba.find(selected[i].source);
    rows.push_back({selected[i], it == proba.end() ? 0.0 : it->second, !before[i].success, report.per_lineup[i]});
  }
  return assemble_comparison(std::move(rows), std::move(hooks));
}

inline nlohmann::json to_json(const OutcomeTable& t) {
  return {{"improvements", t.improvements},
          {"degradations", t.degradations},
          {"unchanged", t.unchanged},
          {"success_conversions", t.success_conversions},
          {"failed_restorations", t.failed_restorations},
          {"total", t.total},
          {"mean_improvement", t.mean_improvement},
          {"mean_degradation", t.mean_degradation},
          {"mean_rank_before", t.mean_rank_before},
          {"mean_rank_after", t.mean_rank_after}};
}

inline nlohmann::json to_json(const ComparisonResults& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& l : r.lineups)
    rows.push_back({{"lineup", lnup::to_json(l.lineup)},
                    {"probability", l.probability},
                    {"failed_before", l.failed_before},
                    {"rank_before", l.change.rank_before},
                    {"rank_after", l.change.rank_after},
                    {"change", l.change.change},
                    {"failed_restoration", l.change.failed_restoration}});
  nlohmann::json hooks = nlohmann::json::array();
  for (const auto& h : r.hooks)
    hooks.push_back({{"image_id", h.image_id.str()}, {"exit_code", h.exit_code}, {"timed_out", h.timed_out},
                     {"output_missing", h.output_missing}});
  nlohmann::json hist = nlohmann::json::object();
  for (int c = -kMaxRank; c <= kMaxRank; ++c) hist[(c > 0 ? "+" : "") + std::to_string(c)] = r.all.count(c);
  return {{"lineups", rows},
          {"hooks", hooks},
          {"rank_changes", {{"histogram", hist}, {"compared", r.all.compared},
                            {"failed_restorations", r.all.failed_restorations}}},
          {"outcomes", {{"all", to_json(r.all_outcomes)},
                        {"true_positives", to_json(r.true_positives)},
                        {"false_positives", to_json(r.false_positives)}}}};
}

inline ComparisonResults comparison_from_json(const nlohmann::json& j) {
  try {
    std::vector<LineupComparison> rows;
    for (const auto& row : j.at("lineups")) {
      LineupComparison l;
      l.lineup = lineup_from_json(row.at("lineup"));
      l.probability = row.at("probability").get<double>();
      l.failed_before = row.at("failed_before").get<bool>();
      l.change.lineup = l.lineup.source;
      l.change.rank_before = row.at("rank_before").get<int>();
      l.change.rank_after = row.at("rank_after").get<int>();
      l.change.change = row.at("change").get<int>();
      l.change.failed_restoration = row.at("failed_restoration").get<bool>();
      rows.push_back(std::move(l));
    }
    std::vector<HookStatus> hooks;
    for (const auto& h : j.at("hooks"))
      hooks.push_back({ImageId(h.at("image_id").get<std::string>()), h.at("exit_code").get<int>(),
                       h.at("timed_out").get<bool>(), h.at("output_missing").get<bool>()});
    return assemble_comparison(std::move(rows), std::move(hooks));
  } catch (const nlohmann::json::exception& e) {
    throw data_error(std::string("malformed comparison report: ") + e.what());
  }
}

// rank_changes.csv, outcomes_{all,true_positives,false_positives}.csv and
// comparison.json, written together into `dir`.
inline void emit_reports(const ComparisonResults& results, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw data_error("cannot write reports to " + dir.string());
  StagedOutputs out(dir);
  write_rank_change_csv(out.open("rank_changes.csv"), results.all);
  write_outcome_csv(out.open("outcomes_all.csv"), results.all_outcomes);
  write_outcome_csv(out.open("outcomes_true_positives.csv"), results.true_positives);
  write_outcome_csv(out.open("outcomes_false_positives.csv"), results.false_positives);
  out.open("comparison.json") << to_json(results).dump(2) << '\n';
  out.commit();
}

inline std::vector<HookStatus> load_hook_statuses(const PipelineConfig& c) {
  const auto path = c.paths.output / "hook_status.csv";
  std::ifstream in(path);
  if (!in) return {};
  return read_hook_status_csv(in, path.string());
}

inline ComparisonResults run_compare(const PipelineConfig& c) {
  detail::require_output(c);
  const auto original = load_corpus(c);
  detail::require_file(c.paths.restored_embeddings, "restored_embeddings");
  const auto restored = ingest_embeddings(c.paths.restored_embeddings, original.dim());
  const auto preds = load_predictions(c);
  const auto selected = selected_lineups(load_manifest(c), preds);
  auto res = compare_selected(selected, preds, original, restored, load_hook_statuses(c), c.parallelism);
  emit_reports(res, c.paths.output);
  return res;
}

inline ComparisonResults run_report(const PipelineConfig& c) {
  const auto path = c.paths.output / "comparison.json";
  std::ifstream in(path);
  if (!in) throw data_error("missing " + path.string() + " (run compare first)");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw data_error(path.string() + ": " + e.what());
  }
  auto res = comparison_from_json(j);
  emit_reports(res, c.paths.output);
  return res;
}

struct PredictRestoreOutcome {
  std::vector<Prediction> predictions;
  std::optional<RestoreOutcome> restore;        // when a hook is configured
  std::optional<ComparisonResults> comparison;  // when restored embeddings are supplied
};

// predict, then restore when a hook is configured, then compare and emit
// reports when a restored-embedding file is supplied. The caller maps
// restore->threshold_exceeded to the hook exit status.
inline PredictRestoreOutcome run_predict_and_restore(const PipelineConfig& c) {
  if (c.hook_command.empty() && c.paths.restored_embeddings.empty())
    throw usage_error("configure restore.command or paths.restored_embeddings");
  detail::require_output(c);
  const auto original = load_corpus(c);
  if (!c.paths.restored_embeddings.empty()) detail::require_file(c.paths.restored_embeddings, "restored_embeddings");
  PredictRestoreOutcome o;
  o.predictions = run_predict(c);
  const auto selected = selected_lineups(load_manifest(c), o.predictions);
  std::vector<HookStatus> hooks;
  if (!c.hook_command.empty()) {
    o.restore = restore_members(c, selected);
    StagedOutputs out(c.paths.output);
    write_hook_status_csv(out.open("hook_status.csv"), o.restore->statuses);
    out.commit();
    hooks = o.restore->statuses;
  }
  if (!c.paths.restored_embeddings.empty()) {
    const auto restored = ingest_embeddings(c.paths.restored_embeddings, original.dim());
    o.comparison = compare_selected(selected, o.predictions, original, restored, std::move(hooks), c.parallelism);
    emit_reports(*o.comparison, c.paths.output);
  }
  return o;
}

}  // namespace lnup
