// lnup: batch lineup evaluation, failure prediction and restoration analysis.
//
//   lnup <subcommand> [--config FILE] [--dotted.key VALUE | --dotted.key=VALUE]...
//
// Every config value can be overridden by a flag of the same dotted name.

#include <CLI11.hpp>
#include <iostream>

#include "lnup/pipeline.hpp"

namespace {

using Overrides = std::vector<std::pair<std::string, std::string>>;

// Leftover arguments are config overrides: --key=value or --key value.
Overrides parse_overrides(const std::vector<std::string>& extras) {
  Overrides out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const auto& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() == 2) throw lnup::usage_error("unexpected argument '" + a + "'");
    const auto body = a.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw lnup::usage_error("missing value for --" + body);
      out.emplace_back(body, extras[++i]);
    }
  }
  return out;
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

int run(const std::string& cmd, const lnup::PipelineConfig& c) {
  using namespace lnup;
  if (cmd == "ingest") {
    const auto s = run_ingest(c);
    print({{"images", s.images}, {"identities", s.identities}, {"dim", s.dim}});
  } else if (cmd == "curate") {
    const auto r = run_curate(c);
    print({{"retained", r.retained.size()}, {"removed", r.removed.size()}});
  } else if (cmd == "index") {
    run_index(c);
  } else if (cmd == "lineups") {
    print({{"lineups", run_lineups(c).size()}});
  } else if (cmd == "evaluate") {
    const auto o = run_evaluate(c);
    auto j = accuracy_json(o.report, o.eligible);
    j.erase("skipped");
    j["skipped"] = o.report.skipped.size();
    print(j);
  } else if (cmd == "features") {
    const auto s = run_features(c);
    print({{"rows", s.rows}, {"skipped", s.skipped}, {"failures", s.failures}});
  } else if (cmd == "train") {
    const auto o = run_train(c);
    print({{"threshold", o.trained.model.threshold()}, {"test", failpred::to_json(o.test)}});
  } else if (cmd == "predict") {
    std::size_t flagged = 0;
    const auto preds = run_predict(c);
    for (const auto& p : preds) flagged += p.predicted_failure ? 1 : 0;
    print({{"lineups", preds.size()}, {"predicted_failures", flagged}});
  } else if (cmd == "restore") {
    const auto o = run_restore(c);
    print({{"images", o.statuses.size()}, {"failures", o.failures}});
    if (o.threshold_exceeded) {
      std::cerr << "lnup: hook failure fraction " << o.failure_fraction() << " exceeds restore.max_failure_fraction "
                << c.max_hook_failure_fraction << '\n';
      return exit_code(ErrorKind::Hook);
    }
  } else if (cmd == "compare" || cmd == "report") {
    const auto r = cmd == "compare" ? run_compare(c) : run_report(c);
    print({{"lineups", r.lineups.size()}, {"outcomes", to_json(r.all_outcomes)}});
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lineup evaluation and restoration analysis"};
  app.require_subcommand(1);
  std::string config_file;
  const std::vector<std::pair<const char*, const char*>> commands{
      {"ingest", "validate embeddings and write the binary corpus"},
      {"curate", "filter images by face presence, exposure and sharpness"},
      {"index", "build and save the similarity index"},
      {"lineups", "build the lineup manifest"},
      {"evaluate", "build lineups, rank probes and report accuracy"},
      {"features", "compute per-lineup image features"},
      {"train", "train the failure-prediction ensemble"},
      {"predict", "predict lineup failures"},
      {"restore", "run the restoration hook on predicted failures"},
      {"compare", "compare ranks against restored embeddings"},
      {"report", "re-emit reports from comparison.json"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--config", config_file, "JSON config file");
    s->allow_extras();
    subs.push_back(s);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return lnup::exit_code(lnup::ErrorKind::Usage);
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    const auto overrides = parse_overrides(sub->remaining());
    const auto cfg = lnup::load_config(config_file.empty() ? std::nullopt : std::optional<lnup::fs::path>(config_file),
                                       overrides);
    return run(sub->get_name(), cfg);
  } catch (const lnup::Error& e) {
    std::cerr << "lnup: " << e.what() << '\n';
    return lnup::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "lnup: " << e.what() << '\n';
    return lnup::exit_code(lnup::ErrorKind::Data);
  }
}
