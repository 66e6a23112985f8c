#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metasparse/checkpoint.hpp"
#include "metasparse/config.hpp"
#include "metasparse/mtl.hpp"
#include "metasparse/ops.hpp"
#include "metasparse/report.hpp"
#include "metasparse/run.hpp"

namespace fs = std::filesystem;
using namespace metasparse;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kConfigError = 2;
constexpr int kDivergence = 3;

/// "--key value" and "--key=value" pairs left over after CLI11 parsing.
std::map<std::string, std::string> overrides_from(const std::vector<std::string>& extras) {
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) throw ConfigError("unexpected argument " + a);
    std::string key = a.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.erase(eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("missing value for --" + key);
      value = extras[++i];
    }
    out[key] = value;
  }
  return out;
}

int cmd_run(const std::string& config_path, const std::string& mode, const std::vector<std::uint64_t>& seeds,
            const std::string& out_root, const std::vector<std::string>& extras) {
  RunConfig config = load_config(config_path);
  auto values = overrides_from(extras);
  if (!mode.empty()) values["mode"] = mode;
  apply_values(config, values);
  if (!seeds.empty()) config.seeds = seeds;
  const RunOutcome outcome = run(config, out_root);
  for (const auto& r : outcome.records) {
    std::printf("seed %llu: parameter sparsity %.2f%%, group sparsity %.2f%%, stop %s, %.1f s\n",
                static_cast<unsigned long long>(r.seed), r.final_metrics.parameter_sparsity_percent,
                r.final_metrics.group_sparsity_percent, r.stop_reason.c_str(), r.wall_clock_seconds);
  }
  std::printf("%s\n", outcome.directory.string().c_str());
  return kOk;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out_dir) {
  std::vector<fs::path> dirs(runs.begin(), runs.end());
  const Report rep = make_report(collect_records(dirs));
  if (out_dir.empty()) {
    std::cout << rep.table_csv;
    return kOk;
  }
  fs::create_directories(out_dir);
  std::ofstream(fs::path(out_dir) / "comparison.csv") << rep.table_csv;
  std::ofstream(fs::path(out_dir) / "profiles.svg") << rep.profile_svg;
  std::cout << rep.table_csv;
  return kOk;
}

int cmd_inspect(const std::string& path) {
  const Checkpoint ck = Checkpoint::load(path);
  const MultiTaskModel model = ck.restore_model();
  std::printf("config hash %s, lambda %.6g (raw %.6g)\n", hex_hash(ck.config_hash).c_str(),
              softplus_value(ck.lambda_raw), ck.lambda_raw);
  for (const auto& gw : model.governed()) {
    auto it = ck.masks.find(gw.partition.parameter_id);
    if (it == ck.masks.end()) {
      std::printf("%s: no mask\n", gw.partition.parameter_id.c_str());
      continue;
    }
    const MaskArray& mask = it->second;
    std::string pattern;
    std::size_t masked_groups = 0;
    for (const auto& group : gw.partition.groups) {
      bool all_masked = true;
      for (Index j : group) all_masked = all_masked && !mask[j];
      masked_groups += all_masked;
      if (gw.partition.mode == SparsityMode::structured) pattern += all_masked ? '0' : '1';
    }
    const Index masked_entries = mask.size() - mask.count();
    std::printf("%s: %zu/%zu groups masked, %lld/%lld entries masked", gw.partition.parameter_id.c_str(),
                masked_groups, gw.partition.size(), static_cast<long long>(masked_entries),
                static_cast<long long>(mask.size()));
    if (!pattern.empty()) std::printf(", channels %s", pattern.c_str());
    std::printf("\n");
  }
  const auto m = measure(model.governed());
  std::printf("parameter sparsity %.2f%%, group sparsity %.2f%%\n", m.parameter_sparsity_percent,
              m.group_sparsity_percent);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metasparse: meta-learned group sparsity for multi-task models"};
  app.require_subcommand(1);

  std::string config_path, mode, out_root = "runs", report_out, checkpoint;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> runs;

  auto* run_cmd = app.add_subcommand("run", "run one configuration over its seeds");
  run_cmd->add_option("--config", config_path, "key = value config file")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--mode", mode, "override the config mode");
  run_cmd->add_option("--seed", seeds, "run only these seeds");
  run_cmd->add_option("--out", out_root, "root directory for run artifacts");
  run_cmd->allow_extras();
  run_cmd->footer("Any config key can be overridden with --<key> <value>.");

  auto* report_cmd = app.add_subcommand("report", "aggregate run records into tables and charts");
  report_cmd->add_option("--runs", runs, "run directories")->required();
  report_cmd->add_option("--out", report_out, "write comparison.csv and profiles.svg here");

  auto* inspect_cmd = app.add_subcommand("inspect-mask", "print the mask stored in a checkpoint");
  inspect_cmd->add_option("--checkpoint", checkpoint, "checkpoint.bin path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run_cmd) return cmd_run(config_path, mode, seeds, out_root, run_cmd->remaining());
    if (*report_cmd) return cmd_report(runs, report_out);
    if (*inspect_cmd) return cmd_inspect(checkpoint);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ArtifactExists& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericDivergence& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
