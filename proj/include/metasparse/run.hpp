#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "metasparse/config.hpp"
#include "metasparse/report.hpp"

namespace metasparse {

/// A seed directory that already holds artifacts.
class ArtifactExists : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<int> run_tasks(const RunConfig& config);
std::string run_label(const RunConfig& config);

/// `<root>/<mode>-<config hash>`.
std::filesystem::path run_directory(const RunConfig& config, const std::filesystem::path& root);

/// Executes one seed of a validated config. With `out` non-empty, writes
/// config.txt, profile.csv, record.json and checkpoint.bin into it.
RunRecord run_seed(const RunConfig& config, std::uint64_t seed, const std::filesystem::path& out = {});

struct RunOutcome {
  std::filesystem::path directory;
  std::vector<RunRecord> records;
};

/// Every seed of `config` into `<run_directory>/seed-<s>`, then summary.json
/// over all seed directories present. Validates first; throws ArtifactExists
/// before any compute when a seed directory is already there.
RunOutcome run(RunConfig config, const std::filesystem::path& root);

}  // namespace metasparse
