#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "metasparse/checkpoint.hpp"
#include "metasparse/config.hpp"
#include "metasparse/meta.hpp"
#include "metasparse/report.hpp"
#include "metasparse/run.hpp"

using namespace metasparse;
namespace fs = std::filesystem;

namespace {

const fs::path kCli = METASPARSE_CLI;

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("metasparse_it_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& text) {
  const fs::path p = dir / name;
  std::ofstream(p) << text;
  return p;
}

/// Exit status of the CLI; stdout goes to `log`.
int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = kCli.string() + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kTiny =
    "n_samples = 300\nseeds = 0\nlr_backbone = 0.003\nlr_heads = 0.003\nmax_epochs = 3\npatience = 5\n";

}  // namespace

TEST_CASE("CLI exit codes") {
  const fs::path dir = fresh_dir("exit");
  const fs::path log = dir / "log.txt";
  CHECK(cli("--help", log) == 0);
  CHECK(cli("run --config " + (dir / "missing.cfg").string(), log) == 2);
  CHECK(cli("run --config " + write_config(dir, "u.cfg", "mode = mtl\nfoo = 1\n").string(), log) == 2);
  CHECK(cli("run --config " + write_config(dir, "l.cfg", "mode = mtl_fixed_sparsity\nlambda = -1\n").string(), log) ==
        2);
  CHECK(cli("run --config " + write_config(dir, "b.cfg", "mode = baseline_schedule\nschedule = one_shot\n"
                                                          "mask_strategy = magnitude_groups\nbudget = 120\n")
                                   .string(),
            log) == 2);
  CHECK(slurp(log).find("budget") != std::string::npos);
  CHECK(cli("nonsense", log) == 2);

  const fs::path diverge =
      write_config(dir, "d.cfg", "mode = mtl\nn_samples = 300\nseeds = 0\nlr_backbone = 1e200\nlr_heads = 1e200\n");
  CHECK(cli("run --config " + diverge.string() + " --out " + (dir / "runs").string(), log) == 3);
  CHECK(slurp(log).find("numeric divergence") != std::string::npos);

  const fs::path ok = write_config(dir, "ok.cfg", "mode = mtl\n" + kTiny);
  const std::string out = " --out " + (dir / "runs2").string();
  CHECK(cli("run --config " + ok.string() + out, log) == 0);
  CHECK(cli("run --config " + ok.string() + out, log) == 2);
  CHECK(slurp(log).find("refusing to overwrite") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("runs are deterministic and write every artifact") {
  const fs::path dir = fresh_dir("determinism");
  RunConfig c = parse_config("mode = mtl_fixed_sparsity\nlambda = 0.5\n" + kTiny);
  const RunOutcome a = run(c, dir / "a");
  const RunOutcome b = run(c, dir / "b");
  const fs::path seed0 = a.directory / "seed-0";
  for (const char* f : {"config.txt", "profile.csv", "record.json", "checkpoint.bin"}) CHECK(fs::exists(seed0 / f));
  CHECK(fs::exists(a.directory / "summary.json"));
  CHECK(record_json(load_record(seed0 / "record.json"), false) ==
        record_json(load_record(b.directory / "seed-0" / "record.json"), false));
  CHECK(slurp(seed0 / "profile.csv") == slurp(b.directory / "seed-0" / "profile.csv"));
  CHECK(slurp(seed0 / "profile.csv").rfind(kProfileHeader, 0) == 0);
  CHECK(hex_hash(parse_config(slurp(seed0 / "config.txt")).hash()) == a.records[0].config_hash);
  CHECK_THROWS_AS(run(c, dir / "a"), ArtifactExists);
  fs::remove_all(dir);
}

TEST_CASE("meta checkpoint feeds a meta-mask schedule through the CLI") {
  const fs::path dir = fresh_dir("meta_mask");
  const fs::path log = dir / "log.txt";
  const fs::path meta_cfg = write_config(dir, "meta.cfg",
                                         "mode = meta_sparsity\n" + kTiny +
                                             "meta_max_epochs = 40\nalpha_in = 0.01\nmeta_lr_backbone = 0.05\n"
                                             "penalty_weight = 1\n");
  REQUIRE(cli("run --config " + meta_cfg.string() + " --out " + (dir / "runs").string(), log) == 0);
  RunConfig mc = load_config(meta_cfg);
  mc.fill_defaults();
  const fs::path ck = run_directory(mc, dir / "runs") / "seed-0" / "checkpoint.bin";
  REQUIRE(fs::exists(ck));

  REQUIRE(cli("inspect-mask --checkpoint " + ck.string(), log) == 0);
  const std::string inspect = slurp(log);
  CHECK(inspect.find("groups masked") != std::string::npos);
  CHECK(inspect.find("parameter sparsity") != std::string::npos);
  CHECK(cli("inspect-mask --checkpoint " + (dir / "nope.bin").string(), log) == 1);

  const fs::path sched = write_config(dir, "sched.cfg",
                                      "mode = baseline_schedule\nschedule = sparse_training\n"
                                      "mask_strategy = meta_mask\nmeta_checkpoint = " +
                                          ck.string() + "\n" + kTiny);
  REQUIRE(cli("run --config " + sched.string() + " --out " + (dir / "runs").string(), log) == 0);
  RunConfig sc = load_config(sched);
  sc.fill_defaults();
  const Checkpoint meta_ck = Checkpoint::load(ck);
  const Checkpoint sched_ck = Checkpoint::load(run_directory(sc, dir / "runs") / "seed-0" / "checkpoint.bin");
  for (const auto& [id, mask] : meta_ck.masks) CHECK_FALSE((mask != sched_ck.masks.at(id)).any());

  const fs::path missing = write_config(dir, "missing.cfg",
                                        "mode = baseline_schedule\nschedule = one_shot\nmask_strategy = meta_mask\n"
                                        "meta_checkpoint = " +
                                            (dir / "absent.bin").string() + "\n" + kTiny);
  CHECK(cli("run --config " + missing.string() + " --out " + (dir / "runs").string(), log) == 2);

  REQUIRE(cli("report --runs " + (dir / "runs").string() + " --out " + (dir / "report").string(), log) == 0);
  const std::string table = slurp(dir / "report" / "comparison.csv");
  CHECK(table.rfind(kTableHeader, 0) == 0);
  CHECK(table.find("meta_sparsity,1,") != std::string::npos);
  CHECK(table.find("baseline_schedule/sparse_training/meta_mask,1,") != std::string::npos);
  CHECK(slurp(dir / "report" / "profiles.svg").find("<svg") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("a dense single-task model learns its planted statistic") {
  // Test MSE below a tenth of the label variance within 100 epochs.
  RunConfig c = load_config(fs::path(METASPARSE_SOURCE_DIR) / "configs" / "desk_single_task.cfg");
  c.max_epochs = 100;
  c.fill_defaults();
  c.validate();
  const int task = *c.task;
  const Dataset data = generate(c.synth(0));
  const RunRecord r = run_seed(c, 0);
  double mean = 0.0, sq = 0.0;
  const auto& test = data.splits().test;
  for (Index i : test) mean += data.labels()(i, task - 1);
  mean /= double(test.size());
  for (Index i : test) sq += std::pow(data.labels()(i, task - 1) - mean, 2);
  const double var = sq / double(test.size());
  MESSAGE("test mse " << r.test_loss.at(task) << ", label variance " << var);
  CHECK(r.test_loss.at(task) < 0.1 * var);
}
