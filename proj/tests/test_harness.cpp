#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "metasparse/checkpoint.hpp"
#include "metasparse/config.hpp"
#include "metasparse/report.hpp"
#include "metasparse/schedules.hpp"

using namespace metasparse;
namespace fs = std::filesystem;

namespace {

RunConfig filled(const std::string& text) {
  RunConfig c = parse_config(text);
  c.fill_defaults();
  return c;
}

bool same_masks(const MaskSet& a, const MaskSet& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [id, m] : a) {
    auto it = b.find(id);
    if (it == b.end() || it->second.size() != m.size() || (it->second != m).any()) return false;
  }
  return true;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("metasparse_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunRecord record(std::string label, std::uint64_t seed, double ps, std::map<int, double> loss, int epochs = 3) {
  RunRecord r;
  r.label = std::move(label);
  r.config_hash = "00000000deadbeef";
  r.seed = seed;
  r.final_metrics.parameter_sparsity_percent = ps;
  r.final_metrics.group_sparsity_percent = ps;
  r.test_loss = std::move(loss);
  for (int e = 1; e <= epochs; ++e) r.rows.push_back({e, "train", 1.0 / e, 1.5 / e, ps, ps, 0.0});
  r.stop_reason = "max_epochs";
  return r;
}

}  // namespace

TEST_CASE("configs round-trip through the canonical text") {
  const std::vector<std::string> texts{
      "mode = mtl\nseeds = 3,4\nlr_backbone = 0.0031\n",
      "mode = single_task\ntask = 3\nlambda = 0.25\n",
      "mode = mtl_fixed_sparsity\nlambda = 0.4\nsparsity_mode = unstructured\n",
      "mode = meta_sparsity\nregrow_prob = 0.2\nalpha_in = 1e-3\n",
      "mode = baseline_schedule\nschedule = progressive\nmask_strategy = random_groups\nbudget = 37.5\n",
      "mode = baseline_schedule\nschedule = one_shot\nmask_strategy = meta_mask\nmeta_checkpoint = x/ck.bin\n"};
  for (const auto& t : texts) {
    CAPTURE(t);
    const RunConfig c = filled(t);
    CHECK_NOTHROW(c.validate());
    const RunConfig back = parse_config(c.serialize());
    CHECK(back == c);
    CHECK(back.hash() == c.hash());
  }
}

TEST_CASE("config hash ignores seeds but not settings") {
  RunConfig a = filled("mode = mtl\n"), b = a, c = a;
  b.seeds = {7};
  c.lr_heads = 2e-4;
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != c.hash());
  CHECK(hex_hash(a.hash()).size() == 16);
}

TEST_CASE("invalid configs are rejected") {
  auto rejects = [](const std::string& text) {
    CAPTURE(text);
    CHECK_THROWS_AS(
        {
          RunConfig c = parse_config(text);
          c.fill_defaults();
          c.validate();
        },
        ConfigError);
  };
  rejects("mode = nonsense\n");
  rejects("mode = mtl\nunknown_key = 1\n");
  rejects("mode = mtl\nmode = mtl\n");
  rejects("mode = mtl\nlambda = 0.1\n");
  rejects("mode = single_task\nlambda = -1\n");
  rejects("mode = mtl_fixed_sparsity\nlambda = 0\n");
  rejects("mode = baseline_schedule\nschedule = one_shot\nmask_strategy = magnitude_groups\nbudget = 100\n");
  rejects("mode = baseline_schedule\nschedule = one_shot\nmask_strategy = meta_mask\n");
  rejects("mode = meta_baseline\nregrow_prob = 0.1\n");
  rejects("mode = meta_sparsity\nregrow_prob = 1\n");
  rejects("mode = mtl\nlr_backbone = abc\n");
  rejects("mode = mtl\nthis line has no equals\n");
  rejects("mode = single_task\ntask = 5\n");
  rejects("mode = mtl\nchannel_budget = 8\n");
}

TEST_CASE("fill_defaults supplies what the mode needs") {
  const RunConfig m = filled("mode = meta_sparsity\n");
  CHECK(m.sparsity_patience == 30);
  CHECK(m.penalty_weight == 1.0);
  CHECK(m.meta_lr_backbone == m.lr_backbone);
  CHECK(m.meta(0).learn_sparsity);
  CHECK_FALSE(filled("mode = meta_baseline\n").meta(0).learn_sparsity);
  CHECK(filled("mode = mtl\n").synth(2).seed == 1002);
}

TEST_CASE("checkpoints round-trip bit for bit") {
  std::mt19937_64 rng(3);
  ModelSpec spec;
  spec.tasks = {{1, TaskKind::binary_classification}, {4, TaskKind::regression}};
  MultiTaskModel m = MultiTaskModel::build(spec, rng);
  const auto mask = build_mask(m.governed(), MaskStrategy::random_groups, 30.0, rng);
  apply_masks(m.governed(), mask.masks);
  rng.discard(17);
  const auto dir = scratch("ckpt");
  Checkpoint::capture(m, mask.masks, -0.75, rng, 0x1234).save(dir / "c.bin");

  const Checkpoint ck = Checkpoint::load(dir / "c.bin");
  CHECK(ck.config_hash == 0x1234);
  CHECK(ck.lambda_raw == -0.75);
  CHECK(same_masks(ck.masks, mask.masks));
  std::mt19937_64 restored = ck.restore_rng();
  CHECK(restored() == rng());
  const MultiTaskModel back = ck.restore_model();
  const auto pa = m.parameters(), pb = back.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].id == pb[i].id);
    CHECK((pa[i].tensor.data().array() == pb[i].tensor.data().array()).all());
  }

  std::ofstream(dir / "bad.bin", std::ios::binary) << "NOPE1234";
  CHECK_THROWS_AS(Checkpoint::load(dir / "bad.bin"), std::runtime_error);
  {
    std::ifstream in(dir / "c.bin", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  }
  CHECK_THROWS_AS(Checkpoint::load(dir / "short.bin"), std::runtime_error);
  CHECK_THROWS_AS(Checkpoint::load(dir / "missing.bin"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("records round-trip through JSON") {
  RunRecord r = record("mtl", 2, 12.5, {{1, 0.3}, {2, 0.7}});
  r.final_metrics.compression_ratio = 1.5;
  r.wall_clock_seconds = 4.2;
  const RunRecord back = record_from_json(record_json(r));
  CHECK(back.label == r.label);
  CHECK(back.rows.size() == r.rows.size());
  CHECK(back.test_loss == r.test_loss);
  CHECK(*back.final_metrics.compression_ratio == 1.5);
  CHECK(back.wall_clock_seconds == 4.2);
  CHECK(record_json(r, false).find("wall_clock") == std::string::npos);
  CHECK(profile_csv(r).rfind(kProfileHeader, 0) == 0);
}

TEST_CASE("aggregation: sample std, single records, constant metrics") {
  CHECK(mean_std({5.0}).std == 0.0);
  CHECK(mean_std({2.0, 2.0, 2.0, 2.0, 2.0}).std == 0.0);
  const auto s = mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(s.mean == 2.5);
  CHECK(s.std == doctest::Approx(std::sqrt(5.0 / 3.0)));

  std::vector<RunRecord> five;
  for (std::uint64_t i = 0; i < 5; ++i) five.push_back(record("meta_sparsity", i, 25.0, {{1, 0.5}}));
  const Report rep = make_report(five);
  CHECK(rep.table_csv.rfind(kTableHeader, 0) == 0);
  CHECK(rep.table_csv.find("meta_sparsity,5,0.5,0,25,0,25,0") != std::string::npos);
}

TEST_CASE("profile chart spans the longest run") {
  std::vector<RunRecord> rs{record("a", 0, 10, {{1, 1.0}}, 7), record("b", 0, 20, {{1, 1.0}}, 42)};
  const Report rep = make_report(rs);
  CHECK(rep.x_max == 42);
  CHECK(rep.profile_svg.find("data-x-max=\"42\"") != std::string::npos);
  CHECK(rep.table_csv.find("\na,1,") != std::string::npos);
}

TEST_CASE("reports reject mixed task sets") {
  std::vector<RunRecord> rs{record("a", 0, 10, {{1, 1.0}}), record("b", 0, 10, {{1, 1.0}, {2, 1.0}})};
  CHECK_THROWS_AS(make_report(rs), std::invalid_argument);
  CHECK_THROWS_AS(make_report({}), std::invalid_argument);
}

TEST_CASE("records are collected recursively") {
  const auto dir = scratch("collect");
  fs::create_directories(dir / "x" / "seed-0");
  fs::create_directories(dir / "y" / "deep" / "seed-1");
  save_record(record("a", 0, 1, {{1, 1.0}}), dir / "x" / "seed-0" / "record.json");
  save_record(record("a", 1, 1, {{1, 1.0}}), dir / "y" / "deep" / "seed-1" / "record.json");
  CHECK(collect_records({dir}).size() == 2);
  fs::remove_all(dir);
}

namespace {

struct ScheduleFixture {
  std::vector<int> tasks{1, 2, 3, 4};
  Dataset data;
  MultiTaskModel model;
  ScheduleConfig config;

  explicit ScheduleFixture(std::uint64_t seed) : data(make_data(seed)), model(make_model(seed)) {
    config.train.max_epochs = 2;
    config.train.adam.lr_backbone = config.train.adam.lr_heads = 3e-3;
    config.train.seed = seed;
  }
  static Dataset make_data(std::uint64_t seed) {
    SynthConfig c;
    c.n_samples = 300;
    c.seed = seed;
    return generate(c);
  }
  MultiTaskModel make_model(std::uint64_t seed) const {
    ModelSpec spec;
    for (int id : tasks) spec.tasks.push_back({id, data.task(id).kind});
    std::mt19937_64 rng(seed);
    return MultiTaskModel::build(spec, rng);
  }
};

bool same_rows(const std::vector<EpochRow>& a, const std::vector<EpochRow>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].epoch != b[i].epoch || a[i].val_loss != b[i].val_loss || a[i].combined_loss != b[i].combined_loss) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("one-shot equals iterative with one step") {
  ScheduleFixture f(1);
  f.config.budget = 40.0;
  f.config.steps = 1;
  std::mt19937_64 r1(0), r2(0);
  const auto a = schedule_one_shot(f.model, f.tasks, f.data, f.config, r1);
  const auto b = schedule_iterative(f.model, f.tasks, f.data, f.config, r2);
  CHECK(same_masks(a.masks, b.masks));
  CHECK(same_rows(a.rows, b.rows));
}

TEST_CASE("budget 0 leaves the network dense") {
  ScheduleFixture f(2);
  f.config.budget = 0.0;
  std::mt19937_64 rng(0);
  const auto r = schedule_one_shot(f.model, f.tasks, f.data, f.config, rng);
  CHECK(r.achieved_percent == 0.0);
  CHECK(measure(r.model.governed()).parameter_sparsity_percent == 0.0);
}

TEST_CASE("iterative masks only grow and reach the budget") {
  ScheduleFixture f(3);
  f.config.budget = 50.0;
  f.config.steps = 3;
  f.config.train.max_epochs = 1;
  std::mt19937_64 rng(0);
  const auto r = schedule_iterative(f.model, f.tasks, f.data, f.config, rng);
  REQUIRE(r.step_percent.size() == 3);
  for (std::size_t i = 1; i < 3; ++i) CHECK(r.step_percent[i] >= r.step_percent[i - 1]);
  CHECK(r.achieved_percent >= 50.0);
  CHECK(r.achieved_percent < 50.0 + 100.0 / 24.0);
  for (std::size_t i = 1; i < r.rows.size(); ++i) CHECK(r.rows[i].epoch == r.rows[i - 1].epoch + 1);
}

TEST_CASE("meta-mask schedules reproduce the meta pattern exactly") {
  ScheduleFixture f(4);
  std::mt19937_64 mrng(9);
  const auto meta = build_mask(f.model.governed(), MaskStrategy::random_groups, 30.0, mrng);
  f.config.source = MaskSource::meta_mask;
  f.config.meta_mask = &meta.masks;
  f.config.steps = 2;
  f.config.prune_interval = 1;
  for (auto s : {Schedule::one_shot, Schedule::iterative, Schedule::progressive, Schedule::sparse_training}) {
    CAPTURE(to_string(s));
    std::mt19937_64 rng(0);
    const auto r = run_schedule(s, f.model, f.tasks, f.data, f.config, rng);
    CHECK(same_masks(r.masks, meta.masks));
    CHECK(r.achieved_percent == doctest::Approx(meta.achieved_percent));
  }
}

TEST_CASE("sparse training keeps constant sparsity; an all-active mask is dense training") {
  ScheduleFixture f(5);
  f.config.budget = 25.0;
  f.config.train.max_epochs = 3;
  std::mt19937_64 rng(0);
  const auto r = schedule_sparse_training(f.model, f.tasks, f.data, f.config, rng);
  for (const auto& row : r.rows) CHECK(row.parameter_sparsity == doctest::Approx(r.achieved_percent));

  f.config.budget = 0.0;
  std::mt19937_64 rng2(0);
  const auto dense_masked = schedule_sparse_training(f.model, f.tasks, f.data, f.config, rng2);
  MultiTaskModel plain = f.model.clone();
  const auto t = mtl_train(plain, f.tasks, f.data, f.config.train);
  CHECK(same_rows(dense_masked.rows, t.rows));
}

TEST_CASE("schedule arguments are checked") {
  ScheduleFixture f(6);
  std::mt19937_64 rng(0);
  f.config.budget = 100.0;
  CHECK_THROWS_AS(schedule_one_shot(f.model, f.tasks, f.data, f.config, rng), std::invalid_argument);
  f.config.budget = 10.0;
  f.config.steps = 0;
  CHECK_THROWS_AS(schedule_iterative(f.model, f.tasks, f.data, f.config, rng), std::invalid_argument);
  f.config.steps = 1;
  f.config.source = MaskSource::meta_mask;
  CHECK_THROWS_AS(schedule_one_shot(f.model, f.tasks, f.data, f.config, rng), std::invalid_argument);
}
