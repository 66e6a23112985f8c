#include "metasparse/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace metasparse {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

void validate(const SynthConfig& c) {
  auto fail = [](const std::string& why) { throw std::invalid_argument("synth: " + why); };
  if (c.n_tasks < 1) fail("need at least one task");
  if (c.n_classification < 0 || c.n_classification > c.n_tasks) fail("classification count out of range");
  if (c.channels < 2 || c.height < 1 || c.width < 1) fail("image shape too small");
  if (c.channel_budget < 1) fail("channel budget must be positive");
  if (c.channel_budget >= c.channels) fail("channel budget must leave at least one irrelevant channel");
  if (c.overlap < 0.0 || c.overlap > 1.0) fail("overlap must lie in [0, 1]");
  if (c.label_noise < 0.0 || c.pixel_noise < 0.0) fail("noise levels must be non-negative");
  if (c.split_fractions.size() != 5) fail("need five split fractions");
  double total = 0.0;
  for (double f : c.split_fractions) {
    if (f <= 0.0) fail("split fractions must be positive");
    total += f;
  }
  if (total > 1.0 + 1e-9) fail("split fractions sum above 1");
  for (double f : c.split_fractions) {
    if (static_cast<Index>(std::floor(f * double(c.n_samples))) < 1) fail("a split would be empty");
  }
}

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("dataset: truncated record file");
  return v;
}

}  // namespace

double TaskSpec::statistic(const double* sample, Index height, Index width) const {
  const Index pixels = height * width;
  double s = 0.0;
  for (std::size_t i = 0; i < relevant_channels.size(); ++i) {
    const double* ch = sample + relevant_channels[i] * pixels;
    double mean = 0.0;
    for (Index p = 0; p < pixels; ++p) mean += ch[p];
    s += weights[static_cast<Index>(i)] * mean / double(pixels);
  }
  return s;
}

double TaskSpec::label(const double* sample, Index height, Index width, double noise_draw) const {
  const double y = statistic(sample, height, width) + noise_std * noise_draw;
  if (kind == TaskKind::binary_classification) return y > 0.0 ? 1.0 : 0.0;
  return y;
}

Dataset generate(const SynthConfig& config) {
  validate(config);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Dataset d;
  d.config_ = config;

  std::vector<Index> perm(static_cast<std::size_t>(config.channels));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Index> planted(perm.begin(), perm.begin() + config.channel_budget);

  const Index others = config.channel_budget - 1;
  const Index extra = static_cast<Index>(std::lround(config.overlap * double(others)));
  for (int t = 0; t < config.n_tasks; ++t) {
    TaskSpec spec;
    spec.task_id = t + 1;
    spec.kind = t < config.n_classification ? TaskKind::binary_classification : TaskKind::regression;
    const std::size_t home = static_cast<std::size_t>(t) % planted.size();
    std::vector<Index> rest;
    for (std::size_t i = 0; i < planted.size(); ++i) {
      if (i != home) rest.push_back(planted[i]);
    }
    std::shuffle(rest.begin(), rest.end(), rng);
    spec.relevant_channels.push_back(planted[home]);
    spec.relevant_channels.insert(spec.relevant_channels.end(), rest.begin(), rest.begin() + extra);
    std::sort(spec.relevant_channels.begin(), spec.relevant_channels.end());
    spec.weights.resize(static_cast<Index>(spec.relevant_channels.size()));
    for (Index i = 0; i < spec.weights.size(); ++i) {
      double w = normal(rng);
      spec.weights[i] = std::copysign(0.5 + std::abs(w), w);
    }
    spec.weights /= spec.weights.norm();
    spec.noise_std = config.label_noise;
    d.tasks_.push_back(std::move(spec));
  }
  // Every planted channel must be read by some task, otherwise it is irrelevant after all.
  for (Index c : planted) {
    bool used = false;
    for (const auto& t : d.tasks_) used = used || std::count(t.relevant_channels.begin(), t.relevant_channels.end(), c);
    if (!used) {
      throw std::invalid_argument("synth: channel budget exceeds what the tasks can read at this overlap");
    }
  }

  const Index n = config.n_samples, pixels = config.height * config.width;
  d.inputs_.resize(n, config.channels * pixels);
  for (Index s = 0; s < n; ++s) {
    for (Index c = 0; c < config.channels; ++c) {
      const double mu = normal(rng);
      for (Index p = 0; p < pixels; ++p) d.inputs_(s, c * pixels + p) = mu + config.pixel_noise * normal(rng);
    }
  }
  d.noise_.resize(n, config.n_tasks);
  for (Index s = 0; s < n; ++s) {
    for (int t = 0; t < config.n_tasks; ++t) d.noise_(s, t) = normal(rng);
  }
  d.relabel();

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Index>* sets[5] = {&d.splits_.train, &d.splits_.val, &d.splits_.test, &d.splits_.support,
                                 &d.splits_.query};
  std::size_t pos = 0;
  for (int k = 0; k < 5; ++k) {
    const auto count = static_cast<std::size_t>(std::floor(config.split_fractions[k] * double(n)));
    sets[k]->assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                    order.begin() + static_cast<std::ptrdiff_t>(pos + count));
    pos += count;
  }
  return d;
}

void Dataset::relabel() {
  labels_.resize(inputs_.rows(), static_cast<Index>(tasks_.size()));
  for (Index s = 0; s < inputs_.rows(); ++s) {
    for (std::size_t t = 0; t < tasks_.size(); ++t) {
      const auto ti = static_cast<Index>(t);
      labels_(s, ti) = tasks_[t].label(&inputs_(s, 0), config_.height, config_.width, noise_(s, ti));
    }
  }
}

Index Dataset::column(int task_id) const {
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    if (tasks_[t].task_id == task_id) return static_cast<Index>(t);
  }
  throw std::invalid_argument("dataset: unknown task id " + std::to_string(task_id));
}

const TaskSpec& Dataset::task(int task_id) const { return tasks_[static_cast<std::size_t>(column(task_id))]; }

std::vector<Index> Dataset::relevant_channels() const {
  std::vector<Index> out;
  for (const auto& t : tasks_) out.insert(out.end(), t.relevant_channels.begin(), t.relevant_channels.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<Index> Dataset::irrelevant_channels() const {
  const auto rel = relevant_channels();
  std::vector<Index> out;
  for (Index c = 0; c < config_.channels; ++c) {
    if (!std::binary_search(rel.begin(), rel.end(), c)) out.push_back(c);
  }
  return out;
}

Tensor Dataset::batch_inputs(std::span<const Index> ids) const {
  const Index w = sample_width();
  Vector data(static_cast<Index>(ids.size()) * w);
  for (std::size_t i = 0; i < ids.size(); ++i) data.segment(static_cast<Index>(i) * w, w) = inputs_.row(ids[i]).transpose();
  return Tensor::from({static_cast<Index>(ids.size()), config_.channels, config_.height, config_.width}, std::move(data));
}

Tensor Dataset::batch_labels(int task_id, std::span<const Index> ids) const {
  const Index col = column(task_id);
  Vector data(static_cast<Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) data[static_cast<Index>(i)] = labels_(ids[i], col);
  return Tensor::from({static_cast<Index>(ids.size()), 1}, std::move(data));
}

void Dataset::save(const std::filesystem::path& records, const std::filesystem::path& manifest) const {
  std::ofstream out(records, std::ios::binary);
  if (!out) throw std::runtime_error("dataset: cannot write " + records.string());
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(size()));
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(config_.channels));
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(config_.height));
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(config_.width));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tasks_.size()));
  for (Index s = 0; s < size(); ++s) {
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(s));
    out.write(reinterpret_cast<const char*>(&inputs_(s, 0)), static_cast<std::streamsize>(sizeof(double) * sample_width()));
    for (Index t = 0; t < labels_.cols(); ++t) write_pod(out, labels_(s, t));
    for (Index t = 0; t < noise_.cols(); ++t) write_pod(out, noise_(s, t));
  }

  nlohmann::json j;
  j["format"] = "metasparse-dataset";
  j["version"] = kVersion;
  j["seed"] = config_.seed;
  j["samples"] = size();
  j["image"] = {config_.channels, config_.height, config_.width};
  j["channel_budget"] = config_.channel_budget;
  j["overlap"] = config_.overlap;
  j["label_noise"] = config_.label_noise;
  j["pixel_noise"] = config_.pixel_noise;
  j["split_fractions"] = config_.split_fractions;
  j["n_classification"] = config_.n_classification;
  for (const auto& t : tasks_) {
    j["tasks"].push_back({{"task_id", t.task_id},
                          {"kind", to_string(t.kind)},
                          {"relevant_channels", t.relevant_channels},
                          {"weights", std::vector<double>(t.weights.data(), t.weights.data() + t.weights.size())},
                          {"noise_std", t.noise_std}});
  }
  j["splits"] = {{"train", splits_.train}, {"val", splits_.val}, {"test", splits_.test},
                 {"support", splits_.support}, {"query", splits_.query}};
  std::ofstream(manifest) << j.dump(2) << '\n';
}

Dataset Dataset::load(const std::filesystem::path& records, const std::filesystem::path& manifest) {
  std::ifstream mf(manifest);
  if (!mf) throw std::runtime_error("dataset: cannot read " + manifest.string());
  const nlohmann::json j = nlohmann::json::parse(mf);
  Dataset d;
  d.config_.seed = j.at("seed").get<std::uint64_t>();
  d.config_.channels = j.at("image")[0].get<Index>();
  d.config_.height = j.at("image")[1].get<Index>();
  d.config_.width = j.at("image")[2].get<Index>();
  d.config_.channel_budget = j.at("channel_budget").get<Index>();
  d.config_.overlap = j.at("overlap").get<double>();
  d.config_.label_noise = j.at("label_noise").get<double>();
  d.config_.pixel_noise = j.at("pixel_noise").get<double>();
  d.config_.split_fractions = j.at("split_fractions").get<std::vector<double>>();
  d.config_.n_classification = j.at("n_classification").get<int>();
  for (const auto& t : j.at("tasks")) {
    TaskSpec spec;
    spec.task_id = t.at("task_id").get<int>();
    spec.kind = task_kind_from_string(t.at("kind").get<std::string>());
    spec.relevant_channels = t.at("relevant_channels").get<std::vector<Index>>();
    const auto w = t.at("weights").get<std::vector<double>>();
    spec.weights = Eigen::Map<const Vector>(w.data(), static_cast<Index>(w.size()));
    spec.noise_std = t.at("noise_std").get<double>();
    d.tasks_.push_back(std::move(spec));
  }
  d.config_.n_tasks = static_cast<int>(d.tasks_.size());
  const auto& sp = j.at("splits");
  d.splits_.train = sp.at("train").get<std::vector<Index>>();
  d.splits_.val = sp.at("val").get<std::vector<Index>>();
  d.splits_.test = sp.at("test").get<std::vector<Index>>();
  d.splits_.support = sp.at("support").get<std::vector<Index>>();
  d.splits_.query = sp.at("query").get<std::vector<Index>>();

  std::ifstream in(records, std::ios::binary);
  if (!in) throw std::runtime_error("dataset: cannot read " + records.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || !std::equal(magic, magic + 4, kMagic)) throw std::runtime_error("dataset: bad magic in " + records.string());
  if (read_pod<std::uint32_t>(in) != kVersion) throw std::runtime_error("dataset: unsupported record version");
  const auto n = static_cast<Index>(read_pod<std::uint64_t>(in));
  const auto c = static_cast<Index>(read_pod<std::uint64_t>(in));
  const auto h = static_cast<Index>(read_pod<std::uint64_t>(in));
  const auto w = static_cast<Index>(read_pod<std::uint64_t>(in));
  const auto tasks = static_cast<Index>(read_pod<std::uint32_t>(in));
  if (c != d.config_.channels || h != d.config_.height || w != d.config_.width ||
      tasks != static_cast<Index>(d.tasks_.size())) {
    throw std::runtime_error("dataset: record header disagrees with manifest");
  }
  d.config_.n_samples = n;
  d.inputs_.resize(n, c * h * w);
  d.labels_.resize(n, tasks);
  d.noise_.resize(n, tasks);
  for (Index s = 0; s < n; ++s) {
    if (static_cast<Index>(read_pod<std::uint64_t>(in)) != s) throw std::runtime_error("dataset: records out of order");
    in.read(reinterpret_cast<char*>(&d.inputs_(s, 0)), static_cast<std::streamsize>(sizeof(double) * c * h * w));
    for (Index t = 0; t < tasks; ++t) d.labels_(s, t) = read_pod<double>(in);
    for (Index t = 0; t < tasks; ++t) d.noise_(s, t) = read_pod<double>(in);
  }
  return d;
}

}  // namespace metasparse
