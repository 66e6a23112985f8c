#include "metasparse/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace metasparse {

namespace {

template <class E>
struct Names {
  E value;
  const char* name;
};

constexpr Names<Mode> kModes[] = {{Mode::single_task, "single_task"},
                                  {Mode::mtl, "mtl"},
                                  {Mode::mtl_fixed_sparsity, "mtl_fixed_sparsity"},
                                  {Mode::meta_baseline, "meta_baseline"},
                                  {Mode::meta_sparsity, "meta_sparsity"},
                                  {Mode::baseline_schedule, "baseline_schedule"}};
constexpr Names<Schedule> kSchedules[] = {{Schedule::one_shot, "one_shot"},
                                          {Schedule::iterative, "iterative"},
                                          {Schedule::progressive, "progressive"},
                                          {Schedule::sparse_training, "sparse_training"}};
constexpr Names<MaskSource> kSources[] = {{MaskSource::magnitude_groups, "magnitude_groups"},
                                          {MaskSource::random_groups, "random_groups"},
                                          {MaskSource::meta_mask, "meta_mask"}};
constexpr Names<SparsityMode> kSparsity[] = {{SparsityMode::structured, "structured"},
                                             {SparsityMode::unstructured, "unstructured"}};

template <class E, std::size_t N>
const char* name_of(const Names<E> (&table)[N], E value) {
  for (const auto& n : table) {
    if (n.value == value) return n.name;
  }
  return "?";
}

template <class E, std::size_t N>
E value_of(const Names<E> (&table)[N], const std::string& name, const char* what) {
  for (const auto& n : table) {
    if (name == n.name) return n.value;
  }
  std::string choices;
  for (const auto& n : table) choices += std::string(choices.empty() ? "" : ", ") + n.name;
  throw ConfigError(std::string("unknown ") + what + " '" + name + "' (expected one of: " + choices + ")");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("invalid value '" + text + "' for " + key);
  return v;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) seeds.push_back(parse_number<std::uint64_t>("seeds", trim(item)));
  if (seeds.empty()) throw ConfigError("seeds: empty list");
  return seeds;
}

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) out += (i ? "," : "") + std::to_string(seeds[i]);
  return out;
}

struct Key {
  std::string name;
  std::function<bool(const RunConfig&)> used;  // null = every mode
  std::function<bool(const RunConfig&)> present;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string to_text(double v) { return format_double(v); }
std::string to_text(int v) { return std::to_string(v); }
std::string to_text(Index v) { return std::to_string(v); }
std::string to_text(std::uint64_t v) { return std::to_string(v); }
std::string to_text(Schedule v) { return to_string(v); }
std::string to_text(MaskSource v) { return to_string(v); }
std::string to_text(const std::filesystem::path& v) { return v.string(); }

template <class T>
T from_text(const std::string& key, const std::string& text) {
  if constexpr (std::is_same_v<T, Schedule>) {
    return schedule_from_string(text);
  } else if constexpr (std::is_same_v<T, MaskSource>) {
    return mask_source_from_string(text);
  } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
    if (text.empty()) throw ConfigError("empty path for " + key);
    return std::filesystem::path(text);
  } else {
    return parse_number<T>(key, text);
  }
}

template <class T>
Key plain(std::string name, T RunConfig::*field) {
  return {name, nullptr, [](const RunConfig&) { return true; },
          [field](const RunConfig& c) { return to_text(c.*field); },
          [field, name](RunConfig& c, const std::string& v) { c.*field = from_text<T>(name, v); }};
}

template <class T>
Key optional(std::string name, std::optional<T> RunConfig::*field, std::function<bool(const RunConfig&)> used) {
  return {name, std::move(used), [field](const RunConfig& c) { return (c.*field).has_value(); },
          [field](const RunConfig& c) { return to_text(*(c.*field)); },
          [field, name](RunConfig& c, const std::string& v) { c.*field = from_text<T>(name, v); }};
}

bool schedule_is(const RunConfig& c, std::initializer_list<Schedule> s) {
  if (c.mode != Mode::baseline_schedule || !c.schedule) return false;
  for (Schedule x : s) {
    if (*c.schedule == x) return true;
  }
  return false;
}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back({"mode", nullptr, [](const RunConfig&) { return true; },
                 [](const RunConfig& c) { return std::string(to_string(c.mode)); },
                 [](RunConfig& c, const std::string& v) { c.mode = mode_from_string(v); }});
    k.push_back({"sparsity_mode", nullptr, [](const RunConfig&) { return true; },
                 [](const RunConfig& c) { return std::string(to_string(c.sparsity_mode)); },
                 [](RunConfig& c, const std::string& v) { c.sparsity_mode = sparsity_mode_from_string(v); }});
    k.push_back({"seeds", nullptr, [](const RunConfig&) { return true; },
                 [](const RunConfig& c) { return join_seeds(c.seeds); },
                 [](RunConfig& c, const std::string& v) { c.seeds = parse_seeds(v); }});
    k.push_back(plain("data_seed", &RunConfig::data_seed));
    k.push_back(plain("n_samples", &RunConfig::n_samples));
    k.push_back(plain("channel_budget", &RunConfig::channel_budget));
    k.push_back(plain("overlap", &RunConfig::overlap));
    k.push_back(plain("lr_backbone", &RunConfig::lr_backbone));
    k.push_back(plain("lr_heads", &RunConfig::lr_heads));
    k.push_back(plain("beta1", &RunConfig::beta1));
    k.push_back(plain("beta2", &RunConfig::beta2));
    k.push_back(plain("eps", &RunConfig::eps));
    k.push_back(plain("batch_size", &RunConfig::batch_size));
    k.push_back(plain("max_epochs", &RunConfig::max_epochs));
    k.push_back(plain("patience", &RunConfig::patience));

    const auto single = [](const RunConfig& c) { return c.mode == Mode::single_task; };
    const auto fixed = [](const RunConfig& c) {
      return c.mode == Mode::single_task || c.mode == Mode::mtl_fixed_sparsity;
    };
    const auto meta = [](const RunConfig& c) { return is_meta(c.mode); };
    const auto sparse_meta = [](const RunConfig& c) { return c.mode == Mode::meta_sparsity; };
    const auto sched = [](const RunConfig& c) { return c.mode == Mode::baseline_schedule; };
    k.push_back(optional("task", &RunConfig::task, single));
    k.push_back(optional("lambda", &RunConfig::lambda, fixed));
    k.push_back(optional("meta_max_epochs", &RunConfig::meta_max_epochs, meta));
    k.push_back(optional("inner_steps", &RunConfig::inner_steps, meta));
    k.push_back(optional("alpha_in", &RunConfig::alpha_in, meta));
    k.push_back(optional("meta_lr_backbone", &RunConfig::meta_lr_backbone, meta));
    k.push_back(optional("meta_lr_heads", &RunConfig::meta_lr_heads, meta));
    k.push_back(optional("sparsity_patience", &RunConfig::sparsity_patience, sparse_meta));
    k.push_back(optional("penalty_weight", &RunConfig::penalty_weight, sparse_meta));
    k.push_back(optional("regrow_prob", &RunConfig::regrow_prob, sparse_meta));
    k.push_back(optional("schedule", &RunConfig::schedule, sched));
    k.push_back(optional("mask_strategy", &RunConfig::mask_strategy, sched));
    k.push_back(optional("budget", &RunConfig::budget, [](const RunConfig& c) {
      return c.mode == Mode::baseline_schedule && c.mask_strategy != MaskSource::meta_mask;
    }));
    k.push_back(optional("steps", &RunConfig::steps, [](const RunConfig& c) {
      return schedule_is(c, {Schedule::iterative, Schedule::progressive});
    }));
    k.push_back(optional("prune_interval", &RunConfig::prune_interval,
                         [](const RunConfig& c) { return schedule_is(c, {Schedule::progressive}); }));
    k.push_back(optional("meta_checkpoint", &RunConfig::meta_checkpoint, [](const RunConfig& c) {
      return c.mode == Mode::baseline_schedule && c.mask_strategy == MaskSource::meta_mask;
    }));
    return k;
  }();
  return table;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

const char* to_string(Mode mode) { return name_of(kModes, mode); }
const char* to_string(Schedule schedule) { return name_of(kSchedules, schedule); }
const char* to_string(MaskSource source) { return name_of(kSources, source); }
const char* to_string(SparsityMode mode) { return name_of(kSparsity, mode); }
Mode mode_from_string(const std::string& name) { return value_of(kModes, name, "mode"); }
Schedule schedule_from_string(const std::string& name) { return value_of(kSchedules, name, "schedule"); }
MaskSource mask_source_from_string(const std::string& name) { return value_of(kSources, name, "mask strategy"); }
SparsityMode sparsity_mode_from_string(const std::string& name) {
  return value_of(kSparsity, name, "sparsity mode");
}

bool is_meta(Mode mode) { return mode == Mode::meta_baseline || mode == Mode::meta_sparsity; }

void RunConfig::fill_defaults() {
  if (mode == Mode::single_task) {
    if (!task) task = 1;
    if (!lambda) lambda = 0.0;
  }
  if (is_meta(mode)) {
    if (!meta_max_epochs) meta_max_epochs = 300;
    if (!inner_steps) inner_steps = 1;
    if (!alpha_in) alpha_in = 1e-4;
    if (!meta_lr_backbone) meta_lr_backbone = lr_backbone;
    if (!meta_lr_heads) meta_lr_heads = lr_heads;
  }
  if (mode == Mode::meta_sparsity) {
    if (!sparsity_patience) sparsity_patience = 30;
    if (!penalty_weight) penalty_weight = 1.0;
    if (!regrow_prob) regrow_prob = 0.0;
  }
  if (schedule_is(*this, {Schedule::iterative, Schedule::progressive}) && !steps) steps = 3;
  if (schedule_is(*this, {Schedule::progressive}) && !prune_interval) prune_interval = 5;
}

void RunConfig::validate() const {
  for (const auto& k : keys()) {
    if (!k.used) continue;
    const bool used = k.used(*this), present = k.present(*this);
    if (!used && present) throw ConfigError(k.name + " is not used by mode " + to_string(mode));
    if (used && !present) throw ConfigError(k.name + " is required by mode " + to_string(mode));
  }
  require(!seeds.empty(), "seeds: empty list");
  require(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(), "seeds: duplicate seed");
  require(n_samples >= 100, "n_samples must be at least 100");
  require(channel_budget >= 1 && channel_budget < 8, "channel_budget must be in [1, 8)");
  require(overlap >= 0.0 && overlap <= 1.0, "overlap must be in [0, 1]");
  require(lr_backbone > 0.0 && lr_heads > 0.0, "learning rates must be positive");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must be in [0, 1)");
  require(eps > 0.0, "eps must be positive");
  require(batch_size >= 1, "batch_size must be positive");
  require(max_epochs >= 1, "max_epochs must be positive");
  require(patience >= 1, "patience must be positive");
  if (task) require(*task >= 1 && *task <= 4, "task must be one of 1..4");
  if (lambda) require(*lambda >= 0.0, "lambda must be non-negative");
  if (mode == Mode::mtl_fixed_sparsity) require(*lambda > 0.0, "mtl_fixed_sparsity needs lambda > 0");
  if (meta_max_epochs) require(*meta_max_epochs >= 1, "meta_max_epochs must be positive");
  if (inner_steps) require(*inner_steps >= 1, "inner_steps must be positive");
  if (alpha_in) require(*alpha_in > 0.0, "alpha_in must be positive");
  if (meta_lr_backbone) require(*meta_lr_backbone > 0.0, "meta_lr_backbone must be positive");
  if (meta_lr_heads) require(*meta_lr_heads > 0.0, "meta_lr_heads must be positive");
  if (sparsity_patience) require(*sparsity_patience >= 1, "sparsity_patience must be positive");
  if (penalty_weight) require(*penalty_weight >= 0.0, "penalty_weight must be non-negative");
  if (regrow_prob) require(*regrow_prob >= 0.0 && *regrow_prob < 1.0, "regrow_prob must be in [0, 1)");
  if (budget) require(*budget >= 0.0 && *budget < 100.0, "budget must be in [0, 100)");
  if (steps) require(*steps >= 1, "steps must be positive");
  if (prune_interval) require(*prune_interval >= 1, "prune_interval must be positive");
}

SynthConfig RunConfig::synth(std::uint64_t seed) const {
  SynthConfig s;
  s.n_samples = n_samples;
  s.channel_budget = channel_budget;
  s.overlap = overlap;
  s.seed = data_seed + seed;
  return s;
}

TrainConfig RunConfig::train(std::uint64_t seed) const {
  TrainConfig t;
  t.adam = {lr_backbone, lr_heads, beta1, beta2, eps};
  t.batch_size = batch_size;
  t.max_epochs = max_epochs;
  t.patience = patience;
  t.lambda = lambda.value_or(0.0);
  t.seed = seed;
  return t;
}

MetaConfig RunConfig::meta(std::uint64_t seed) const {
  MetaConfig m;
  m.max_epochs = meta_max_epochs.value_or(300);
  m.batch_size = batch_size;
  m.inner_steps = inner_steps.value_or(1);
  m.alpha_in = alpha_in.value_or(1e-4);
  m.outer = {meta_lr_backbone.value_or(lr_backbone), meta_lr_heads.value_or(lr_heads), beta1, beta2, eps};
  m.patience = patience;
  m.sparsity_patience = sparsity_patience.value_or(30);
  m.penalty_weight = penalty_weight.value_or(1.0);
  m.regrow_prob = regrow_prob.value_or(0.0);
  m.learn_sparsity = mode == Mode::meta_sparsity;
  m.seed = seed;
  return m;
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& k : keys()) {
    if (k.present(*this)) out += k.name + " = " + k.get(*this) + "\n";
  }
  return out;
}

std::uint64_t RunConfig::hash() const {
  RunConfig c = *this;
  c.seeds = {0};
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : c.serialize()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string line;
  int number = 0;
  while (std::getline(ss, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(number) + ": empty key");
    if (!out.emplace(key, value).second) throw ConfigError("duplicate key " + key);
  }
  return out;
}

void apply_values(RunConfig& config, const std::map<std::string, std::string>& values) {
  // mode and mask_strategy first so later keys see the final mode.
  for (const char* first : {"mode", "schedule", "mask_strategy"}) {
    if (auto it = values.find(first); it != values.end()) {
      for (const auto& k : keys()) {
        if (k.name == first) k.set(config, it->second);
      }
    }
  }
  for (const auto& [name, value] : values) {
    bool known = false;
    for (const auto& k : keys()) {
      if (k.name == name) {
        k.set(config, value);
        known = true;
      }
    }
    if (!known) throw ConfigError("unknown key " + name);
  }
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  apply_values(c, parse_key_values(text));
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string hex_hash(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

}  // namespace metasparse
