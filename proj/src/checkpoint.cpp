#include "metasparse/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace metasparse {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'C', 'K'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <class T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}
  template <class T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in_) throw std::runtime_error("checkpoint: truncated file");
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 26)) throw std::runtime_error("checkpoint: corrupt string length");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) throw std::runtime_error("checkpoint: truncated file");
    return s;
  }

 private:
  std::istream& in_;
};

}  // namespace

Checkpoint Checkpoint::capture(const MultiTaskModel& model, const MaskSet& masks, double lambda_raw,
                               const std::mt19937_64& rng, std::uint64_t config_hash) {
  Checkpoint c;
  c.config_hash = config_hash;
  c.spec = model.spec();
  for (const auto& p : model.parameters()) c.parameters.push_back({p.id, p.tensor.shape(), p.tensor.data()});
  c.masks = masks;
  c.lambda_raw = lambda_raw;
  std::ostringstream ss;
  ss << rng;
  c.rng_state = ss.str();
  return c;
}

MultiTaskModel Checkpoint::restore_model() const {
  std::mt19937_64 scratch(0);
  MultiTaskModel model = MultiTaskModel::build(spec, scratch);
  std::map<std::string, const TensorRecord*> by_id;
  for (const auto& r : parameters) by_id[r.id] = &r;
  const auto params = model.parameters();
  if (params.size() != parameters.size()) throw std::runtime_error("checkpoint: parameter count does not match model");
  for (const auto& p : params) {
    auto it = by_id.find(p.id);
    if (it == by_id.end()) throw std::runtime_error("checkpoint: missing parameter " + p.id);
    if (it->second->shape != p.tensor.shape()) throw std::runtime_error("checkpoint: shape mismatch for " + p.id);
    Tensor t = p.tensor;
    t.mutable_data() = it->second->data;
  }
  return model;
}

std::mt19937_64 Checkpoint::restore_rng() const {
  std::mt19937_64 rng;
  std::istringstream ss(rng_state);
  ss >> rng;
  if (!ss) throw std::runtime_error("checkpoint: bad rng state");
  return rng;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
  Writer w(out);
  out.write(kMagic, 4);
  w.pod(kVersion);
  w.pod(config_hash);

  const auto& b = spec.backbone;
  w.pod(static_cast<std::uint32_t>(b.channels.size()));
  for (Index c : b.channels) w.pod(static_cast<std::int64_t>(c));
  w.pod(static_cast<std::int64_t>(b.kernel));
  w.pod(static_cast<std::uint8_t>(b.residual));
  w.pod(static_cast<std::int64_t>(b.image_height));
  w.pod(static_cast<std::int64_t>(b.image_width));
  w.pod(static_cast<std::uint8_t>(b.sparsity == SparsityMode::unstructured));
  w.pod(static_cast<std::int64_t>(spec.head_width));
  w.pod(static_cast<std::uint32_t>(spec.tasks.size()));
  for (const auto& [id, kind] : spec.tasks) {
    w.pod(static_cast<std::int32_t>(id));
    w.pod(static_cast<std::uint8_t>(kind == TaskKind::binary_classification));
  }

  w.pod(static_cast<std::uint32_t>(parameters.size()));
  for (const auto& r : parameters) {
    w.str(r.id);
    w.pod(static_cast<std::uint32_t>(r.shape.size()));
    for (Index d : r.shape) w.pod(static_cast<std::int64_t>(d));
    w.pod(static_cast<std::uint64_t>(r.data.size()));
    out.write(reinterpret_cast<const char*>(r.data.data()), static_cast<std::streamsize>(r.data.size() * sizeof(double)));
  }

  w.pod(static_cast<std::uint32_t>(masks.size()));
  for (const auto& [id, mask] : masks) {
    w.str(id);
    w.pod(static_cast<std::uint64_t>(mask.size()));
    std::vector<std::uint8_t> bits((static_cast<std::size_t>(mask.size()) + 7) / 8, 0);
    for (Index i = 0; i < mask.size(); ++i) {
      if (mask[i]) bits[static_cast<std::size_t>(i / 8)] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    out.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  }

  w.pod(lambda_raw);
  w.str(rng_state);
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
  Reader r(in);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("checkpoint: not a checkpoint file");
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint c;
  c.config_hash = r.pod<std::uint64_t>();
  auto& b = c.spec.backbone;
  b.channels.resize(r.pod<std::uint32_t>());
  for (Index& ch : b.channels) ch = r.pod<std::int64_t>();
  b.kernel = r.pod<std::int64_t>();
  b.residual = r.pod<std::uint8_t>() != 0;
  b.image_height = r.pod<std::int64_t>();
  b.image_width = r.pod<std::int64_t>();
  b.sparsity = r.pod<std::uint8_t>() ? SparsityMode::unstructured : SparsityMode::structured;
  c.spec.head_width = r.pod<std::int64_t>();
  const auto n_tasks = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tasks; ++i) {
    const int id = r.pod<std::int32_t>();
    const bool cls = r.pod<std::uint8_t>() != 0;
    c.spec.tasks.push_back({id, cls ? TaskKind::binary_classification : TaskKind::regression});
  }

  const auto n_params = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_params; ++i) {
    TensorRecord t;
    t.id = r.str();
    t.shape.resize(r.pod<std::uint32_t>());
    for (Index& d : t.shape) d = r.pod<std::int64_t>();
    const auto n = r.pod<std::uint64_t>();
    if (n != static_cast<std::uint64_t>(numel(t.shape))) throw std::runtime_error("checkpoint: record size mismatch");
    t.data.resize(static_cast<Index>(n));
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    c.parameters.push_back(std::move(t));
  }

  const auto n_masks = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_masks; ++i) {
    const std::string id = r.str();
    const auto n = r.pod<std::uint64_t>();
    std::vector<std::uint8_t> bits((n + 7) / 8);
    in.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    MaskArray mask(static_cast<Index>(n));
    for (Index j = 0; j < mask.size(); ++j) mask[j] = (bits[static_cast<std::size_t>(j / 8)] >> (j % 8)) & 1u;
    c.masks.emplace(id, std::move(mask));
  }

  c.lambda_raw = r.pod<double>();
  c.rng_state = r.str();
  return c;
}

}  // namespace metasparse
