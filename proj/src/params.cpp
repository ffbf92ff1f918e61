#include "eviscrib/params.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "eviscrib/errors.hpp"

namespace eviscrib {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'E', 'S', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw IoError("truncated checkpoint: " + path.string());
  return v;
}
}  // namespace

Var ParameterSet::add(const std::string& name, Tensor init, bool trainable) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  Var v(std::move(init), trainable);
  index_.emplace(name, entries_.size());
  entries_.push_back({name, v, trainable});
  return v;
}

Var ParameterSet::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
  ++accesses_;
  return entries_[it->second].var;
}

std::size_t ParameterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.var.value().size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

ParameterSet ParameterSet::clone() const {
  ParameterSet out;
  for (const auto& e : entries_) out.add(e.name, e.var.value(), e.trainable);
  return out;
}

Tensor kaiming_uniform(Shape shape, int fan_in, Rng& rng, double gain) {
  Tensor t(std::move(shape));
  const double bound = gain * std::sqrt(6.0 / std::max(fan_in, 1));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(os, e.trainable ? 1 : 0);
    const Tensor& t = e.var.value();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
    for (int d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : t.values()) put<float>(os, static_cast<float>(v));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("not a checkpoint file: " + path.string());
  const auto count = get<std::uint32_t>(is, path);
  ParameterSet out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is, path);
    if (len > 4096) throw IoError("corrupt checkpoint (name length): " + path.string());
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("truncated checkpoint: " + path.string());
    const bool trainable = get<std::uint8_t>(is, path) != 0;
    const auto ndim = get<std::uint32_t>(is, path);
    if (ndim > 8) throw IoError("corrupt checkpoint (rank): " + path.string());
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int>(get<std::uint32_t>(is, path));
    Tensor t(shape);
    for (auto& v : t.values()) v = get<float>(is, path);
    out.add(name, std::move(t), trainable);
  }
  return out;
}

void load_checkpoint_into(ParameterSet& params, const std::filesystem::path& path) {
  ParameterSet loaded = load_checkpoint(path);
  if (loaded.size() != params.size())
    throw ConfigError("checkpoint " + path.string() + " has " + std::to_string(loaded.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  for (const auto& e : params.entries()) {
    if (!loaded.contains(e.name)) throw ConfigError("checkpoint " + path.string() + " lacks " + e.name);
    const Tensor& src = loaded.at(e.name).value();
    Var dst = e.var;
    if (src.shape() != dst.value().shape())
      throw ConfigError("checkpoint " + path.string() + ": shape mismatch for " + e.name + " " +
                        shape_str(src.shape()) + " vs " + shape_str(dst.value().shape()));
    dst.mutable_value() = src;
  }
  params.reset_access_count();
}

}  // namespace eviscrib
