#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "eviscrib/autograd.hpp"

namespace eviscrib {

using Rng = std::mt19937_64;

/// Ordered collection of named tensors: trainable parameters plus
/// non-trainable buffers (normalization statistics). Lookups are counted so
/// callers can check which parameter sets a code path touched.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Var var;
    bool trainable = true;
  };

  Var add(const std::string& name, Tensor init, bool trainable = true);
  Var at(std::string_view name) const;
  bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;
  std::size_t access_count() const { return accesses_; }
  void reset_access_count() { accesses_ = 0; }
  void zero_grad();
  /// Deep copy: fresh nodes with the same values.
  ParameterSet clone() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  mutable std::size_t accesses_ = 0;
};

/// Kaiming-uniform style fill with bound sqrt(6 / fan_in) * gain.
Tensor kaiming_uniform(Shape shape, int fan_in, Rng& rng, double gain = 1.0);

/// Binary checkpoint, little-endian:
///   "ESCKPT01" | u32 count | count x { u32 name_len | name | u8 trainable |
///   u32 ndim | ndim x u32 dim | prod(dim) x f32 row-major }
void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_checkpoint(const std::filesystem::path& path);
/// Copies checkpoint values into `params`; names and shapes must match exactly.
void load_checkpoint_into(ParameterSet& params, const std::filesystem::path& path);

}  // namespace eviscrib
