#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rforge/autodiff/tensor.hpp"

namespace rforge::ad {

using NamedTensor = std::pair<std::string, Tensor>;

// PTCHK1 layout: magic "PTCHK1", u64 tensor count, then per tensor u64 name
// length, UTF-8 name, u64 rank, u64 extents, f64 data. All little-endian.
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

// Copies values from `loaded` into the same-named tensors of `targets`.
// Missing names or shape mismatches throw.
void assign_from(const std::vector<NamedTensor>& loaded, const std::vector<NamedTensor>& targets);

}  // namespace rforge::ad
