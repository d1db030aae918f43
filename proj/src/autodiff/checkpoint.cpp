#include "rforge/autodiff/checkpoint.hpp"

#include <algorithm>
#include <stdexcept>

#include "rforge/binary_io.hpp"

namespace rforge::ad {

namespace {
constexpr std::string_view kMagic = "PTCHK1";
constexpr std::uint64_t kMaxRank = 16;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  auto os = io::open_out(path);
  io::write_bytes(os, kMagic);
  io::write_u64(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    io::write_u64(os, name.size());
    io::write_bytes(os, name);
    io::write_u64(os, t.rank());
    for (auto e : t.shape()) io::write_u64(os, e);
    for (double v : t.data()) io::write_f64(os, v);
  }
  os.flush();
  io::check_stream(os, path, "write failed");
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  try {
    if (io::read_bytes(is, kMagic.size()) != kMagic) throw std::runtime_error("bad magic, not a PTCHK1 file");
    const auto count = io::read_u64(is);
    std::vector<NamedTensor> out;
    for (std::uint64_t k = 0; k < count; ++k) {
      const auto len = io::read_u64(is);
      if (len > (1u << 20)) throw std::runtime_error("implausible tensor name length");
      std::string name = io::read_bytes(is, len);
      const auto rank = io::read_u64(is);
      if (rank == 0 || rank > kMaxRank) throw std::runtime_error("bad rank for tensor " + name);
      Shape shape(rank);
      for (auto& e : shape) e = io::read_u64(is);
      std::vector<double> data(numel(shape));
      for (auto& v : data) v = io::read_f64(is);
      out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void assign_from(const std::vector<NamedTensor>& loaded, const std::vector<NamedTensor>& targets) {
  for (const auto& [name, target] : targets) {
    auto it = std::find_if(loaded.begin(), loaded.end(), [&](const NamedTensor& nt) { return nt.first == name; });
    if (it == loaded.end()) throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != target.shape()) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + to_string(it->second.shape()) +
                               ", expected " + to_string(target.shape()));
    }
    auto src = it->second.data();
    Tensor t = target;
    std::copy(src.begin(), src.end(), t.mutable_data().begin());
  }
}

}  // namespace rforge::ad
