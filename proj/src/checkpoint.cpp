#include "eave/checkpoint.hpp"

#include <fstream>

#include "eave/binary_io.hpp"
#include "eave/errors.hpp"

namespace eave {

namespace {
constexpr char kMagic[9] = "EAVECKPT";
}

void save_checkpoint(const std::filesystem::path& path, const EaveModel<float>& model) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
    io::write_magic(out, kMagic);
    io::write_le<std::uint32_t>(out, kCheckpointVersion);
    io::write_string(out, canonical_serialization(model.config));
    const auto params = model.parameters();
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
      io::write_string(out, p.name);
      io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.rank()));
      for (auto d : p.tensor.shape()) io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
      for (float v : p.tensor.data()) io::write_le<float>(out, v);
    }
    out.flush();
    if (!out) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

EaveModel<float> load_checkpoint(const std::filesystem::path& path) {
  const std::string what = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + what);
  io::expect_magic(in, kMagic, what);
  const auto version = io::read_le<std::uint32_t>(in, what);
  if (version != kCheckpointVersion) throw IntegrityError(what + ": unsupported version " + std::to_string(version));
  EaveConfig config;
  try {
    config = nlohmann::json::parse(io::read_string(in, what)).get<EaveConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(what + ": bad config: " + e.what());
  }
  auto model = EaveModel<float>::init(config, 0);
  auto params = model.parameters();
  const auto count = io::read_le<std::uint32_t>(in, what);
  if (count != params.size()) throw IntegrityError(what + ": parameter count mismatch");
  for (auto& p : params) {
    const auto name = io::read_string(in, what, 4096);
    if (name != p.name) throw IntegrityError(what + ": expected parameter " + p.name + ", found " + name);
    const auto rank = io::read_le<std::uint32_t>(in, what);
    if (rank != p.tensor.rank()) throw IntegrityError(what + ": rank mismatch for " + name);
    for (std::size_t i = 0; i < rank; ++i) {
      if (io::read_le<std::uint32_t>(in, what) != p.tensor.dim(i)) {
        throw IntegrityError(what + ": shape mismatch for " + name);
      }
    }
    for (auto& v : p.tensor.mutable_data()) v = io::read_le<float>(in, what);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IntegrityError(what + ": trailing bytes");
  model.invalidate_fingerprint();
  return model;
}

}  // namespace eave
