#include "diti/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "diti/tensor_io.hpp"

namespace diti {

namespace {

constexpr char kMagic[8] = {'D', 'I', 'T', 'I', 'C', 'K', 'P', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated file");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::string get_bytes(std::istream& in, std::uint32_t n) {
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header, const ParameterList& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  const std::string text = header.dump();
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_tensor(out, p.tensor);
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error(path.string() + " is not a checkpoint");
  const auto version = get_u32(in);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " unsupported");
  Checkpoint ck;
  ck.header = nlohmann::json::parse(get_bytes(in, get_u32(in)));
  const auto count = get_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = get_bytes(in, get_u32(in));
    ck.tensors.emplace(std::move(name), read_tensor(in));
  }
  return ck;
}

void assign_parameters(const ParameterList& params, const Checkpoint& ckpt) {
  for (const auto& p : params) {
    auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end()) throw std::runtime_error("checkpoint lacks parameter " + p.name);
    if (it->second.shape() != p.tensor.shape())
      throw std::runtime_error("checkpoint parameter " + p.name + " has shape " + shape_string(it->second.shape()) +
                               ", model expects " + shape_string(p.tensor.shape()));
    Tensor dst = p.tensor;
    std::ranges::copy(it->second.values(), dst.mutable_values().begin());
  }
}

nlohmann::json schedule_to_json(const VarianceSchedule& s) {
  return {{"kind", "linear"}, {"T", s.steps()}, {"beta_start", s.beta_start()}, {"beta_end", s.beta_end()}};
}

VarianceSchedule schedule_from_json(const nlohmann::json& j) {
  return make_linear_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

}  // namespace diti
