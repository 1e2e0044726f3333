#include "prefrank/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace prefrank::nk {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  std::memcpy(&v, in.data() + pos, 8);
  return v;
}

}  // namespace

std::string encode_checkpoint(const ParamSet& params, const nlohmann::json& meta) {
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.tensors()) {
    header["tensors"].push_back({{"name", name},
                                 {"shape", t.shape()},
                                 {"dtype", "f64"},
                                 {"byte_offset", offset},
                                 {"requires_grad", t.requires_grad}});
    offset += t.size() * sizeof(double);
  }
  const std::string head = header.dump();
  std::string out;
  out.reserve(8 + head.size() + offset);
  put_u64(out, head.size());
  out += head;
  for (const auto& [_, t] : params.tensors()) {
    out.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw std::runtime_error("checkpoint: truncated header length");
  const std::uint64_t hlen = get_u64(bytes, 0);
  if (8 + hlen > bytes.size()) throw std::runtime_error("checkpoint: header length exceeds file size");
  const auto header = nlohmann::json::parse(bytes.substr(8, hlen));
  const std::size_t data_start = 8 + hlen;
  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    if (entry.at("dtype") != "f64") throw std::runtime_error("checkpoint: unsupported dtype " + entry.at("dtype").dump());
    Shape shape = entry.at("shape").get<Shape>();
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    const std::size_t off = data_start + entry.at("byte_offset").get<std::size_t>();
    if (off + n * sizeof(double) > bytes.size()) {
      throw std::runtime_error("checkpoint: tensor '" + entry.at("name").get<std::string>() + "' runs past end of file");
    }
    std::vector<double> data(n);
    std::memcpy(data.data(), bytes.data() + off, n * sizeof(double));
    ck.params.add(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)),
                  entry.value("requires_grad", true));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params, const nlohmann::json& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode_checkpoint(params, meta);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

Tensor random_normal(const Shape& shape, double stddev, Rng& rng) {
  Tensor t(shape, 0.0);
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

}  // namespace prefrank::nk
