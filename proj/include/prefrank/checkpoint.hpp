#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "prefrank/rng.hpp"
#include "prefrank/tensor.hpp"

namespace prefrank::nk {

/// Container layout:
///   u64 little-endian header length H
///   H bytes of JSON: {"meta":{...},"tensors":[{"name","shape","dtype":"f64","byte_offset"}]}
///   raw little-endian f64 data, byte_offset counted from the end of the header
struct Checkpoint {
  ParamSet params;
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params,
                     const nlohmann::json& meta = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const ParamSet& params, const nlohmann::json& meta);
Checkpoint decode_checkpoint(const std::string& bytes);

/// Gaussian-initialised tensor.
Tensor random_normal(const Shape& shape, double stddev, Rng& rng);

}  // namespace prefrank::nk
