#pragma once

// Checkpoint container:
//   "DITICKPT" | u32 version | u32 header_bytes | header (UTF-8 JSON)
//   | u32 count | { u32 name_bytes | name | tensor in the DITI format }*

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "diti/nn.hpp"
#include "diti/schedule.hpp"
#include "json.hpp"

namespace diti {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json header;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header, const ParameterList& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies stored values into existing parameters by name; shapes must match.
void assign_parameters(const ParameterList& params, const Checkpoint& ckpt);

nlohmann::json schedule_to_json(const VarianceSchedule& s);
VarianceSchedule schedule_from_json(const nlohmann::json& j);

}  // namespace diti
