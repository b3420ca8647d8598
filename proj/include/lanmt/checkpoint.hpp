#pragma once

#include "lanmt/nn.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace lanmt {

// Binary checkpoint container:
//   "LANMTCKP" | u32 version | u32 header bytes | header text ("key=value\n")
//   | u32 tensor count | per tensor: u32 name bytes, name, u32 rows, u32 cols,
//   rows*cols little-endian f64 in row-major order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

using CheckpointHeader = std::map<std::string, std::string>;

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const ParamStore& params);

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

// Loads tensor values into an already-constructed store. Every tensor in the
// file must exist in `params` with the same shape and vice versa.
CheckpointHeader load_checkpoint(const std::filesystem::path& path, ParamStore& params);

// Typed header access; missing or malformed entries throw std::runtime_error
// naming the key.
[[nodiscard]] const std::string& header_string(const CheckpointHeader& h, const std::string& key);
[[nodiscard]] int header_int(const CheckpointHeader& h, const std::string& key);
[[nodiscard]] double header_double(const CheckpointHeader& h, const std::string& key);
// Shortest decimal form that round-trips the double exactly.
[[nodiscard]] std::string format_double(double v);

}  // namespace lanmt
