#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "feathernet/model.hpp"

namespace feathernet {

inline constexpr char kWeightMagic[4] = {'F', 'T', 'H', 'N'};
inline constexpr std::uint32_t kWeightFormatVersion = 1;

// Little-endian layout:
//   "FTHN" | u32 version | u8 variant | u8 head | u32 tensor count
//   per tensor: u16 name length | name | u8 rank | u32 dims[rank] | u8 dtype (0 = f32) | values
// Conv weights are rank 4, linear weights rank 2 (in, out), everything else rank 1.
// Running statistics are stored alongside learned tensors.
std::vector<std::uint8_t> encode_weights(const ModelF& model);
ModelF decode_weights(const std::vector<std::uint8_t>& bytes);

void save_weights(const ModelF& model, const std::filesystem::path& file);
ModelF load_weights(const std::filesystem::path& file);

}  // namespace feathernet
