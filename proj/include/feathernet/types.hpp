#pragma once

#include <cstdint>
#include <string>

namespace feathernet {

enum class Label : std::uint8_t { Fake = 0, Real = 1 };

enum class Modality : std::uint8_t { Depth, Ir, Rgb };

inline int to_int(Label label) { return static_cast<int>(label); }
Label label_from_int(long value);  // throws unless value is 0 or 1

std::string to_string(Modality modality);
Modality parse_modality(const std::string& text);

}  // namespace feathernet
