#pragma once

#include <cstddef>
#include <string_view>

#include "condvid/numerics/tensor.hpp"

namespace condvid {

/// Deterministic text-encoder stand-in: whitespace tokens are hashed into a
/// fixed random table (seeded by a global constant) and a sinusoidal
/// position term is added. The empty string yields a single padding row.
/// Output is (L, dim).
template <typename T>
Tensor<T> encode_text(std::string_view text, std::size_t dim = 32);

}  // namespace condvid
