#include "condvid/network/text.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "condvid/numerics/hash.hpp"
#include "condvid/numerics/rng.hpp"

namespace condvid {

namespace {

constexpr std::uint64_t kTableSeed = 0x7e57'7ab1eULL;
constexpr std::uint64_t kVocab = 4096;

std::vector<std::string_view> split_words(std::string_view s) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  auto space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < s.size()) {
    while (i < s.size() && space(s[i])) ++i;
    const std::size_t start = i;
    while (i < s.size() && !space(s[i])) ++i;
    if (i > start) words.push_back(s.substr(start, i - start));
  }
  return words;
}

// Row `index` of the table; index kVocab is the padding row.
void table_row(std::uint64_t index, std::size_t dim, double* out) {
  const std::uint64_t blocks = (dim + 3) / 4;
  SeededRng rng(kTableSeed, Stream::weights, index * blocks);
  for (std::size_t i = 0; i < dim; i += 4) {
    const auto z = rng.normal4();
    for (std::size_t k = 0; k < 4 && i + k < dim; ++k) out[i + k] = z[k];
  }
}

}  // namespace

template <typename T>
Tensor<T> encode_text(std::string_view text, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("text embedding width must be even and positive");
  const auto words = split_words(text);
  const std::size_t len = words.empty() ? 1 : words.size();
  Tensor<T> out({len, dim});
  std::vector<double> row(dim);
  for (std::size_t i = 0; i < len; ++i) {
    table_row(words.empty() ? kVocab : fnv1a64(words[i]) % kVocab, dim, row.data());
    for (std::size_t k = 0; k < dim / 2; ++k) {
      const double freq = std::exp(-std::log(100.0) * static_cast<double>(k) / static_cast<double>(dim / 2));
      row[k] += 0.5 * std::sin(static_cast<double>(i) * freq);
      row[dim / 2 + k] += 0.5 * std::cos(static_cast<double>(i) * freq);
    }
    for (std::size_t k = 0; k < dim; ++k) out[i * dim + k] = static_cast<T>(row[k]);
  }
  return out;
}

template Tensor<float> encode_text<float>(std::string_view, std::size_t);
template Tensor<double> encode_text<double>(std::string_view, std::size_t);

}  // namespace condvid
