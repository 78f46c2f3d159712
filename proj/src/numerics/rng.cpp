#include "condvid/numerics/rng.hpp"

#include <cmath>
#include <numbers>

namespace condvid {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

// 2^-32 scaled, shifted by half an ulp so 0 and 1 are never produced.
inline double to_open_unit(std::uint32_t x) { return (static_cast<double>(x) + 0.5) * 0x1p-32; }

}  // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

std::array<std::uint32_t, 4> SeededRng::next_block() {
  const auto stream = static_cast<std::uint32_t>(stream_);
  const std::array<std::uint32_t, 4> ctr{static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
                                         stream, 0u};
  const std::array<std::uint32_t, 2> key{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)};
  ++counter_;
  return philox4x32(ctr, key);
}

double SeededRng::uniform() { return to_open_unit(next_block()[0]); }

std::uint64_t SeededRng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("SeededRng::below requires n > 0");
  const auto b = next_block();
  const std::uint64_t x = (static_cast<std::uint64_t>(b[0]) << 32) | b[1];
  return x % n;
}

std::array<double, 4> SeededRng::normal4() {
  const auto b = next_block();
  std::array<double, 4> out{};
  for (int pair = 0; pair < 2; ++pair) {
    const double u1 = to_open_unit(b[2 * pair]);
    const double u2 = to_open_unit(b[2 * pair + 1]);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    out[2 * pair] = r * std::cos(theta);
    out[2 * pair + 1] = r * std::sin(theta);
  }
  return out;
}

double SeededRng::normal() { return normal4()[0]; }

template <typename T>
Tensor<T> gaussian_noise(const Shape& shape, SeededRng& rng) {
  Tensor<T> out(shape);
  auto v = out.values();
  std::size_t i = 0;
  while (i < v.size()) {
    const auto z = rng.normal4();
    for (std::size_t k = 0; k < 4 && i < v.size(); ++k, ++i) v[i] = static_cast<T>(z[k]);
  }
  return out;
}

template Tensor<float> gaussian_noise<float>(const Shape&, SeededRng&);
template Tensor<double> gaussian_noise<double>(const Shape&, SeededRng&);

}  // namespace condvid
