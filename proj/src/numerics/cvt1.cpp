#include "condvid/numerics/cvt1.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace condvid {

namespace {

constexpr std::array<char, 4> kMagic{'C', 'V', 'T', '1'};
constexpr std::uint32_t kMaxRank = 16;

template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!is) throw std::runtime_error("CVT1: truncated header");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

template <typename F>
using bits_t = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;

template <typename F>
std::vector<F> read_payload(std::istream& is, std::size_t count) {
  std::vector<F> out(count);
  for (auto& v : out) v = std::bit_cast<F>(get_le<bits_t<F>>(is));
  return out;
}

}  // namespace

template <typename T>
void write_cvt1(std::ostream& os, const Tensor<T>& t) {
  if (t.empty()) throw std::invalid_argument("CVT1: cannot write an empty tensor");
  os.write(kMagic.data(), kMagic.size());
  os.put(static_cast<char>(dtype_of<T>()));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.dims()) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (T v : t.values()) put_le(os, std::bit_cast<bits_t<T>>(v));
  if (!os) throw std::runtime_error("CVT1: write failed");
}

template <typename T>
void write_cvt1(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("CVT1: cannot open " + path.string() + " for writing");
  write_cvt1(os, t);
}

template <typename T>
Tensor<T> read_cvt1(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw std::runtime_error("CVT1: bad magic");
  const int dtype = is.get();
  if (dtype != 1 && dtype != 2) throw std::runtime_error("CVT1: unknown dtype " + std::to_string(dtype));
  const auto rank = get_le<std::uint32_t>(is);
  if (rank == 0 || rank > kMaxRank) throw std::runtime_error("CVT1: invalid rank " + std::to_string(rank));
  Shape dims(rank);
  for (auto& d : dims) d = get_le<std::uint32_t>(is);
  const std::size_t count = shape_volume(dims);
  std::vector<T> data(count);
  if (dtype == 1) {
    const auto raw = read_payload<float>(is, count);
    std::transform(raw.begin(), raw.end(), data.begin(), [](float v) { return static_cast<T>(v); });
  } else {
    const auto raw = read_payload<double>(is, count);
    std::transform(raw.begin(), raw.end(), data.begin(), [](double v) { return static_cast<T>(v); });
  }
  return Tensor<T>(std::move(dims), std::move(data));
}

template <typename T>
Tensor<T> read_cvt1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("CVT1: cannot open " + path.string());
  return read_cvt1<T>(is);
}

DType peek_cvt1_dtype(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw std::runtime_error("CVT1: bad magic in " + path.string());
  const int dtype = is.get();
  if (dtype != 1 && dtype != 2) throw std::runtime_error("CVT1: unknown dtype in " + path.string());
  return static_cast<DType>(dtype);
}

template void write_cvt1<float>(std::ostream&, const Tensor<float>&);
template void write_cvt1<double>(std::ostream&, const Tensor<double>&);
template void write_cvt1<float>(const std::filesystem::path&, const Tensor<float>&);
template void write_cvt1<double>(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> read_cvt1<float>(std::istream&);
template Tensor<double> read_cvt1<double>(std::istream&);
template Tensor<float> read_cvt1<float>(const std::filesystem::path&);
template Tensor<double> read_cvt1<double>(const std::filesystem::path&);

}  // namespace condvid
