#include "condvid/lab/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace condvid {

namespace {

void skip_space_and_comments(std::istream& in) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

std::size_t read_header_value(std::istream& in, const std::filesystem::path& path) {
  skip_space_and_comments(in);
  long v = -1;
  in >> v;
  if (!in || v <= 0) throw std::runtime_error("malformed netpbm header in " + path.string());
  return static_cast<std::size_t>(v);
}

Tensor<float> read_netpbm(const std::filesystem::path& path, const char* magic, std::size_t channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char m[2] = {};
  in.read(m, 2);
  if (!in || m[0] != magic[0] || m[1] != magic[1])
    throw std::runtime_error(path.string() + " is not a binary " + magic + " file");
  const std::size_t w = read_header_value(in, path), h = read_header_value(in, path);
  const std::size_t maxval = read_header_value(in, path);
  if (maxval != 255) throw std::runtime_error(path.string() + ": only 8-bit images are supported");
  in.get();
  std::vector<unsigned char> bytes(w * h * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error(path.string() + ": truncated pixel data");
  Shape dims = channels == 1 ? Shape{h, w} : Shape{h, w, channels};
  Tensor<float> out(dims);
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<float>(bytes[i]) / 255.0f;
  return out;
}

void write_netpbm(const std::filesystem::path& path, const Tensor<float>& image, const char* magic,
                  std::size_t channels) {
  const bool ok = channels == 1 ? image.rank() == 2 : image.rank() == 3 && image.dim(2) == channels;
  if (!ok) throw std::invalid_argument(std::string("cannot write ") + shape_string(image.dims()) + " as " + magic);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot create " + path.string());
  out << magic << '\n' << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  std::vector<unsigned char> bytes(image.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 255.0f));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string numbered(const char* stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu.%s", stem, i, ext);
  return buf;
}

}  // namespace

Tensor<float> read_ppm(const std::filesystem::path& path) { return read_netpbm(path, "P6", 3); }
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image) { write_netpbm(path, image, "P6", 3); }
Tensor<float> read_pgm(const std::filesystem::path& path) { return read_netpbm(path, "P5", 1); }
void write_pgm(const std::filesystem::path& path, const Tensor<float>& image) { write_netpbm(path, image, "P5", 1); }

void write_frames(const std::filesystem::path& dir, const Tensor<float>& frames, const char* stem) {
  if (frames.rank() != 4) throw std::invalid_argument("frames must be (F, H, W, 3)");
  std::filesystem::create_directories(dir);
  const Shape one{frames.dim(1), frames.dim(2), frames.dim(3)};
  for (std::size_t f = 0; f < frames.dim(0); ++f) {
    const auto s = frames.slice(f);
    write_ppm(dir / numbered(stem, f, "ppm"), Tensor<float>(one, std::vector<float>(s.begin(), s.end())));
  }
}

namespace {

Tensor<float> read_sequence(const std::filesystem::path& dir, const char* stem, const char* ext,
                            Tensor<float> (*read)(const std::filesystem::path&)) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("frame directory not found: " + dir.string());
  std::vector<Tensor<float>> frames;
  for (std::size_t i = 0;; ++i) {
    const auto p = dir / numbered(stem, i, ext);
    if (!std::filesystem::exists(p)) break;
    frames.push_back(read(p));
    if (frames.back().dims() != frames.front().dims())
      throw std::runtime_error(p.string() + " differs in size from the first frame");
  }
  if (frames.empty()) throw std::runtime_error("no " + numbered(stem, 0, ext) + " in " + dir.string());
  Shape dims{frames.size()};
  dims.insert(dims.end(), frames[0].dims().begin(), frames[0].dims().end());
  std::vector<float> data;
  for (const auto& f : frames) data.insert(data.end(), f.values().begin(), f.values().end());
  return Tensor<float>(dims, std::move(data));
}

}  // namespace

Tensor<float> read_frames(const std::filesystem::path& dir, const char* stem) {
  return read_sequence(dir, stem, "ppm", read_ppm);
}

Tensor<float> read_masks(const std::filesystem::path& dir, const char* stem) {
  return read_sequence(dir, stem, "pgm", read_pgm);
}

void write_masks(const std::filesystem::path& dir, const Tensor<float>& masks, const char* stem) {
  if (masks.rank() != 3) throw std::invalid_argument("masks must be (F, H, W), got " + shape_string(masks.dims()));
  std::filesystem::create_directories(dir);
  for (std::size_t f = 0; f < masks.dim(0); ++f) {
    const auto s = masks.slice(f);
    write_pgm(dir / numbered(stem, f, "pgm"),
              Tensor<float>({masks.dim(1), masks.dim(2)}, std::vector<float>(s.begin(), s.end())));
  }
}

}  // namespace condvid
