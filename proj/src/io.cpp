#include "cmt/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cmt/errors.hpp"

namespace cmt::io {
namespace {

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return e;
}

struct Raw {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved rows
};

Tensor to_tensor(const Raw& raw) {
  Tensor t(Shape{raw.channels, raw.height, raw.width}, 0.0);
  for (std::size_t i = 0; i < raw.height; ++i)
    for (std::size_t j = 0; j < raw.width; ++j)
      for (std::size_t c = 0; c < raw.channels; ++c)
        t[(c * raw.height + i) * raw.width + j] = raw.pixels[(i * raw.width + j) * raw.channels + c] / 255.0;
  return t;
}

Raw from_tensor(const Tensor& t) {
  if (t.rank() != 3 || (t.dim(0) != 1 && t.dim(0) != 3)) {
    throw DimensionError("image tensor must be [1|3,h,w], got " + shape_string(t.shape()));
  }
  Raw raw{t.dim(0), t.dim(1), t.dim(2), {}};
  raw.pixels.resize(t.size());
  for (std::size_t i = 0; i < raw.height; ++i)
    for (std::size_t j = 0; j < raw.width; ++j)
      for (std::size_t c = 0; c < raw.channels; ++c)
        raw.pixels[(i * raw.width + j) * raw.channels + c] = quantize(t[(c * raw.height + i) * raw.width + j]);
  return raw;
}

// ---- netpbm ----------------------------------------------------------------

class PnmReader {
 public:
  PnmReader(const std::string& bytes, const fs::path& path) : s_(bytes), path_(path) {}

  std::string token() {
    skip();
    std::string out;
    while (pos_ < s_.size() && !std::isspace(static_cast<unsigned char>(s_[pos_]))) out += s_[pos_++];
    if (out.empty()) fail("truncated header");
    return out;
  }

  std::size_t number() {
    const std::string t = token();
    if (!std::all_of(t.begin(), t.end(), [](unsigned char ch) { return std::isdigit(ch); })) fail("bad number " + t);
    return std::stoul(t);
  }

  // Single whitespace byte between header and binary raster.
  std::size_t raster_start() { return pos_ + 1; }
  [[noreturn]] void fail(const std::string& what) const {
    throw DatasetError(path_.string() + ": " + what);
  }

 private:
  void skip() {
    while (pos_ < s_.size()) {
      if (s_[pos_] == '#') {
        while (pos_ < s_.size() && s_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(s_[pos_]))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::string& s_;
  const fs::path& path_;
  std::size_t pos_ = 0;
};

Raw read_pnm(const fs::path& path) {
  const std::string bytes = read_file(path);
  PnmReader r(bytes, path);
  const std::string magic = r.token();
  std::size_t channels = 0;
  bool ascii = false;
  if (magic == "P2" || magic == "P5") channels = 1;
  if (magic == "P3" || magic == "P6") channels = 3;
  if (channels == 0) r.fail("unsupported netpbm magic " + magic);
  ascii = magic == "P2" || magic == "P3";
  Raw raw;
  raw.channels = channels;
  raw.width = r.number();
  raw.height = r.number();
  const std::size_t maxval = r.number();
  if (raw.width == 0 || raw.height == 0) r.fail("empty image");
  if (maxval == 0 || maxval > 255) r.fail("only 8-bit netpbm is supported");
  const std::size_t n = raw.width * raw.height * channels;
  raw.pixels.resize(n);
  auto scale = [&](std::size_t v) {
    if (v > maxval) r.fail("sample exceeds maxval");
    return static_cast<std::uint8_t>(std::lround(255.0 * static_cast<double>(v) / static_cast<double>(maxval)));
  };
  if (ascii) {
    for (std::size_t i = 0; i < n; ++i) raw.pixels[i] = scale(r.number());
  } else {
    const std::size_t start = r.raster_start();
    if (bytes.size() < start + n) r.fail("truncated raster");
    for (std::size_t i = 0; i < n; ++i) raw.pixels[i] = scale(static_cast<unsigned char>(bytes[start + i]));
  }
  return raw;
}

std::string encode_pnm(const Raw& raw) {
  std::ostringstream out;
  out << (raw.channels == 1 ? "P5" : "P6") << '\n' << raw.width << ' ' << raw.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(raw.pixels.data()), static_cast<std::streamsize>(raw.pixels.size()));
  return out.str();
}

// ---- png -------------------------------------------------------------------

struct PngSource {
  const std::string* bytes;
  std::size_t pos;
};

void png_read_bytes(png_structp png, png_bytep out, png_size_t n) {
  auto* src = static_cast<PngSource*>(png_get_io_ptr(png));
  if (src->pos + n > src->bytes->size()) png_error(png, "truncated png");
  std::copy_n(src->bytes->data() + src->pos, n, reinterpret_cast<char*>(out));
  src->pos += n;
}

void png_write_bytes(png_structp png, png_bytep data, png_size_t n) {
  static_cast<std::string*>(png_get_io_ptr(png))->append(reinterpret_cast<const char*>(data), n);
}

void png_flush_noop(png_structp) {}

[[noreturn]] void png_throw(png_structp, png_const_charp msg) { throw DatasetError(std::string("png: ") + msg); }

void png_warn_ignore(png_structp, png_const_charp) {}

Raw read_png(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw DatasetError(path.string() + ": not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, png_warn_ignore);
  png_infop info = png_create_info_struct(png);
  Raw raw;
  try {
    PngSource src{&bytes, 0};
    png_set_read_fn(png, &src, png_read_bytes);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    raw.width = png_get_image_width(png, info);
    raw.height = png_get_image_height(png, info);
    raw.channels = png_get_channels(png, info);
    if (raw.channels != 1 && raw.channels != 3) throw DatasetError(path.string() + ": unsupported channel layout");
    raw.pixels.resize(raw.width * raw.height * raw.channels);
    std::vector<png_bytep> rows(raw.height);
    for (std::size_t i = 0; i < raw.height; ++i) rows[i] = raw.pixels.data() + i * raw.width * raw.channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  } catch (const DatasetError& e) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DatasetError(path.string() + ": " + e.what());
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

std::string encode_png(const Raw& raw) {
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, png_warn_ignore);
  png_infop info = png_create_info_struct(png);
  try {
    png_set_write_fn(png, &out, png_write_bytes, png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(raw.width), static_cast<png_uint_32>(raw.height), 8,
                 raw.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t i = 0; i < raw.height; ++i) {
      png_write_row(png, raw.pixels.data() + i * raw.width * raw.channels);
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DatasetError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

bool is_image_path(const fs::path& path) {
  const std::string e = lower_ext(path);
  return e == ".png" || e == ".pgm" || e == ".ppm";
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DatasetError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image_path(entry.path())) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Tensor read_image(const fs::path& path) {
  const std::string e = lower_ext(path);
  if (e == ".png") return to_tensor(read_png(path));
  if (e == ".pgm" || e == ".ppm") return to_tensor(read_pnm(path));
  throw DatasetError("unsupported image format: " + path.string());
}

void write_image(const fs::path& path, const Tensor& image) {
  const Raw raw = from_tensor(image);
  const std::string e = lower_ext(path);
  if (e == ".png") {
    write_file_atomic(path, encode_png(raw));
  } else if (e == ".pgm" || e == ".ppm") {
    if ((e == ".pgm") != (raw.channels == 1)) {
      throw DimensionError(path.string() + ": " + std::to_string(raw.channels) + "-channel image needs " +
                           (raw.channels == 1 ? ".pgm" : ".ppm"));
    }
    write_file_atomic(path, encode_pnm(raw));
  } else {
    throw ConfigError("unsupported output image format: " + path.string());
  }
}

std::uint8_t quantize(double v) {
  const double scaled = std::clamp(v, 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(std::nearbyint(scaled));  // default rounding: half to even
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
  if (image.rank() != 3) throw DimensionError("resize expects [c,h,w], got " + shape_string(image.shape()));
  if (height == 0 || width == 0) throw ConfigError("resize target must be positive");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == height && w == width) return image;
  Tensor out(Shape{c, height, width}, 0.0);
  auto axis = [](std::size_t dst, std::size_t src_len, std::size_t dst_len, std::size_t& lo, std::size_t& hi,
                 double& frac) {
    double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_len) / static_cast<double>(dst_len) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src_len - 1));
    lo = static_cast<std::size_t>(std::floor(s));
    hi = std::min(lo + 1, src_len - 1);
    frac = s - static_cast<double>(lo);
  };
  for (std::size_t i = 0; i < height; ++i) {
    std::size_t y0, y1;
    double fy;
    axis(i, h, height, y0, y1, fy);
    for (std::size_t j = 0; j < width; ++j) {
      std::size_t x0, x1;
      double fx;
      axis(j, w, width, x0, x1, fx);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = image.data().data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - fx) + p[y0 * w + x1] * fx;
        const double bottom = p[y1 * w + x0] * (1 - fx) + p[y1 * w + x1] * fx;
        out[(ch * height + i) * width + j] = top * (1 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

Tensor to_rgb(const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("to_rgb expects [c,h,w], got " + shape_string(image.shape()));
  if (image.dim(0) == 3) return image;
  if (image.dim(0) != 1) throw DimensionError("to_rgb expects 1 or 3 channels");
  const std::size_t n = image.dim(1) * image.dim(2);
  Tensor out(Shape{3, image.dim(1), image.dim(2)}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) std::copy_n(image.data().data(), n, out.data().data() + c * n);
  return out;
}

}  // namespace cmt::io
