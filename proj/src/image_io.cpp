#include "speckle/image_io.hpp"

#include <png.h>

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "raw float format assumes a little-endian host");

namespace speckle::io {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw std::runtime_error(path + ": " + what);
}

int pnm_next_int(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comments
  for (;;) {
    int c = in.peek();
    if (c == EOF) fail(path, "truncated header");
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int v = 0;
  if (!(in >> v)) fail(path, "malformed header");
  return v;
}

ImageD load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || (m1 != '2' && m1 != '5')) fail(path, "not a PGM file");
  const bool binary = m1 == '5';
  const int w = pnm_next_int(in, path);
  const int h = pnm_next_int(in, path);
  const int maxval = pnm_next_int(in, path);
  if (w <= 0 || h <= 0) fail(path, "zero-size image");
  if (maxval <= 0 || maxval > 65535) fail(path, "bad maxval");
  ImageD img(h, w);
  const double scale = 255.0 / maxval;
  if (binary) {
    in.get();  // single whitespace after maxval
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * bytes);
    for (int i = 0; i < h; ++i) {
      in.read(reinterpret_cast<char*>(row.data()), row.size());
      if (!in) fail(path, "truncated pixel data");
      for (int j = 0; j < w; ++j) {
        const int v = bytes == 1 ? row[j] : (row[2 * j] << 8) | row[2 * j + 1];
        img(i, j) = v * scale;
      }
    }
  } else {
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        int v;
        if (!(in >> v)) fail(path, "truncated pixel data");
        img(i, j) = v * scale;
      }
  }
  return img;
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    if (fp) std::fclose(fp);
  }
};

ImageD load_png_file(const std::string& path) {
  PngReader r;
  r.fp = std::fopen(path.c_str(), "rb");
  if (!r.fp) fail(path, "cannot open");
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                 nullptr);
  if (!r.png) fail(path, "libpng init failed");
  r.info = png_create_info_struct(r.png);
  if (!r.info) fail(path, "libpng init failed");
  if (setjmp(png_jmpbuf(r.png))) fail(path, "libpng decode error");

  png_init_io(r.png, r.fp);
  png_read_info(r.png, r.info);

  const png_uint_32 w = png_get_image_width(r.png, r.info);
  const png_uint_32 h = png_get_image_height(r.png, r.info);
  const int color = png_get_color_type(r.png, r.info);
  int depth = png_get_bit_depth(r.png, r.info);
  if (w == 0 || h == 0) fail(path, "zero-size image");

  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8)
    png_set_expand_gray_1_2_4_to_8(r.png);
  if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
  png_set_strip_alpha(r.png);
  if (depth == 16) png_set_swap(r.png);  // to host little-endian
  png_read_update_info(r.png, r.info);

  depth = png_get_bit_depth(r.png, r.info);
  const int channels = png_get_channels(r.png, r.info);
  const std::size_t rowbytes = png_get_rowbytes(r.png, r.info);
  std::vector<unsigned char> data(rowbytes * h);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 i = 0; i < h; ++i) rows[i] = data.data() + i * rowbytes;
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);

  ImageD img(h, w);
  const double scale = 255.0 / ((depth == 16) ? 65535.0 : 255.0);
  for (png_uint_32 i = 0; i < h; ++i) {
    for (png_uint_32 j = 0; j < w; ++j) {
      double px[3] = {0, 0, 0};
      for (int c = 0; c < std::min(channels, 3); ++c) {
        const std::size_t k = (static_cast<std::size_t>(j) * channels + c);
        px[c] = depth == 16
                    ? reinterpret_cast<const std::uint16_t*>(rows[i])[k]
                    : rows[i][k];
      }
      img(i, j) = channels >= 3
                      ? scale * (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
                      : scale * px[0];
    }
  }
  return img;
}

}  // namespace

ImageD load_grayscale(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) fail(path, "cannot open");
  unsigned char magic[4] = {0, 0, 0, 0};
  probe.read(reinterpret_cast<char*>(magic), 4);
  if (!probe || probe.gcount() == 0) fail(path, "empty file");
  probe.close();
  if (magic[0] == 'P' && (magic[1] == '2' || magic[1] == '5'))
    return load_pgm(path);
  if (magic[0] == 0x89 && magic[1] == 'P') return load_png_file(path);
  fail(path, "unsupported format (expect PGM or PNG)");
}

void save_pgm(const std::string& path, const ImageD& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(path, "cannot open for writing");
  out << "P5\n" << img.cols() << " " << img.rows() << "\n255\n";
  std::vector<unsigned char> row(img.cols());
  for (Eigen::Index i = 0; i < img.rows(); ++i) {
    for (Eigen::Index j = 0; j < img.cols(); ++j) {
      const double v = std::round(std::clamp(img(i, j), 0.0, 255.0));
      row[j] = static_cast<unsigned char>(v);
    }
    out.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
  if (!out) fail(path, "write failed");
}

void save_png(const std::string& path, const ImageD& img, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16)
    throw std::invalid_argument("save_png: bit_depth must be 8 or 16");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) fail(path, "cannot open for writing");
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fail(path, "libpng encode error");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.cols(), img.rows(), bit_depth,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);

  const double maxv = bit_depth == 16 ? 65535.0 : 255.0;
  const double scale = maxv / 255.0;
  if (bit_depth == 8) {
    std::vector<unsigned char> row(img.cols());
    for (Eigen::Index i = 0; i < img.rows(); ++i) {
      for (Eigen::Index j = 0; j < img.cols(); ++j)
        row[j] = static_cast<unsigned char>(
            std::round(std::clamp(img(i, j), 0.0, 255.0)));
      png_write_row(png, row.data());
    }
  } else {
    std::vector<std::uint16_t> row(img.cols());
    for (Eigen::Index i = 0; i < img.rows(); ++i) {
      for (Eigen::Index j = 0; j < img.cols(); ++j)
        row[j] = static_cast<std::uint16_t>(
            std::round(std::clamp(img(i, j) * scale, 0.0, maxv)));
      png_write_row(png, reinterpret_cast<png_bytep>(row.data()));
    }
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

ImageD load_rawf(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  Eigen::Index h = 0, w = 0;
  in >> h >> w;
  if (!in || h <= 0 || w <= 0) fail(path, "bad rawf header");
  in.get();  // newline
  std::vector<float> buf(static_cast<std::size_t>(h) * w);
  in.read(reinterpret_cast<char*>(buf.data()), buf.size() * sizeof(float));
  if (!in) fail(path, "truncated rawf data");
  ImageD img(h, w);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) img(i, j) = buf[i * w + j];
  return img;
}

void save_rawf(const std::string& path, const ImageD& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(path, "cannot open for writing");
  out << img.rows() << " " << img.cols() << "\n";
  std::vector<float> buf(static_cast<std::size_t>(img.rows()) * img.cols());
  for (Eigen::Index i = 0; i < img.rows(); ++i)
    for (Eigen::Index j = 0; j < img.cols(); ++j)
      buf[i * img.cols() + j] = static_cast<float>(img(i, j));
  out.write(reinterpret_cast<const char*>(buf.data()),
            buf.size() * sizeof(float));
  if (!out) fail(path, "write failed");
}

void save_image(const std::string& path, const ImageD& img) {
  const auto dot = path.find_last_of('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  if (ext == "pgm") return save_pgm(path, img);
  if (ext == "png") return save_png(path, img);
  if (ext == "rawf") return save_rawf(path, img);
  throw std::invalid_argument("save_image: unsupported extension ." + ext);
}

}  // namespace speckle::io
