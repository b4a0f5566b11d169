#include "unitoken/core/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace unitoken {

Image resize_bilinear(const Image& src, Index height, Index width) {
  if (src.empty() || height <= 0 || width <= 0) throw UsageError("resize: zero-sized image");
  if (height == src.height && width == src.width) return src;
  Image out(height, width, src.channels());
  const double sy = static_cast<double>(src.height) / static_cast<double>(height);
  const double sx = static_cast<double>(src.width) / static_cast<double>(width);
  for (Index y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(src.height - 1));
    const Index y0 = static_cast<Index>(fy);
    const Index y1 = std::min(y0 + 1, src.height - 1);
    const float wy = static_cast<float>(fy - static_cast<double>(y0));
    for (Index x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(src.width - 1));
      const Index x0 = static_cast<Index>(fx);
      const Index x1 = std::min(x0 + 1, src.width - 1);
      const float wx = static_cast<float>(fx - static_cast<double>(x0));
      out.at(y, x) = (1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                     wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
    }
  }
  return out;
}

Image crop(const Image& src, Index y0, Index x0, Index h, Index w) {
  if (y0 < 0 || x0 < 0 || y0 + h > src.height || x0 + w > src.width) {
    throw UsageError("crop: window outside image");
  }
  Image out(h, w, src.channels());
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) out.at(y, x) = src.at(y0 + y, x0 + x);
  }
  return out;
}

double mean_squared_error(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width || a.channels() != b.channels()) {
    throw UsageError("mse: image shapes differ");
  }
  return (a.pixels - b.pixels).cast<double>().squaredNorm() / static_cast<double>(a.pixels.size());
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
  if (img.channels() != 3) throw UsageError("write_ppm: need 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::string bytes(static_cast<std::size_t>(img.pixels.size()), '\0');
  for (Index i = 0; i < img.pixels.size(); ++i) {
    const float v = std::clamp(img.pixels.data()[i], 0.0f, 1.0f);
    bytes[static_cast<std::size_t>(i)] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  char c = 0;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      tok.push_back(c);
      break;
    }
  }
  while (in.get(c) && !std::isspace(static_cast<unsigned char>(c))) tok.push_back(c);
  return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  if (next_token(in) != "P6") throw std::runtime_error(path.string() + ": not a binary PPM");
  const long w = std::stol(next_token(in));
  const long h = std::stol(next_token(in));
  const long maxval = std::stol(next_token(in));
  if (w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error(path.string() + ": unsupported PPM");
  Image img(h, w, 3);
  std::string bytes(static_cast<std::size_t>(h * w * 3), '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw std::runtime_error(path.string() + ": truncated PPM");
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    img.pixels.data()[i] = static_cast<float>(static_cast<unsigned char>(bytes[i])) / 255.0f;
  }
  return img;
}

}  // namespace unitoken
