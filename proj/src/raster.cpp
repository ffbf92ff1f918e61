#include "eviscrib/raster.hpp"

#include <cctype>
#include <fstream>
#include <string>

#include "eviscrib/errors.hpp"

namespace eviscrib::raster {

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string token(std::istream& is, const std::filesystem::path& path) {
  std::string tok;
  char ch;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string ignored;
      std::getline(is, ignored);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(ch);
  }
  if (tok.empty()) throw IoError("truncated PGM header: " + path.string());
  return tok;
}

int header_int(std::istream& is, const std::filesystem::path& path) {
  const std::string t = token(is, path);
  try {
    return std::stoi(t);
  } catch (const std::exception&) {
    throw IoError("corrupt PGM header in " + path.string());
  }
}

std::pair<int, int> read_header(std::istream& is, const std::filesystem::path& path) {
  if (token(is, path) != "P5") throw IoError("not a binary PGM file: " + path.string());
  const int w = header_int(is, path), h = header_int(is, path), maxval = header_int(is, path);
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError("unsupported PGM geometry in " + path.string());
  return {w, h};
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const Gray8& image) {
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height)
    throw ContractError("write_pgm: pixel count does not match size");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

Gray8 read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  Gray8 img;
  std::tie(img.width, img.height) = read_header(is, path);
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
    throw IoError("truncated PGM data: " + path.string());
  return img;
}

std::pair<int, int> read_pgm_size(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_header(is, path);
}

}  // namespace eviscrib::raster
