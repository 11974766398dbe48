#include "vcore/pyramid.hpp"

#include <algorithm>
#include <fstream>
#include <regex>
#include <sstream>
#include <stdexcept>

#include "vcore/image_io.hpp"

namespace vcore {

namespace {

int halve_up(int v, int times) {
  for (int i = 0; i < times; ++i) v = (v + 1) / 2;
  return v;
}

int ceil_div(int a, int b) { return (a + b - 1) / b; }

}  // namespace

int pyramid_max_level(int width, int height) {
  if (width < 1 || height < 1) throw std::invalid_argument("pyramid: empty image");
  int level = 0;
  for (long long side = 1; side < std::max(width, height); side *= 2) ++level;
  return level;
}

int TilePyramid::max_level() const { return pyramid_max_level(width, height); }

int TilePyramid::level_width(int level) const { return halve_up(width, max_level() - level); }
int TilePyramid::level_height(int level) const { return halve_up(height, max_level() - level); }
int TilePyramid::columns(int level) const { return ceil_div(level_width(level), tile_size); }
int TilePyramid::rows(int level) const { return ceil_div(level_height(level), tile_size); }

bool TilePyramid::has_tile(int level, int col, int row) const {
  return level >= 0 && level <= max_level() && col >= 0 && row >= 0 && col < columns(level) && row < rows(level);
}

BoundingBox TilePyramid::tile_box(int level, int col, int row) const {
  if (!has_tile(level, col, row)) throw std::out_of_range("tile_box: no such tile");
  BoundingBox b;
  b.x0 = std::max(0, col * tile_size - overlap);
  b.y0 = std::max(0, row * tile_size - overlap);
  b.x1 = std::min(level_width(level), (col + 1) * tile_size + overlap);
  b.y1 = std::min(level_height(level), (row + 1) * tile_size + overlap);
  return b;
}

std::vector<Raster<Rgb>> pyramid_levels(const Raster<Rgb>& image) {
  const int L = pyramid_max_level(image.width(), image.height());
  std::vector<Raster<Rgb>> levels(L + 1);
  SectionImage current;
  current.rgb = image;
  levels[L] = image;
  for (int l = L - 1; l >= 0; --l) {
    current = downsample(current, 2);
    levels[l] = current.rgb;
  }
  return levels;
}

std::string dzi_xml(const TilePyramid& p) {
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<Image xmlns=\"http://schemas.microsoft.com/deepzoom/2008\" TileSize=\"" << p.tile_size << "\" Overlap=\""
    << p.overlap << "\" Format=\"" << p.format << "\">\n"
    << "  <Size Width=\"" << p.width << "\" Height=\"" << p.height << "\"/>\n"
    << "</Image>\n";
  return s.str();
}

TilePyramid parse_dzi(const std::string& xml) {
  auto attr = [&](const char* name) {
    std::smatch m;
    if (!std::regex_search(xml, m, std::regex(std::string(name) + "=\"([^\"]*)\"")))
      throw std::runtime_error(std::string("parse_dzi: missing ") + name);
    return m[1].str();
  };
  TilePyramid p;
  p.tile_size = std::stoi(attr("TileSize"));
  p.overlap = std::stoi(attr("Overlap"));
  p.format = attr("Format");
  p.width = std::stoi(attr("Width"));
  p.height = std::stoi(attr("Height"));
  if (p.tile_size < 1 || p.overlap < 0 || p.width < 1 || p.height < 1)
    throw std::runtime_error("parse_dzi: bad geometry");
  return p;
}

std::filesystem::path tile_path(const std::filesystem::path& dir, const std::string& name, int level, int col,
                                int row, const std::string& format) {
  return dir / (name + "_files") / std::to_string(level) /
         (std::to_string(col) + "_" + std::to_string(row) + "." + format);
}

TilePyramid build_pyramid(const Raster<Rgb>& image, const std::filesystem::path& dir, const std::string& name,
                          const PyramidOptions& options) {
  if (options.tile_size < 1 || options.overlap < 0) throw std::invalid_argument("build_pyramid: bad tile geometry");
  TilePyramid p;
  p.width = image.width();
  p.height = image.height();
  p.tile_size = options.tile_size;
  p.overlap = options.overlap;
  const std::vector<Raster<Rgb>> levels = pyramid_levels(image);

  for (int l = 0; l <= p.max_level(); ++l) {
    std::filesystem::create_directories(dir / (name + "_files") / std::to_string(l));
    for (int row = 0; row < p.rows(l); ++row) {
      for (int col = 0; col < p.columns(l); ++col) {
        const BoundingBox b = p.tile_box(l, col, row);
        Raster<Rgb> tile(b.width(), b.height());
        for (int y = 0; y < b.height(); ++y)
          for (int x = 0; x < b.width(); ++x) tile.at(x, y) = levels[l].at(b.x0 + x, b.y0 + y);
        const std::vector<std::uint8_t> bytes = encode_jpeg(tile, options.quality);
        const auto path = tile_path(dir, name, l, col, row, p.format);
        std::ofstream out(path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("build_pyramid: cannot write " + path.string());
      }
    }
  }
  std::ofstream out(dir / (name + ".dzi"));
  out << dzi_xml(p);
  if (!out) throw std::runtime_error("build_pyramid: cannot write descriptor");
  return p;
}

}  // namespace vcore
