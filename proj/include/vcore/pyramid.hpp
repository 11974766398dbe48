#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vcore/raster.hpp"

namespace vcore {

struct PyramidOptions {
  int tile_size = 254;
  int overlap = 1;
  int quality = 90;
};

/// Deep Zoom geometry. Level max_level() is full resolution; each level below
/// halves it (rounding up), down to a single pixel at level 0.
struct TilePyramid {
  int width = 0;
  int height = 0;
  int tile_size = 254;
  int overlap = 1;
  std::string format = "jpg";

  int max_level() const;
  int level_width(int level) const;
  int level_height(int level) const;
  int columns(int level) const;
  int rows(int level) const;
  /// Pixel rectangle of tile (col, row) at `level`, overlap included.
  BoundingBox tile_box(int level, int col, int row) const;
  bool has_tile(int level, int col, int row) const;
};

/// ceil(log2(max(width, height))); 0 for a 1x1 image.
int pyramid_max_level(int width, int height);

/// Every level from 0 to max, each a 2x box-filtered copy of the one above.
std::vector<Raster<Rgb>> pyramid_levels(const Raster<Rgb>& image);

std::string dzi_xml(const TilePyramid& pyramid);
TilePyramid parse_dzi(const std::string& xml);

/// Writes `<dir>/<name>.dzi` and `<dir>/<name>_files/{level}/{col}_{row}.jpg`.
TilePyramid build_pyramid(const Raster<Rgb>& image, const std::filesystem::path& dir,
                          const std::string& name = "image", const PyramidOptions& options = {});

std::filesystem::path tile_path(const std::filesystem::path& dir, const std::string& name, int level, int col,
                                int row, const std::string& format = "jpg");

}  // namespace vcore
