#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vcore/raster.hpp"

namespace vcore {

/// Reads an 8-bit PNG or TIFF as RGB. Metadata comes from a sidecar
/// `<path>.json` ({"mpp": .., "level": ..}) when present, else the defaults.
SectionImage read_section(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Raster<Rgb>& image);
void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_mask_png(const std::filesystem::path& path);

/// Writes `{"mpp": .., "level": .., "section_index": ..}` next to an image.
void write_sidecar(const std::filesystem::path& image_path, const SectionImage& image);

std::vector<std::uint8_t> encode_jpeg(const Raster<Rgb>& image, int quality);
Raster<Rgb> decode_image(std::span<const std::uint8_t> bytes);

}  // namespace vcore
