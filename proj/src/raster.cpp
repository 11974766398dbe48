#include "vcore/raster.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

namespace vcore {

void SectionImage::validate() const {
  if (rgb.width() <= 0 || rgb.height() <= 0) {
    throw std::invalid_argument("SectionImage: empty raster");
  }
  if (!(mpp > 0.0)) {
    throw std::invalid_argument("SectionImage: mpp must be positive");
  }
}

Hsv rgb_to_hsv(Rgb px) {
  const double r = px.r / 255.0;
  const double g = px.g / 255.0;
  const double b = px.b / 255.0;
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;

  Hsv out;
  out.v = mx;
  out.s = mx > 0.0 ? delta / mx : 0.0;
  if (delta <= 0.0) {
    out.h = 0.0;
    return out;
  }
  if (px.r >= px.g && px.r >= px.b) {
    out.h = 60.0 * ((g - b) / delta);
  } else if (px.g >= px.b) {
    out.h = 60.0 * ((b - r) / delta + 2.0);
  } else {
    out.h = 60.0 * ((r - g) / delta + 4.0);
  }
  if (out.h < 0.0) out.h += 360.0;
  if (out.h >= 360.0) out.h -= 360.0;
  return out;
}

Rgb hsv_to_rgb(const Hsv& hsv) {
  const double c = hsv.v * hsv.s;
  double hp = std::fmod(hsv.h, 360.0);
  if (hp < 0.0) hp += 360.0;
  hp /= 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = hsv.v - c;
  auto to8 = [m](double u) {
    return static_cast<std::uint8_t>(std::clamp(std::lround((u + m) * 255.0), 0L, 255L));
  };
  return {to8(r), to8(g), to8(b)};
}

HsvImage rgb_to_hsv(const SectionImage& image) {
  HsvImage out(image.width(), image.height());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = rgb_to_hsv(image.rgb[i]);
  return out;
}

GrayImage to_gray(const SectionImage& image) {
  GrayImage out(image.width(), image.height());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Rgb p = image.rgb[i];
    out[i] = static_cast<float>((0.299 * p.r + 0.587 * p.g + 0.114 * p.b) / 255.0);
  }
  return out;
}

bool hue_in_window(double hue, double lo, double hi) {
  if (lo <= hi) return hue >= lo && hue < hi;
  return hue >= lo || hue < hi;
}

BinaryMask tissue_mask(const SectionImage& image, const TissueMaskOptions& options) {
  BinaryMask mask(image.width(), image.height(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const Hsv hsv = rgb_to_hsv(image.rgb[i]);
    mask[i] = (hue_in_window(hsv.h, options.hue_lo, options.hue_hi) && hsv.s >= options.sat_min) ? 1 : 0;
  }
  return mask;
}

namespace {

// Half-width of the disk's horizontal chord at vertical offset dy.
std::vector<int> disk_chords(int radius) {
  std::vector<int> chords(2 * radius + 1);
  for (int dy = -radius; dy <= radius; ++dy) {
    int w = 0;
    while ((w + 1) * (w + 1) + dy * dy <= radius * radius) ++w;
    chords[dy + radius] = w;
  }
  return chords;
}

std::vector<int> row_prefix(const BinaryMask& mask, int y) {
  std::vector<int> prefix(mask.width() + 1, 0);
  for (int x = 0; x < mask.width(); ++x) prefix[x + 1] = prefix[x] + (mask.at(x, y) ? 1 : 0);
  return prefix;
}

}  // namespace

BinaryMask dilate(const BinaryMask& mask, int radius) {
  if (radius < 0) throw std::invalid_argument("dilate: radius must be >= 0");
  if (radius == 0) return mask;
  const int w = mask.width();
  const int h = mask.height();
  const auto chords = disk_chords(radius);
  std::vector<std::vector<int>> prefixes(h);
  for (int y = 0; y < h; ++y) prefixes[y] = row_prefix(mask, y);

  BinaryMask out(w, h, 0);
  for (int y = 0; y < h; ++y) {
    for (int dy = -radius; dy <= radius; ++dy) {
      const int sy = y + dy;
      if (sy < 0 || sy >= h) continue;
      const int half = chords[dy + radius];
      const auto& pre = prefixes[sy];
      if (pre[w] == 0) continue;
      for (int x = 0; x < w; ++x) {
        if (out.at(x, y)) continue;
        const int lo = std::max(0, x - half);
        const int hi = std::min(w, x + half + 1);
        if (pre[hi] - pre[lo] > 0) out.at(x, y) = 1;
      }
    }
  }
  return out;
}

BinaryMask erode(const BinaryMask& mask, int radius) {
  if (radius < 0) throw std::invalid_argument("erode: radius must be >= 0");
  if (radius == 0) return mask;
  const int w = mask.width();
  const int h = mask.height();
  const auto chords = disk_chords(radius);
  std::vector<std::vector<int>> prefixes(h);
  for (int y = 0; y < h; ++y) prefixes[y] = row_prefix(mask, y);

  BinaryMask out = mask;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!out.at(x, y)) continue;
      for (int dy = -radius; dy <= radius; ++dy) {
        const int sy = y + dy;
        if (sy < 0 || sy >= h) continue;
        const int half = chords[dy + radius];
        const int lo = std::max(0, x - half);
        const int hi = std::min(w, x + half + 1);
        if (prefixes[sy][hi] - prefixes[sy][lo] != hi - lo) {
          out.at(x, y) = 0;
          break;
        }
      }
    }
  }
  return out;
}

BinaryMask morphological_close(const BinaryMask& mask, int radius) {
  if (radius < 0) throw std::invalid_argument("morphological_close: radius must be >= 0");
  if (radius == 0) return mask;
  return erode(dilate(mask, radius), radius);
}

RibbonLabeling label_components(const BinaryMask& mask, std::int64_t min_area) {
  const int w = mask.width();
  const int h = mask.height();
  LabelImage provisional(w, h, 0);

  struct Component {
    int id;
    BoundingBox box;
    std::int64_t count;
  };
  std::vector<Component> components;
  std::vector<std::pair<int, int>> stack;

  int next_id = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(x, y) || provisional.at(x, y) != 0) continue;
      const int id = ++next_id;
      Component comp{id, {x, y, x + 1, y + 1}, 0};
      stack.clear();
      stack.emplace_back(x, y);
      provisional.at(x, y) = id;
      while (!stack.empty()) {
        const auto [cx, cy] = stack.back();
        stack.pop_back();
        ++comp.count;
        comp.box.x0 = std::min(comp.box.x0, cx);
        comp.box.y0 = std::min(comp.box.y0, cy);
        comp.box.x1 = std::max(comp.box.x1, cx + 1);
        comp.box.y1 = std::max(comp.box.y1, cy + 1);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx;
            const int ny = cy + dy;
            if ((dx == 0 && dy == 0) || !mask.contains(nx, ny)) continue;
            if (mask.at(nx, ny) && provisional.at(nx, ny) == 0) {
              provisional.at(nx, ny) = id;
              stack.emplace_back(nx, ny);
            }
          }
        }
      }
      components.push_back(comp);
    }
  }

  std::erase_if(components, [min_area](const Component& c) { return c.count < min_area; });
  std::stable_sort(components.begin(), components.end(), [](const Component& a, const Component& b) {
    if (a.box.y0 != b.box.y0) return a.box.y0 < b.box.y0;
    return a.box.x0 < b.box.x0;
  });

  std::vector<int> remap(static_cast<std::size_t>(next_id) + 1, 0);
  RibbonLabeling result;
  result.ribbons.reserve(components.size());
  for (std::size_t i = 0; i < components.size(); ++i) {
    const int label = static_cast<int>(i) + 1;
    remap[components[i].id] = label;
    result.ribbons.push_back({label, components[i].box, components[i].count});
  }
  result.labels = LabelImage(w, h, 0);
  for (std::size_t i = 0; i < provisional.size(); ++i) result.labels[i] = remap[provisional[i]];
  return result;
}

std::vector<RibbonLabel> label_ribbons(const BinaryMask& mask, std::int64_t min_area) {
  return label_components(mask, min_area).ribbons;
}

BinaryMask boundary_of(const BinaryMask& mask) {
  const int w = mask.width();
  const int h = mask.height();
  BinaryMask out(w, h, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(x, y)) continue;
      const bool edge = x == 0 || y == 0 || x == w - 1 || y == h - 1 || !mask.at(x - 1, y) ||
                        !mask.at(x + 1, y) || !mask.at(x, y - 1) || !mask.at(x, y + 1);
      out.at(x, y) = edge ? 1 : 0;
    }
  }
  return out;
}

BinaryMask fill_holes(const BinaryMask& mask) {
  const int w = mask.width();
  const int h = mask.height();
  BinaryMask outside(w, h, 0);
  std::deque<std::pair<int, int>> queue;
  auto seed = [&](int x, int y) {
    if (!mask.at(x, y) && !outside.at(x, y)) {
      outside.at(x, y) = 1;
      queue.emplace_back(x, y);
    }
  };
  for (int x = 0; x < w; ++x) {
    seed(x, 0);
    seed(x, h - 1);
  }
  for (int y = 0; y < h; ++y) {
    seed(0, y);
    seed(w - 1, y);
  }
  constexpr int kDx[4] = {1, -1, 0, 0};
  constexpr int kDy[4] = {0, 0, 1, -1};
  while (!queue.empty()) {
    const auto [x, y] = queue.front();
    queue.pop_front();
    for (int k = 0; k < 4; ++k) {
      const int nx = x + kDx[k];
      const int ny = y + kDy[k];
      if (mask.contains(nx, ny)) seed(nx, ny);
    }
  }
  BinaryMask out(w, h, 0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = outside[i] ? 0 : 1;
  return out;
}

namespace {

// 1D squared-distance lower envelope (Felzenszwalb & Huttenlocher).
void envelope_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
                 std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    auto intersect = [&](int p) {
      return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
    };
    double s = intersect(v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double diff = q - v[k];
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace

ScalarField distance_to(const BinaryMask& sites) {
  const int w = sites.width();
  const int h = sites.height();
  ScalarField out(w, h, kUnreachableDistance);
  if (count_set(sites) == 0) return out;

  // Finite stand-in for infinity keeps the envelope arithmetic exact.
  const double big = 4.0 * (double(w) * w + double(h) * h) + 1.0;
  ScalarField sq(w, h, 0.0);
  {
    std::vector<double> f(h), d(h), z(h + 1);
    std::vector<int> v(h);
    for (int x = 0; x < w; ++x) {
      for (int y = 0; y < h; ++y) f[y] = sites.at(x, y) ? 0.0 : big;
      envelope_1d(f, d, v, z);
      for (int y = 0; y < h; ++y) sq.at(x, y) = d[y];
    }
  }
  {
    std::vector<double> f(w), d(w), z(w + 1);
    std::vector<int> v(w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) f[x] = sq.at(x, y);
      envelope_1d(f, d, v, z);
      for (int x = 0; x < w; ++x) out.at(x, y) = std::sqrt(d[x]);
    }
  }
  return out;
}

ScalarField signed_distance(const BinaryMask& mask) {
  const BinaryMask boundary = boundary_of(mask);
  ScalarField out = distance_to(boundary);
  if (count_set(boundary) == 0) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i] && !boundary[i]) out[i] = -out[i];
  }
  return out;
}

std::int64_t count_set(const BinaryMask& mask) {
  std::int64_t n = 0;
  for (auto b : mask) n += b ? 1 : 0;
  return n;
}

BinaryMask mask_of_label(const LabelImage& labels, int label_id) {
  BinaryMask out(labels.width(), labels.height(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = labels[i] == label_id ? 1 : 0;
  return out;
}

BinaryMask ribbon_mask(const SectionImage& image, const TissueMaskOptions& tissue, int close_radius,
                       double min_area_fraction) {
  const BinaryMask closed = morphological_close(tissue_mask(image, tissue), close_radius);
  const auto min_area = static_cast<std::int64_t>(
      std::ceil(min_area_fraction * double(image.width()) * double(image.height())));
  const RibbonLabeling labeling = label_components(closed, min_area);
  BinaryMask kept(closed.width(), closed.height(), 0);
  for (std::size_t i = 0; i < kept.size(); ++i) kept[i] = labeling.labels[i] > 0 ? 1 : 0;
  return fill_holes(kept);
}

SectionImage downsample(const SectionImage& image, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample: factor must be >= 1");
  if (factor == 1) return image;
  const int w = (image.width() + factor - 1) / factor;
  const int h = (image.height() + factor - 1) / factor;
  SectionImage out;
  out.rgb = Raster<Rgb>(w, h);
  out.mpp = image.mpp * factor;
  out.level = image.level + static_cast<int>(std::lround(std::log2(double(factor))));
  out.section_index = image.section_index;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double r = 0, g = 0, b = 0;
      int n = 0;
      for (int sy = y * factor; sy < std::min(image.height(), (y + 1) * factor); ++sy) {
        for (int sx = x * factor; sx < std::min(image.width(), (x + 1) * factor); ++sx) {
          const Rgb p = image.rgb.at(sx, sy);
          r += p.r;
          g += p.g;
          b += p.b;
          ++n;
        }
      }
      out.rgb.at(x, y) = {static_cast<std::uint8_t>(std::lround(r / n)),
                          static_cast<std::uint8_t>(std::lround(g / n)),
                          static_cast<std::uint8_t>(std::lround(b / n))};
    }
  }
  return out;
}

SectionImage crop(const SectionImage& image, const BoundingBox& box) {
  if (box.x0 < 0 || box.y0 < 0 || box.x1 > image.width() || box.y1 > image.height() ||
      box.width() <= 0 || box.height() <= 0) {
    throw std::out_of_range("crop: box outside image");
  }
  SectionImage out;
  out.rgb = Raster<Rgb>(box.width(), box.height());
  out.mpp = image.mpp;
  out.level = image.level;
  out.section_index = image.section_index;
  for (int y = 0; y < box.height(); ++y) {
    for (int x = 0; x < box.width(); ++x) out.rgb.at(x, y) = image.rgb.at(box.x0 + x, box.y0 + y);
  }
  return out;
}

}  // namespace vcore
