#include "vcore/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace vcore {

namespace {

constexpr int kBorder = 5;
constexpr int kMaxInterpSteps = 5;
constexpr int kOriBins = 36;
constexpr double kOriSigmaFactor = 1.5;
constexpr double kOriRadiusFactor = 3.0 * kOriSigmaFactor;
constexpr double kOriPeakRatio = 0.8;
constexpr int kDescWidth = 4;
constexpr int kDescBins = 8;
constexpr double kDescScaleFactor = 3.0;
constexpr double kDescMagThreshold = 0.2;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

GrayImage half_size(const GrayImage& image) {
  const int w = (image.width() + 1) / 2;
  const int h = (image.height() + 1) / 2;
  GrayImage out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out.at(x, y) = image.at(2 * x, 2 * y);
  }
  return out;
}

GrayImage subtract(const GrayImage& a, const GrayImage& b) {
  GrayImage out(a.width(), a.height());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

float wrap_angle(double a) {
  a = std::fmod(a, kTwoPi);
  if (a < 0) a += kTwoPi;
  if (a >= kTwoPi) a -= kTwoPi;
  return static_cast<float>(a);
}

int octave_count(int width, int height, int requested) {
  const int min_side = std::min(width, height);
  int usable = 1;
  while ((min_side >> usable) >= 16 && usable < requested) ++usable;
  return std::max(1, std::min(requested, usable));
}

struct Extremum {
  int octave;
  int layer;
  int x;
  int y;
};

// Quadratic refinement of a DoG extremum. Returns false when it drifts out of
// range, fails to settle, or is rejected by the contrast or edge tests.
bool refine_extremum(const ScaleSpace& space, Extremum& e, Keypoint& kp) {
  const SiftOptions& opt = space.options();
  const int s = opt.scales_per_octave;
  double xi = 0, xr = 0, xc = 0;
  double contrast = 0;
  int step = 0;
  for (; step < kMaxInterpSteps; ++step) {
    const GrayImage& prev = space.dog(e.octave, e.layer - 1);
    const GrayImage& cur = space.dog(e.octave, e.layer);
    const GrayImage& next = space.dog(e.octave, e.layer + 1);
    const int x = e.x;
    const int y = e.y;
    const double v2 = 2.0 * cur.at(x, y);
    const double dx = 0.5 * (cur.at(x + 1, y) - cur.at(x - 1, y));
    const double dy = 0.5 * (cur.at(x, y + 1) - cur.at(x, y - 1));
    const double ds = 0.5 * (next.at(x, y) - prev.at(x, y));
    const double dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - v2;
    const double dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - v2;
    const double dss = next.at(x, y) + prev.at(x, y) - v2;
    const double dxy = 0.25 * (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1) +
                               cur.at(x - 1, y - 1));
    const double dxs = 0.25 * (next.at(x + 1, y) - next.at(x - 1, y) - prev.at(x + 1, y) +
                               prev.at(x - 1, y));
    const double dys = 0.25 * (next.at(x, y + 1) - next.at(x, y - 1) - prev.at(x, y + 1) +
                               prev.at(x, y - 1));

    // Solve H * X = -g by Cramer's rule.
    const double h[3][3] = {{dxx, dxy, dxs}, {dxy, dyy, dys}, {dxs, dys, dss}};
    const double g[3] = {dx, dy, ds};
    const double det = h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1]) -
                       h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0]) +
                       h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0]);
    if (std::abs(det) < 1e-15) return false;
    auto solve_col = [&](int col) {
      double m[3][3];
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) m[r][c] = (c == col) ? -g[r] : h[r][c];
      }
      return (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
              m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
              m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])) /
             det;
    };
    xc = solve_col(0);
    xr = solve_col(1);
    xi = solve_col(2);

    if (std::abs(xi) < 0.5 && std::abs(xr) < 0.5 && std::abs(xc) < 0.5) {
      contrast = cur.at(x, y) + 0.5 * (dx * xc + dy * xr + ds * xi);
      break;
    }
    if (std::abs(xi) > 1e6 || std::abs(xr) > 1e6 || std::abs(xc) > 1e6) return false;
    e.x += static_cast<int>(std::lround(xc));
    e.y += static_cast<int>(std::lround(xr));
    e.layer += static_cast<int>(std::lround(xi));
    if (e.layer < 1 || e.layer > s || e.x < kBorder || e.x >= cur.width() - kBorder ||
        e.y < kBorder || e.y >= cur.height() - kBorder) {
      return false;
    }
  }
  if (step >= kMaxInterpSteps) return false;
  if (std::abs(contrast) * s < opt.contrast_thresh) return false;

  const GrayImage& cur = space.dog(e.octave, e.layer);
  const int x = e.x;
  const int y = e.y;
  const double v2 = 2.0 * cur.at(x, y);
  const double dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - v2;
  const double dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - v2;
  const double dxy = 0.25 * (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1) +
                             cur.at(x - 1, y - 1));
  const double tr = dxx + dyy;
  const double det = dxx * dyy - dxy * dxy;
  const double r = opt.edge_thresh;
  if (det <= 0 || tr * tr * r >= (r + 1) * (r + 1) * det) return false;

  const double scale_factor = std::ldexp(1.0, e.octave);
  kp.x = static_cast<float>((x + xc) * scale_factor);
  kp.y = static_cast<float>((y + xr) * scale_factor);
  kp.layer = static_cast<float>(e.layer + xi);
  kp.octave = e.octave;
  kp.scale = static_cast<float>(opt.sigma * std::pow(2.0, (e.layer + xi) / s) * scale_factor);
  kp.response = static_cast<float>(std::abs(contrast));
  return true;
}

// Octave and integer layer used to sample a keypoint's neighbourhood.
std::pair<int, int> sampling_layer(const ScaleSpace& space, const Keypoint& kp, double& scale_in_octave) {
  const SiftOptions& opt = space.options();
  const int s = opt.scales_per_octave;
  int octave = kp.octave;
  double layer = kp.layer;
  if (octave < 0 || octave >= space.octaves()) {
    const double rel = std::log2(std::max(1e-6, double(kp.scale) / opt.sigma));
    octave = std::clamp(static_cast<int>(std::floor(rel)), 0, space.octaves() - 1);
    layer = (rel - octave) * s;
  }
  const int ilayer = std::clamp(static_cast<int>(std::lround(layer)), 0, s + 2);
  scale_in_octave = kp.scale / std::ldexp(1.0, octave);
  return {octave, ilayer};
}

std::vector<float> orientation_histogram(const GrayImage& img, int x, int y, int radius, double sigma) {
  std::vector<float> hist(kOriBins, 0.f);
  const double expf_scale = -1.0 / (2.0 * sigma * sigma);
  for (int i = -radius; i <= radius; ++i) {
    const int yy = y + i;
    if (yy <= 0 || yy >= img.height() - 1) continue;
    for (int j = -radius; j <= radius; ++j) {
      const int xx = x + j;
      if (xx <= 0 || xx >= img.width() - 1) continue;
      const double dx = img.at(xx + 1, yy) - img.at(xx - 1, yy);
      const double dy = img.at(xx, yy + 1) - img.at(xx, yy - 1);
      const double w = std::exp((i * i + j * j) * expf_scale);
      const double mag = std::sqrt(dx * dx + dy * dy);
      const double ang = wrap_angle(std::atan2(dy, dx));
      int bin = static_cast<int>(std::lround(ang * kOriBins / kTwoPi));
      if (bin >= kOriBins) bin -= kOriBins;
      hist[bin] += static_cast<float>(w * mag);
    }
  }
  std::vector<float> smooth(kOriBins);
  for (int i = 0; i < kOriBins; ++i) {
    auto at = [&](int k) { return hist[(k + kOriBins) % kOriBins]; };
    smooth[i] = (at(i - 2) + at(i + 2)) * (1.f / 16.f) + (at(i - 1) + at(i + 1)) * (4.f / 16.f) +
                at(i) * (6.f / 16.f);
  }
  return smooth;
}

Descriptor describe(const GrayImage& img, double kx, double ky, double scale, double angle) {
  constexpr int d = kDescWidth;
  constexpr int n = kDescBins;
  const double hist_width = kDescScaleFactor * scale;
  const int radius = static_cast<int>(std::lround(hist_width * std::numbers::sqrt2 * (d + 1) * 0.5));
  const double cos_t = std::cos(angle) / hist_width;
  const double sin_t = std::sin(angle) / hist_width;
  const double exp_scale = -1.0 / (d * d * 0.5);
  const double bins_per_rad = n / kTwoPi;
  const int cx = static_cast<int>(std::lround(kx));
  const int cy = static_cast<int>(std::lround(ky));

  // (d + 2) x (d + 2) x (n + 2) with one guard cell on each side.
  std::vector<double> hist(static_cast<std::size_t>((d + 2) * (d + 2) * (n + 2)), 0.0);
  auto cell = [&](int r, int c, int o) -> double& {
    return hist[static_cast<std::size_t>(((r + 1) * (d + 2) + (c + 1)) * (n + 2) + o)];
  };

  for (int i = -radius; i <= radius; ++i) {
    for (int j = -radius; j <= radius; ++j) {
      const double c_rot = j * cos_t + i * sin_t;
      const double r_rot = -j * sin_t + i * cos_t;
      const double rbin = r_rot + d / 2.0 - 0.5;
      const double cbin = c_rot + d / 2.0 - 0.5;
      const int xx = cx + j;
      const int yy = cy + i;
      if (!(rbin > -1 && rbin < d && cbin > -1 && cbin < d)) continue;
      if (xx <= 0 || xx >= img.width() - 1 || yy <= 0 || yy >= img.height() - 1) continue;
      const double dx = img.at(xx + 1, yy) - img.at(xx - 1, yy);
      const double dy = img.at(xx, yy + 1) - img.at(xx, yy - 1);
      const double mag = std::sqrt(dx * dx + dy * dy) * std::exp((c_rot * c_rot + r_rot * r_rot) * exp_scale);
      double obin = (std::atan2(dy, dx) - angle) * bins_per_rad;
      obin = std::fmod(obin, double(n));
      if (obin < 0) obin += n;

      const int r0 = static_cast<int>(std::floor(rbin));
      const int c0 = static_cast<int>(std::floor(cbin));
      int o0 = static_cast<int>(std::floor(obin));
      const double fr = rbin - r0;
      const double fc = cbin - c0;
      const double fo = obin - o0;
      if (o0 >= n) o0 -= n;
      for (int dr = 0; dr <= 1; ++dr) {
        const double wr = dr ? fr : 1.0 - fr;
        for (int dc = 0; dc <= 1; ++dc) {
          const double wc = dc ? fc : 1.0 - fc;
          for (int dob = 0; dob <= 1; ++dob) {
            const double wo = dob ? fo : 1.0 - fo;
            cell(r0 + dr, c0 + dc, (o0 + dob) % n) += mag * wr * wc * wo;
          }
        }
      }
    }
  }

  Descriptor desc;
  std::size_t k = 0;
  for (int r = 0; r < d; ++r) {
    for (int c = 0; c < d; ++c) {
      for (int o = 0; o < n; ++o) desc.values[k++] = static_cast<float>(cell(r, c, o));
    }
  }

  auto normalise = [&desc]() {
    double norm = 0;
    for (float v : desc.values) norm += double(v) * v;
    norm = std::sqrt(norm);
    if (norm <= 0) return false;
    for (float& v : desc.values) v = static_cast<float>(v / norm);
    return true;
  };
  if (!normalise()) {
    // Flat neighbourhood: no gradient evidence, fall back to the uniform unit vector.
    desc.values.fill(static_cast<float>(1.0 / std::sqrt(128.0)));
    return desc;
  }
  for (float& v : desc.values) v = std::min(v, static_cast<float>(kDescMagThreshold));
  normalise();
  return desc;
}

void sort_keypoints(std::vector<Keypoint>& kps) {
  std::sort(kps.begin(), kps.end(), [](const Keypoint& a, const Keypoint& b) {
    if (a.octave != b.octave) return a.octave < b.octave;
    if (a.y != b.y) return a.y < b.y;
    if (a.x != b.x) return a.x < b.x;
    if (a.scale != b.scale) return a.scale < b.scale;
    return a.orientation < b.orientation;
  });
}

}  // namespace

GrayImage gaussian_blur(const GrayImage& image, double sigma) {
  if (sigma <= 0) return image;
  const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  const int w = image.width();
  const int h = image.height();
  GrayImage tmp(w, h);
  std::vector<double> line(std::max(w, h) + 2 * radius);
  for (int y = 0; y < h; ++y) {
    for (int i = -radius; i < w + radius; ++i) line[i + radius] = image.at(reflect101(i, w), y);
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = 0; k <= 2 * radius; ++k) acc += kernel[k] * line[x + k];
      tmp.at(x, y) = static_cast<float>(acc);
    }
  }
  GrayImage out(w, h);
  for (int x = 0; x < w; ++x) {
    for (int i = -radius; i < h + radius; ++i) line[i + radius] = tmp.at(x, reflect101(i, h));
    for (int y = 0; y < h; ++y) {
      double acc = 0;
      for (int k = 0; k <= 2 * radius; ++k) acc += kernel[k] * line[y + k];
      out.at(x, y) = static_cast<float>(acc);
    }
  }
  return out;
}

ScaleSpace::ScaleSpace(const GrayImage& image, const SiftOptions& options) : options_(options) {
  if (image.width() < 32 || image.height() < 32) {
    throw FeatureError("image too small for keypoint detection (need at least 32x32)");
  }
  if (options.scales_per_octave < 1 || options.octaves < 1) {
    throw std::invalid_argument("SiftOptions: octaves and scales_per_octave must be positive");
  }
  const int s = options.scales_per_octave;
  const int n_oct = octave_count(image.width(), image.height(), options.octaves);
  const double k = std::pow(2.0, 1.0 / s);

  std::vector<double> incremental(s + 3);
  incremental[0] = options.sigma;
  for (int i = 1; i < s + 3; ++i) {
    const double prev = std::pow(k, i - 1) * options.sigma;
    const double total = prev * k;
    incremental[i] = std::sqrt(total * total - prev * prev);
  }

  gauss_.resize(n_oct);
  dog_.resize(n_oct);
  for (int o = 0; o < n_oct; ++o) {
    auto& layers = gauss_[o];
    layers.reserve(s + 3);
    if (o == 0) {
      const double base = std::sqrt(std::max(0.01, options.sigma * options.sigma -
                                                       options.input_blur * options.input_blur));
      layers.push_back(gaussian_blur(image, base));
    } else {
      layers.push_back(half_size(gauss_[o - 1][s]));
    }
    for (int i = 1; i < s + 3; ++i) layers.push_back(gaussian_blur(layers.back(), incremental[i]));
    for (int i = 0; i < s + 2; ++i) dog_[o].push_back(subtract(layers[i + 1], layers[i]));
  }
}

std::vector<Keypoint> detect_keypoints(const ScaleSpace& space, const BinaryMask* mask) {
  const SiftOptions& opt = space.options();
  const int s = opt.scales_per_octave;
  const double threshold = 0.5 * opt.contrast_thresh / s;
  std::vector<Keypoint> keypoints;

  for (int o = 0; o < space.octaves(); ++o) {
    for (int layer = 1; layer <= s; ++layer) {
      const GrayImage& prev = space.dog(o, layer - 1);
      const GrayImage& cur = space.dog(o, layer);
      const GrayImage& next = space.dog(o, layer + 1);
      for (int y = kBorder; y < cur.height() - kBorder; ++y) {
        for (int x = kBorder; x < cur.width() - kBorder; ++x) {
          const float v = cur.at(x, y);
          if (std::abs(v) <= threshold) continue;
          bool is_max = v > 0;
          bool is_min = v < 0;
          for (int dl = -1; dl <= 1 && (is_max || is_min); ++dl) {
            const GrayImage& img = dl < 0 ? prev : (dl > 0 ? next : cur);
            for (int dy = -1; dy <= 1 && (is_max || is_min); ++dy) {
              for (int dx = -1; dx <= 1; ++dx) {
                if (dl == 0 && dx == 0 && dy == 0) continue;
                const float u = img.at(x + dx, y + dy);
                if (u > v) is_max = false;
                if (u < v) is_min = false;
              }
            }
          }
          if (!is_max && !is_min) continue;

          Extremum e{o, layer, x, y};
          Keypoint kp;
          if (!refine_extremum(space, e, kp)) continue;
          if (mask != nullptr) {
            const int mx = static_cast<int>(std::lround(kp.x));
            const int my = static_cast<int>(std::lround(kp.y));
            if (!mask->contains(mx, my) || !mask->at(mx, my)) continue;
          }

          const GrayImage& g = space.gaussian(o, e.layer);
          const double scale_oct = kp.scale / std::ldexp(1.0, o);
          const auto hist = orientation_histogram(
              g, e.x, e.y, static_cast<int>(std::lround(kOriRadiusFactor * scale_oct)),
              kOriSigmaFactor * scale_oct);
          const float peak = *std::max_element(hist.begin(), hist.end());
          for (int b = 0; b < kOriBins; ++b) {
            const float l = hist[(b + kOriBins - 1) % kOriBins];
            const float r = hist[(b + 1) % kOriBins];
            const float c = hist[b];
            if (!(c > l && c > r && c >= kOriPeakRatio * peak)) continue;
            const double offset = 0.5 * (l - r) / (l - 2.0 * c + r);
            Keypoint oriented = kp;
            oriented.orientation = wrap_angle((b + offset) * kTwoPi / kOriBins);
            keypoints.push_back(oriented);
          }
        }
      }
    }
  }

  if (opt.max_keypoints > 0 && keypoints.size() > opt.max_keypoints) {
    sort_keypoints(keypoints);
    std::stable_sort(keypoints.begin(), keypoints.end(),
                     [](const Keypoint& a, const Keypoint& b) { return a.response > b.response; });
    keypoints.resize(opt.max_keypoints);
  }
  sort_keypoints(keypoints);
  return keypoints;
}

std::vector<Keypoint> detect_keypoints(const GrayImage& image, const SiftOptions& options,
                                       const BinaryMask* mask) {
  const ScaleSpace space(image, options);
  return detect_keypoints(space, mask);
}

DescriptorBatch compute_descriptors(const ScaleSpace& space, std::span<const Keypoint> keypoints) {
  DescriptorBatch batch;
  const GrayImage& base = space.gaussian(0, 0);
  for (const Keypoint& kp : keypoints) {
    if (!(kp.x >= 0 && kp.y >= 0 && kp.x <= base.width() - 1 && kp.y <= base.height() - 1) ||
        !(kp.scale > 0)) {
      ++batch.skipped;
      continue;
    }
    double scale_oct = 0;
    const auto [octave, layer] = sampling_layer(space, kp, scale_oct);
    const double f = std::ldexp(1.0, octave);
    batch.descriptors.push_back(
        describe(space.gaussian(octave, layer), kp.x / f, kp.y / f, scale_oct, kp.orientation));
    batch.keypoints.push_back(kp);
  }
  return batch;
}

DescriptorBatch compute_descriptors(const GrayImage& image, std::span<const Keypoint> keypoints,
                                    const SiftOptions& options) {
  const ScaleSpace space(image, options);
  return compute_descriptors(space, keypoints);
}

DescriptorBatch detect_and_describe(const GrayImage& image, const SiftOptions& options,
                                    const BinaryMask* mask) {
  const ScaleSpace space(image, options);
  const auto keypoints = detect_keypoints(space, mask);
  return compute_descriptors(space, keypoints);
}

namespace {

template <class T>
void put_le(std::ofstream& out, T value) {
  static_assert(sizeof(T) == 4);
  std::uint32_t bits;
  std::memcpy(&bits, &value, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  out.write(reinterpret_cast<const char*>(&bits), 4);
}

template <class T>
T get_le(std::ifstream& in) {
  std::uint32_t bits = 0;
  in.read(reinterpret_cast<char*>(&bits), 4);
  if (!in) throw std::runtime_error("feature dump truncated");
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  T value;
  std::memcpy(&value, &bits, 4);
  return value;
}

}  // namespace

void write_feature_dump(const std::filesystem::path& path, std::span<const Keypoint> keypoints,
                        std::span<const Descriptor> descriptors) {
  if (keypoints.size() != descriptors.size()) {
    throw std::invalid_argument("write_feature_dump: keypoint/descriptor count mismatch");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  put_le(out, static_cast<std::uint32_t>(keypoints.size()));
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    put_le(out, keypoints[i].x);
    put_le(out, keypoints[i].y);
    put_le(out, keypoints[i].scale);
    put_le(out, keypoints[i].orientation);
    for (float v : descriptors[i].values) put_le(out, v);
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

DescriptorBatch read_feature_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  DescriptorBatch batch;
  const auto count = get_le<std::uint32_t>(in);
  batch.keypoints.reserve(count);
  batch.descriptors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Keypoint kp;
    kp.x = get_le<float>(in);
    kp.y = get_le<float>(in);
    kp.scale = get_le<float>(in);
    kp.orientation = get_le<float>(in);
    Descriptor d;
    for (float& v : d.values) v = get_le<float>(in);
    batch.keypoints.push_back(kp);
    batch.descriptors.push_back(d);
  }
  return batch;
}

}  // namespace vcore
