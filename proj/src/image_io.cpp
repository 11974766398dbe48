#include "vcore/image_io.hpp"

#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace vcore {

namespace {

Raster<Rgb> from_bgr(const cv::Mat& mat) {
  cv::Mat bgr;
  if (mat.channels() == 1) {
    cv::Mat tmp;
    cv::Mat src = mat;
    if (mat.depth() != CV_8U) mat.convertTo(src, CV_8U);
    cv::merge(std::vector<cv::Mat>{src, src, src}, tmp);
    bgr = tmp;
  } else if (mat.channels() == 4) {
    cv::Mat chans[4];
    cv::split(mat, chans);
    cv::merge(std::vector<cv::Mat>{chans[0], chans[1], chans[2]}, bgr);
  } else {
    bgr = mat;
  }
  if (bgr.depth() != CV_8U) throw std::runtime_error("only 8-bit rasters are supported");
  Raster<Rgb> out(bgr.cols, bgr.rows);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) out.at(x, y) = {row[x][2], row[x][1], row[x][0]};
  }
  return out;
}

cv::Mat to_bgr(const Raster<Rgb>& image) {
  cv::Mat mat(image.height(), image.width(), CV_8UC3);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = mat.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width(); ++x) {
      const Rgb p = image.at(x, y);
      row[x] = cv::Vec3b(p.b, p.g, p.r);
    }
  }
  return mat;
}

}  // namespace

SectionImage read_section(const std::filesystem::path& path) {
  const cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw std::runtime_error("cannot read image: " + path.string());
  SectionImage image;
  image.rgb = from_bgr(mat);

  const std::filesystem::path sidecar = path.string() + ".json";
  if (std::filesystem::exists(sidecar)) {
    std::ifstream in(sidecar);
    const auto meta = nlohmann::json::parse(in);
    image.mpp = meta.value("mpp", image.mpp);
    image.level = meta.value("level", image.level);
    image.section_index = meta.value("section_index", image.section_index);
  }
  image.validate();
  return image;
}

void write_png(const std::filesystem::path& path, const Raster<Rgb>& image) {
  if (!cv::imwrite(path.string(), to_bgr(image))) {
    throw std::runtime_error("cannot write image: " + path.string());
  }
}

void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask) {
  cv::Mat mat(mask.height(), mask.width(), CV_8UC1);
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) mat.at<std::uint8_t>(y, x) = mask.at(x, y) ? 255 : 0;
  }
  if (!cv::imwrite(path.string(), mat)) {
    throw std::runtime_error("cannot write mask: " + path.string());
  }
}

BinaryMask read_mask_png(const std::filesystem::path& path) {
  const cv::Mat mat = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (mat.empty()) throw std::runtime_error("cannot read mask: " + path.string());
  BinaryMask mask(mat.cols, mat.rows, 0);
  for (int y = 0; y < mat.rows; ++y) {
    for (int x = 0; x < mat.cols; ++x) mask.at(x, y) = mat.at<std::uint8_t>(y, x) >= 128 ? 1 : 0;
  }
  return mask;
}

void write_sidecar(const std::filesystem::path& image_path, const SectionImage& image) {
  nlohmann::json meta{{"mpp", image.mpp}, {"level", image.level}, {"section_index", image.section_index}};
  std::ofstream out(image_path.string() + ".json");
  out << meta.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write sidecar for " + image_path.string());
}

std::vector<std::uint8_t> encode_jpeg(const Raster<Rgb>& image, int quality) {
  std::vector<std::uint8_t> bytes;
  const std::vector<int> params{cv::IMWRITE_JPEG_QUALITY, quality};
  if (!cv::imencode(".jpg", to_bgr(image), bytes, params)) {
    throw std::runtime_error("jpeg encoding failed");
  }
  return bytes;
}

Raster<Rgb> decode_image(std::span<const std::uint8_t> bytes) {
  const cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  const cv::Mat mat = cv::imdecode(buf, cv::IMREAD_COLOR);
  if (mat.empty()) throw std::runtime_error("cannot decode image");
  return from_bgr(mat);
}

}  // namespace vcore
