#pragma once

// PNG/TIFF reading and writing through OpenCV. Mats keep OpenCV's BGR
// channel order; conversion to RGB happens when tensors are built.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace nucleisam {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit 3-channel image. Grayscale is replicated, alpha dropped, 16-bit
/// input rescaled.
inline cv::Mat read_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw ImageIoError("cannot read image " + path.string());
  if (m.depth() == CV_16U) m.convertTo(m, CV_8U, 1.0 / 257.0);
  if (m.depth() != CV_8U) throw ImageIoError("unsupported pixel depth in " + path.string());
  if (m.channels() == 1) {
    cv::Mat out;
    cv::merge(std::vector<cv::Mat>{m, m, m}, out);
    return out;
  }
  if (m.channels() == 4) {
    cv::Mat out(m.size(), CV_8UC3);
    const int from_to[] = {0, 0, 1, 1, 2, 2};
    cv::mixChannels(&m, 1, &out, 1, from_to, 3);
    return out;
  }
  if (m.channels() != 3) throw ImageIoError("unsupported channel count in " + path.string());
  return m;
}

/// Single-channel {0, 1} mask: any nonzero label in any channel is
/// foreground, which covers instance-labelled and multi-class masks.
inline cv::Mat read_mask(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw ImageIoError("cannot read mask " + path.string());
  cv::Mat any = cv::Mat::zeros(m.size(), CV_8U);
  std::vector<cv::Mat> planes;
  cv::split(m, planes);
  for (const auto& p : planes) cv::bitwise_or(any, p != 0, any);
  return any / 255;
}

inline void write_png(const std::filesystem::path& path, const cv::Mat& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw ImageIoError("cannot write " + path.string());
}

}  // namespace nucleisam
