#include "thumbnail.hpp"

#include <algorithm>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "satellite/error.hpp"

namespace satellite::curation {

namespace fs = std::filesystem;

std::string make_thumbnail(const fs::path& image, int max_side, int quality) {
  require(max_side >= 1, ErrorKind::parameter, "thumbnail size must be positive");
  if (!fs::exists(image)) fail(ErrorKind::lookup, "image not found: " + image.string());
  cv::Mat img = cv::imread(image.string(), cv::IMREAD_COLOR);
  if (img.empty()) fail(ErrorKind::format, "cannot decode image " + image.string());
  const int longest = std::max(img.cols, img.rows);
  if (longest > max_side) {
    const double s = static_cast<double>(max_side) / longest;
    const cv::Size size(std::max(1, static_cast<int>(std::lround(img.cols * s))),
                        std::max(1, static_cast<int>(std::lround(img.rows * s))));
    cv::Mat small;
    cv::resize(img, small, size, 0, 0, cv::INTER_AREA);
    img = small;
  }
  std::vector<unsigned char> buf;
  if (!cv::imencode(".jpg", img, buf, {cv::IMWRITE_JPEG_QUALITY, quality})) {
    fail(ErrorKind::format, "cannot encode thumbnail for " + image.string());
  }
  return std::string(buf.begin(), buf.end());
}

std::string ThumbnailCache::get(const fs::path& image) {
  std::error_code ec;
  const auto stamp = fs::last_write_time(image, ec);
  const auto key = image.string() + "|" + (ec ? "" : std::to_string(stamp.time_since_epoch().count()));
  if (auto hit = cache_.get(key)) return *hit;
  auto jpeg = make_thumbnail(image, max_side_);
  cache_.put(key, jpeg);
  return jpeg;
}

}  // namespace satellite::curation
