#ifndef SCONE_IMAGE_HPP_
#define SCONE_IMAGE_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "scone/error.hpp"

#ifdef SCONE_HAVE_OPENCV
#include <opencv2/imgcodecs.hpp>
#endif

namespace scone {

/// 8-bit interleaved RGB image.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t* px(int x, int y) { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* px(int x, int y) const {
    return &rgb[(static_cast<std::size_t>(y) * width + x) * 3];
  }
  bool empty() const { return rgb.empty(); }
  bool operator==(const Image&) const = default;
};

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageLoadError("cannot write " + path);
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
}

namespace detail {
inline void skip_ppm_ws(std::istream& in) {
  for (;;) {
    int ch = in.peek();
    if (ch == '#') {
      std::string dummy;
      std::getline(in, dummy);
    } else if (ch == ' ' || ch == '\n' || ch == '\r' || ch == '\t') {
      in.get();
    } else {
      return;
    }
  }
}
}  // namespace detail

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageLoadError("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw ImageLoadError("not a binary PPM/PGM: " + path);
  int w = 0, h = 0, maxval = 0;
  detail::skip_ppm_ws(in);
  in >> w;
  detail::skip_ppm_ws(in);
  in >> h;
  detail::skip_ppm_ws(in);
  in >> maxval;
  in.get();
  if (!in || w <= 0 || h <= 0 || maxval != 255)
    throw ImageLoadError("bad PPM header: " + path);
  Image img(w, h);
  if (magic == "P6") {
    in.read(reinterpret_cast<char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  } else {
    std::vector<std::uint8_t> gray(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
    for (std::size_t i = 0; i < gray.size(); ++i)
      img.rgb[3 * i] = img.rgb[3 * i + 1] = img.rgb[3 * i + 2] = gray[i];
  }
  if (!in) throw ImageLoadError("truncated PPM: " + path);
  return img;
}

/// Decodes PPM/PGM natively; other formats need the OpenCV build.
inline Image read_image_file(const std::string& path) {
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return read_ppm(path);
#ifdef SCONE_HAVE_OPENCV
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw ImageLoadError("cannot decode " + path);
  Image img(bgr.cols, bgr.rows);
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<std::uint8_t>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      std::uint8_t* p = img.px(x, y);
      p[0] = row[3 * x + 2];
      p[1] = row[3 * x + 1];
      p[2] = row[3 * x + 0];
    }
  }
  return img;
#else
  throw ImageLoadError("no decoder for " + path + " (built without OpenCV)");
#endif
}

/**
 * @brief Resolves image references. `mem:<key>` references hit the in-memory
 * table (synthetic data); anything else is a filesystem path, tried verbatim
 * and then with common extensions appended.
 */
class ImageStore {
 public:
  static constexpr std::string_view kMemoryPrefix = "mem:";

  std::string put(const std::string& key, Image img) {
    memory_[key] = std::make_shared<const Image>(std::move(img));
    return std::string(kMemoryPrefix) + key;
  }

  std::shared_ptr<const Image> load(const std::string& ref) const {
    if (ref.starts_with(kMemoryPrefix)) {
      auto it = memory_.find(ref.substr(kMemoryPrefix.size()));
      if (it == memory_.end()) throw ImageLoadError("no in-memory image " + ref);
      return it->second;
    }
    namespace fs = std::filesystem;
    if (fs::is_regular_file(ref)) return std::make_shared<const Image>(read_image_file(ref));
    for (const char* ext : {".jpg", ".png", ".ppm", ".jpeg"}) {
      const std::string candidate = ref + ext;
      if (fs::is_regular_file(candidate))
        return std::make_shared<const Image>(read_image_file(candidate));
    }
    throw ImageLoadError("missing image " + ref);
  }

  std::size_t memory_size() const { return memory_.size(); }

 private:
  std::unordered_map<std::string, std::shared_ptr<const Image>> memory_;
};

}  // namespace scone

#endif  // SCONE_IMAGE_HPP_
