#pragma once

// Datasets (MNIST IDX, CIFAR-10 binary batches, synthetic M2NIST), the
// preprocessing that turns u8 images into model inputs, and PGM/PPM output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpw/dpwn.hpp"
#include "dpw/rng.hpp"
#include "dpw/tensor.hpp"

namespace dpw {

struct LabeledDataset {
  std::size_t channels = 1, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // image-major, each (C, H, W)
  std::vector<std::int64_t> labels;  // first (or only) label of each image
  std::vector<std::vector<std::int64_t>> label_sets;  // multilabel datasets only
  std::string split = "test";

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }

  std::span<const std::uint8_t> image(std::size_t i) const {
    require(i < size(), Errc::out_of_range,
            "image index " + std::to_string(i) + " out of range for " + std::to_string(size()) + " images");
    return std::span<const std::uint8_t>(pixels).subspan(i * image_size(), image_size());
  }
};

// ---- IDX ------------------------------------------------------------------------

namespace detail {

inline std::uint32_t get_be32(const char* p) {
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(p[0])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(p[1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(p[2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(p[3]));
}

inline void put_be32(std::vector<char>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

struct IdxArray {
  std::vector<std::size_t> dims;
  const char* data = nullptr;
};

// Parses an unsigned-byte IDX file whose rank is one of `ranks`.
inline IdxArray parse_idx(const std::vector<char>& bytes, std::initializer_list<std::size_t> ranks,
                          const std::string& what) {
  require(bytes.size() >= 4, Errc::truncated, what + ": file shorter than the IDX magic");
  const std::uint32_t magic = get_be32(bytes.data());
  const std::size_t rank = magic & 0xff;
  require((magic & 0xffffff00u) == 0x00000800u && std::find(ranks.begin(), ranks.end(), rank) != ranks.end(),
          Errc::bad_magic, what + ": unexpected IDX magic");
  require(bytes.size() >= 4 + 4 * rank, Errc::truncated, what + ": truncated IDX header");
  IdxArray a;
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::uint32_t d = get_be32(bytes.data() + 4 + 4 * i);
    require(d >= 1, Errc::malformed_header, what + ": IDX dimension is zero");
    total *= d;
    require(total <= (std::uint64_t{1} << 36), Errc::malformed_header, what + ": IDX dimensions too large");
    a.dims.push_back(d);
  }
  const std::size_t header = 4 + 4 * rank;
  require(bytes.size() - header >= total, Errc::truncated, what + ": IDX payload truncated");
  require(bytes.size() - header == total, Errc::malformed_header, what + ": trailing bytes after IDX payload");
  a.data = bytes.data() + header;
  return a;
}

}  // namespace detail

/// Images: magic 0x00000803 (count, rows, cols). Labels: 0x00000801 (count) or,
/// for multilabel sets, 0x00000802 (count, classes) holding multi-hot rows.
inline LabeledDataset decode_idx(const std::vector<char>& image_bytes, const std::vector<char>& label_bytes) {
  const auto img = detail::parse_idx(image_bytes, {3}, "images");
  const auto lab = detail::parse_idx(label_bytes, {1, 2}, "labels");
  require(img.dims[0] == lab.dims[0], Errc::count_mismatch,
          "image count " + std::to_string(img.dims[0]) + " != label count " + std::to_string(lab.dims[0]));
  LabeledDataset ds;
  ds.channels = 1;
  ds.height = img.dims[1];
  ds.width = img.dims[2];
  ds.pixels.assign(reinterpret_cast<const std::uint8_t*>(img.data),
                   reinterpret_cast<const std::uint8_t*>(img.data) + img.dims[0] * ds.height * ds.width);
  const auto* lp = reinterpret_cast<const std::uint8_t*>(lab.data);
  if (lab.dims.size() == 1) {
    ds.labels.assign(lp, lp + lab.dims[0]);
  } else {
    const std::size_t classes = lab.dims[1];
    for (std::size_t i = 0; i < lab.dims[0]; ++i) {
      std::vector<std::int64_t> set;
      for (std::size_t c = 0; c < classes; ++c)
        if (lp[i * classes + c]) set.push_back(static_cast<std::int64_t>(c));
      ds.labels.push_back(set.empty() ? -1 : set.front());
      ds.label_sets.push_back(std::move(set));
    }
  }
  return ds;
}

inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  return decode_idx(detail::read_file(images_path), detail::read_file(labels_path));
}

inline void write_idx(const LabeledDataset& ds, const std::string& images_path, const std::string& labels_path,
                      std::size_t classes = 10) {
  require(ds.channels == 1, Errc::invalid_argument, "IDX images are single-channel");
  std::vector<char> img;
  detail::put_be32(img, 0x00000803);
  detail::put_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.height));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.width));
  img.insert(img.end(), ds.pixels.begin(), ds.pixels.end());
  std::vector<char> lab;
  if (ds.label_sets.empty()) {
    detail::put_be32(lab, 0x00000801);
    detail::put_be32(lab, static_cast<std::uint32_t>(ds.size()));
    for (auto l : ds.labels) lab.push_back(static_cast<char>(l));
  } else {
    detail::put_be32(lab, 0x00000802);
    detail::put_be32(lab, static_cast<std::uint32_t>(ds.size()));
    detail::put_be32(lab, static_cast<std::uint32_t>(classes));
    for (const auto& set : ds.label_sets) {
      std::vector<char> row(classes, 0);
      for (auto c : set) row.at(static_cast<std::size_t>(c)) = 1;
      lab.insert(lab.end(), row.begin(), row.end());
    }
  }
  detail::write_file(images_path, img);
  detail::write_file(labels_path, lab);
}

// ---- CIFAR-10 binary ----------------------------------------------------------------

inline constexpr std::size_t kCifarRecord = 3073;

inline void append_cifar10(LabeledDataset& ds, const std::vector<char>& bytes, const std::string& what) {
  require(!bytes.empty() && bytes.size() % kCifarRecord == 0, Errc::truncated,
          what + ": length " + std::to_string(bytes.size()) + " is not a positive multiple of 3073");
  ds.channels = 3;
  ds.height = ds.width = 32;
  for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord) {
    const auto label = static_cast<std::uint8_t>(bytes[off]);
    require(label < 10, Errc::out_of_range, what + ": label byte " + std::to_string(label) + " outside [0,10)");
    ds.labels.push_back(label);
    ds.pixels.insert(ds.pixels.end(), reinterpret_cast<const std::uint8_t*>(bytes.data() + off + 1),
                     reinterpret_cast<const std::uint8_t*>(bytes.data() + off + kCifarRecord));
  }
}

inline LabeledDataset load_cifar10_bin(const std::vector<std::string>& paths) {
  require(!paths.empty(), Errc::invalid_argument, "no CIFAR-10 batch files given");
  LabeledDataset ds;
  for (const auto& p : paths) append_cifar10(ds, detail::read_file(p), p);
  return ds;
}

inline void write_cifar10_bin(const LabeledDataset& ds, const std::string& path) {
  require(ds.channels == 3 && ds.height == 32 && ds.width == 32, Errc::invalid_argument,
          "CIFAR-10 records are 3x32x32");
  std::vector<char> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.push_back(static_cast<char>(ds.labels[i]));
    const auto img = ds.image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  detail::write_file(path, out);
}

// ---- preprocessing ------------------------------------------------------------------

// u8 -> real: x * scale, then optional per-channel (x - mean) / std.
struct Preprocess {
  double scale = 1.0 / 255.0;
  std::vector<double> mean;
  std::vector<double> std;

  float apply(std::uint8_t v, std::size_t c) const {
    double x = v * scale;
    if (!mean.empty()) x = (x - mean.at(c)) / std.at(c);
    return static_cast<float>(x);
  }

  std::uint8_t invert(float x, std::size_t c) const {
    double v = x;
    if (!mean.empty()) v = v * std.at(c) + mean.at(c);
    return static_cast<std::uint8_t>(std::clamp(std::lround(v / scale), 0L, 255L));
  }

  void validate(std::size_t channels) const {
    require(scale > 0.0 && std::isfinite(scale), Errc::invalid_argument, "preprocess scale must be positive");
    require(mean.size() == std.size() && (mean.empty() || mean.size() == channels), Errc::invalid_argument,
            "preprocess mean/std must both list one value per channel");
    for (double s : std) require(s > 0.0, Errc::invalid_argument, "preprocess std must be positive");
  }
};

/// Nearest-neighbour resize of one (C, H, W) u8 image.
inline std::vector<std::uint8_t> resize_nearest(std::span<const std::uint8_t> img, std::size_t c, std::size_t h,
                                                std::size_t w, std::size_t oh, std::size_t ow) {
  std::vector<std::uint8_t> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        out[(ch * oh + y) * ow + x] = img[(ch * h + y * h / oh) * w + x * w / ow];
  return out;
}

/// Model-ready images with labels.
struct TensorDataset {
  std::vector<Tensor> images;
  std::vector<std::int64_t> labels;

  std::size_t size() const { return images.size(); }
};

inline Tensor to_tensor(const LabeledDataset& ds, std::size_t i, const Preprocess& pre,
                        std::optional<std::pair<std::size_t, std::size_t>> resize = {}) {
  auto img = ds.image(i);
  std::size_t h = ds.height, w = ds.width;
  std::vector<std::uint8_t> resized;
  if (resize && (resize->first != h || resize->second != w)) {
    resized = resize_nearest(img, ds.channels, h, w, resize->first, resize->second);
    img = resized;
    h = resize->first;
    w = resize->second;
  }
  Tensor t({ds.channels, h, w});
  for (std::size_t c = 0; c < ds.channels; ++c)
    for (std::size_t p = 0; p < h * w; ++p) t[c * h * w + p] = pre.apply(img[c * h * w + p], c);
  return t;
}

inline TensorDataset to_tensor_dataset(const LabeledDataset& ds, const Preprocess& pre,
                                       std::optional<std::pair<std::size_t, std::size_t>> resize = {}) {
  pre.validate(ds.channels);
  TensorDataset out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.images.push_back(to_tensor(ds, i, pre, resize));
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

// ---- M2NIST -------------------------------------------------------------------------

struct DigitBox {
  std::size_t y = 0, x = 0, h = 0, w = 0;

  bool overlaps(const DigitBox& o) const {
    return y < o.y + o.h && o.y < y + h && x < o.x + o.w && o.x < x + w;
  }
};

struct M2nistDataset {
  LabeledDataset data;
  std::vector<std::vector<DigitBox>> boxes;
  std::vector<std::vector<std::size_t>> sources;  // MNIST indices pasted into each image
};

/// Pastes 1-3 MNIST digits at non-overlapping positions onto a blank canvas.
/// Pixels are copied unchanged; labels are the set of pasted classes.
inline M2nistDataset gen_m2nist(const LabeledDataset& mnist, std::size_t count, std::uint64_t seed,
                                std::size_t canvas_h = 64, std::size_t canvas_w = 84) {
  require(mnist.size() > 0 && mnist.channels == 1, Errc::invalid_argument, "gen_m2nist needs a non-empty MNIST set");
  require(canvas_h >= mnist.height && canvas_w >= mnist.width, Errc::invalid_argument,
          "canvas smaller than one digit");
  M2nistDataset out;
  out.data.channels = 1;
  out.data.height = canvas_h;
  out.data.width = canvas_w;
  out.data.split = mnist.split;
  out.data.pixels.assign(count * canvas_h * canvas_w, 0);
  const std::size_t dh = mnist.height, dw = mnist.width;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i));
    std::vector<DigitBox> boxes;
    // Bounded retries per placement; on failure draw a new digit count.
    for (bool placed = false; !placed;) {
      const std::size_t digits = 1 + rng.index(3);
      boxes.clear();
      placed = true;
      for (std::size_t d = 0; d < digits && placed; ++d) {
        placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
          DigitBox b{rng.index(canvas_h - dh + 1), rng.index(canvas_w - dw + 1), dh, dw};
          if (std::none_of(boxes.begin(), boxes.end(), [&](const DigitBox& o) { return o.overlaps(b); })) {
            boxes.push_back(b);
            placed = true;
          }
        }
      }
    }
    std::vector<std::size_t> src;
    std::vector<std::int64_t> set;
    std::uint8_t* canvas = out.data.pixels.data() + i * canvas_h * canvas_w;
    for (const DigitBox& b : boxes) {
      const std::size_t s = rng.index(mnist.size());
      src.push_back(s);
      const auto digit = mnist.image(s);
      for (std::size_t y = 0; y < dh; ++y)
        std::copy_n(digit.begin() + static_cast<std::ptrdiff_t>(y * dw), dw, canvas + (b.y + y) * canvas_w + b.x);
      set.push_back(mnist.labels[s]);
    }
    std::sort(set.begin(), set.end());
    set.erase(std::unique(set.begin(), set.end()), set.end());
    out.data.labels.push_back(set.front());
    out.data.label_sets.push_back(std::move(set));
    out.boxes.push_back(std::move(boxes));
    out.sources.push_back(std::move(src));
  }
  return out;
}

// ---- PGM / PPM ----------------------------------------------------------------------

/// (H, W) -> binary PGM (P5); (3, H, W) -> binary PPM (P6). Values in [0, 1].
inline std::vector<char> encode_pnm(const Tensor& t) {
  const bool color = t.rank() == 3;
  require(t.rank() == 2 || (color && t.dim(0) == 3), Errc::shape_mismatch,
          "PNM output needs (H,W) or (3,H,W), got " + shape_string(t.shape()));
  const std::size_t h = color ? t.dim(1) : t.dim(0), w = color ? t.dim(2) : t.dim(1);
  for (float v : t.data())
    require(v >= 0.0f && v <= 1.0f, Errc::out_of_range, "PNM values must lie in [0,1]");
  const std::string header = std::string(color ? "P6" : "P5") + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<char> out(header.begin(), header.end());
  auto q = [](float v) { return static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0f))); };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (color)
        for (std::size_t c = 0; c < 3; ++c) out.push_back(q(t.at(c, y, x)));
      else
        out.push_back(q(t.at(y, x)));
    }
  return out;
}

inline void write_pnm(const std::string& path, const Tensor& t) { detail::write_file(path, encode_pnm(t)); }

/// Reads a binary PGM/PPM (maxval 255) into [0, 1]: (H, W) or (3, H, W).
inline Tensor decode_pnm(const std::vector<char>& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string s;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) s += bytes[pos++];
    return s;
  };
  auto number = [&]() {
    const std::string s = token();
    require(!s.empty() && s.size() < 10 && std::all_of(s.begin(), s.end(), ::isdigit), Errc::malformed_header,
            "PNM header number expected");
    return static_cast<std::size_t>(std::stoul(s));
  };
  const std::string magic = token();
  require(magic == "P5" || magic == "P6", Errc::bad_magic, "not a binary PGM/PPM");
  const std::size_t w = number(), h = number(), maxval = number();
  require(w >= 1 && h >= 1 && maxval == 255, Errc::malformed_header, "PNM must have positive extents and maxval 255");
  ++pos;  // single whitespace before the raster
  const bool color = magic == "P6";
  const std::size_t n = h * w * (color ? 3 : 1);
  require(pos <= bytes.size() && bytes.size() - pos >= n, Errc::truncated, "PNM raster truncated");
  Tensor t(color ? Shape{3, h, w} : Shape{h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (color)
        for (std::size_t c = 0; c < 3; ++c)
          t.at(c, y, x) = static_cast<std::uint8_t>(bytes[pos + (y * w + x) * 3 + c]) / 255.0f;
      else
        t.at(y, x) = static_cast<std::uint8_t>(bytes[pos + y * w + x]) / 255.0f;
    }
  return t;
}

inline Tensor read_pnm(const std::string& path) { return decode_pnm(detail::read_file(path)); }

// ---- dataset manifests --------------------------------------------------------------

// {"format": "idx"|"cifar10", "images": ..., "labels": ..., "files": [...],
//  "split": ..., "preprocess": {"scale", "mean", "std"}}
// Relative paths resolve against the manifest's directory.
struct DatasetManifest {
  std::string format;
  std::string images, labels;
  std::vector<std::string> files;
  std::string split = "test";
  Preprocess preprocess;
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j{{"format", m.format}, {"split", m.split}};
  if (m.format == "idx") {
    j["images"] = m.images;
    j["labels"] = m.labels;
  } else {
    j["files"] = m.files;
  }
  nlohmann::json pre{{"scale", m.preprocess.scale}};
  if (!m.preprocess.mean.empty()) {
    pre["mean"] = m.preprocess.mean;
    pre["std"] = m.preprocess.std;
  }
  j["preprocess"] = pre;
  return j;
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::io, "cannot open manifest '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::malformed_header, "manifest '" + path + "' is not valid JSON: " + e.what());
  }
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).string();
  };
  DatasetManifest m;
  try {
    m.format = j.at("format").get<std::string>();
    if (j.contains("split")) m.split = j["split"].get<std::string>();
    if (m.format == "idx") {
      m.images = resolve(j.at("images").get<std::string>());
      m.labels = resolve(j.at("labels").get<std::string>());
    } else if (m.format == "cifar10") {
      for (const auto& f : j.at("files")) m.files.push_back(resolve(f.get<std::string>()));
    } else {
      throw Error(Errc::malformed_header, "manifest format must be 'idx' or 'cifar10'");
    }
    if (j.contains("preprocess")) {
      const auto& p = j["preprocess"];
      if (p.contains("scale")) m.preprocess.scale = p["scale"].get<double>();
      if (p.contains("mean")) m.preprocess.mean = p["mean"].get<std::vector<double>>();
      if (p.contains("std")) m.preprocess.std = p["std"].get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::malformed_header, "manifest '" + path + "': " + e.what());
  }
  return m;
}

inline LabeledDataset load_dataset(const DatasetManifest& m) {
  LabeledDataset ds = m.format == "idx" ? load_idx(m.images, m.labels) : load_cifar10_bin(m.files);
  ds.split = m.split;
  m.preprocess.validate(ds.channels);
  return ds;
}

}  // namespace dpw
