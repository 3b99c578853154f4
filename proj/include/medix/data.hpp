#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "medix/rng.hpp"
#include "medix/tensor.hpp"

// Dataset ingestion: binary PGM (P5) / PPM (P6) decoding, bilinear resize with
// half-pixel centers, 0-1 normalization, synthetic blob datasets for desk-scale
// runs, and seeded stratified splits.

namespace medix {

template <typename Scalar>
struct Dataset {
  Tensor<Scalar> images;  // [N,H,W,C]
  std::vector<int> labels;
  Index num_classes = 0;

  Index size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  Index height() const { return images.dim(1); }
  Index width() const { return images.dim(2); }
  Index channels() const { return images.dim(3); }
};

template <typename Scalar>
Tensor<Scalar> gather_images(const Dataset<Scalar>& data, std::span<const Index> idx) {
  const Index h = data.height(), w = data.width(), c = data.channels();
  const Index sample = h * w * c;
  Tensor<Scalar> batch({static_cast<Index>(idx.size()), h, w, c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < data.size(), ErrorKind::data, "sample index out of range");
    std::copy(data.images.data() + idx[i] * sample, data.images.data() + (idx[i] + 1) * sample,
              batch.data() + static_cast<Index>(i) * sample);
  }
  return batch;
}

template <typename Scalar>
std::vector<int> gather_labels(const Dataset<Scalar>& data, std::span<const Index> idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = data.labels[static_cast<std::size_t>(idx[i])];
  return out;
}

// ---------------------------------------------------------------------------
// PGM / PPM (8-bit binary)
// ---------------------------------------------------------------------------

namespace detail {

inline int pnm_token(std::istream& in) {
  // Skips whitespace and '#' comments, then reads one non-negative integer.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  require(c != EOF && std::isdigit(c), ErrorKind::data, "malformed PNM header");
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    require(value <= 1 << 30, ErrorKind::data, "PNM header value out of range");
    c = in.get();
  }
  require(c == EOF || std::isspace(c), ErrorKind::data, "malformed PNM header");
  return value;
}

}  // namespace detail

/// Decodes a P5 (grayscale) or P6 (RGB) file into [H,W,1] or [H,W,3] with
/// values in [0,255]. Only 8-bit payloads (maxval <= 255) are accepted.
template <typename Scalar>
Tensor<Scalar> load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::data, "cannot open image: " + path);
  char p = 0, kind = 0;
  in.get(p);
  in.get(kind);
  require(p == 'P' && (kind == '5' || kind == '6'), ErrorKind::data, "unsupported image format in " + path);
  const Index w = detail::pnm_token(in);
  const Index h = detail::pnm_token(in);
  const int maxval = detail::pnm_token(in);
  require(w >= 1 && h >= 1, ErrorKind::data, "bad PNM dimensions in " + path);
  require(maxval > 0 && maxval <= 255, ErrorKind::data, "only 8-bit PNM supported: " + path);
  const Index channels = kind == '5' ? 1 : 3;
  std::vector<std::uint8_t> payload(static_cast<std::size_t>(w * h * channels));
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  require(in.gcount() == static_cast<std::streamsize>(payload.size()), ErrorKind::data,
          "truncated PNM payload in " + path);
  Tensor<Scalar> img({h, w, channels});
  for (Index i = 0; i < img.size(); ++i) img[i] = static_cast<Scalar>(payload[static_cast<std::size_t>(i)]);
  return img;
}

/// Writes [H,W,1] as P5 or [H,W,3] as P6; values are expected in [0,255] and
/// are rounded to the nearest byte.
template <typename Scalar>
void write_image(const std::string& path, const Tensor<Scalar>& img) {
  require(img.rank() == 3 && (img.dim(2) == 1 || img.dim(2) == 3), ErrorKind::shape,
          "write_image expects [H,W,1] or [H,W,3]");
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::data, "cannot open for write: " + path);
  out << (img.dim(2) == 1 ? "P5" : "P6") << "\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
  std::vector<std::uint8_t> payload(static_cast<std::size_t>(img.size()));
  for (Index i = 0; i < img.size(); ++i) {
    const double v = std::min(255.0, std::max(0.0, static_cast<double>(img[i])));
    payload[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v));
  }
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  require(static_cast<bool>(out), ErrorKind::data, "image write failed: " + path);
}

// ---------------------------------------------------------------------------
// Resize + normalize
// ---------------------------------------------------------------------------

/// Bilinear resampling with half-pixel centers (no corner alignment); border
/// samples clamp to the edge. Values stay within [min(input), max(input)].
template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& img, Index out_h, Index out_w) {
  require(img.rank() == 3, ErrorKind::shape, "resize expects [H,W,C]");
  require(out_h >= 1 && out_w >= 1, ErrorKind::shape, "target size must be positive");
  const Index h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor<Scalar> out({out_h, out_w, c});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (Index oy = 0; oy < out_h; ++oy) {
    const double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
    const Index y0 = static_cast<Index>(std::floor(fy));
    const double wy = fy - static_cast<double>(y0);
    const Index ya = std::min(h - 1, std::max<Index>(0, y0));
    const Index yb = std::min(h - 1, std::max<Index>(0, y0 + 1));
    for (Index ox = 0; ox < out_w; ++ox) {
      const double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
      const Index x0 = static_cast<Index>(std::floor(fx));
      const double wx = fx - static_cast<double>(x0);
      const Index xa = std::min(w - 1, std::max<Index>(0, x0));
      const Index xb = std::min(w - 1, std::max<Index>(0, x0 + 1));
      for (Index ch = 0; ch < c; ++ch) {
        const double top = (1.0 - wx) * static_cast<double>(img(ya, xa, ch)) +
                           wx * static_cast<double>(img(ya, xb, ch));
        const double bot = (1.0 - wx) * static_cast<double>(img(yb, xa, ch)) +
                           wx * static_cast<double>(img(yb, xb, ch));
        out(oy, ox, ch) = static_cast<Scalar>((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

/// Resize to the model input and scale 0..255 -> 0..1. Grayscale inputs are
/// replicated to three channels.
template <typename Scalar>
Tensor<Scalar> preprocess(const Tensor<Scalar>& img, Index out_h, Index out_w) {
  Tensor<Scalar> resized = bilinear_resize(img, out_h, out_w);
  Tensor<Scalar> out({out_h, out_w, 3});
  const Index c = resized.dim(2);
  require(c == 1 || c == 3, ErrorKind::shape, "preprocess expects 1 or 3 channels");
  for (Index y = 0; y < out_h; ++y)
    for (Index x = 0; x < out_w; ++x)
      for (Index ch = 0; ch < 3; ++ch)
        out(y, x, ch) = resized(y, x, c == 1 ? 0 : ch) / Scalar(255);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Class c images carry (c+1) Gaussian blobs at seeded positions plus uniform
/// noise; labels cycle 0..C-1 so counts are exactly balanced whenever the
/// total divides evenly.
struct SyntheticSpec {
  Index num_samples = 2400;
  Index height = 32;
  Index width = 32;
  Index num_classes = 2;
  double blob_sigma = 4.5;
  double blob_amplitude = 1.0;
  double noise = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    require(num_samples >= 1, ErrorKind::config, "synthetic: num_samples must be positive");
    require(height >= 4 && width >= 4, ErrorKind::config, "synthetic: image too small");
    require(num_classes >= 2, ErrorKind::config, "synthetic: need at least two classes");
    require(blob_sigma > 0 && blob_amplitude > 0, ErrorKind::config, "synthetic: bad blob parameters");
    require(noise >= 0, ErrorKind::config, "synthetic: noise must be non-negative");
  }
};

template <typename Scalar>
Dataset<Scalar> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset<Scalar> data;
  data.images = Tensor<Scalar>({spec.num_samples, spec.height, spec.width, 3});
  data.labels.resize(static_cast<std::size_t>(spec.num_samples));
  data.num_classes = spec.num_classes;
  const Rng root(spec.seed);
  const double margin = std::min({2.0 * spec.blob_sigma, spec.height / 4.0, spec.width / 4.0});
  std::vector<double> plane(static_cast<std::size_t>(spec.height * spec.width));

  for (Index i = 0; i < spec.num_samples; ++i) {
    const int label = static_cast<int>(i % spec.num_classes);
    data.labels[static_cast<std::size_t>(i)] = label;
    Rng rng = root.split("sample", static_cast<std::uint64_t>(i));
    std::fill(plane.begin(), plane.end(), 0.0);
    for (int blob = 0; blob <= label; ++blob) {
      const double cx = rng.uniform(margin, static_cast<double>(spec.width - 1) - margin);
      const double cy = rng.uniform(margin, static_cast<double>(spec.height - 1) - margin);
      const double inv2s2 = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
      for (Index y = 0; y < spec.height; ++y)
        for (Index x = 0; x < spec.width; ++x) {
          const double dy = static_cast<double>(y) - cy;
          const double dx = static_cast<double>(x) - cx;
          plane[static_cast<std::size_t>(y * spec.width + x)] +=
              spec.blob_amplitude * std::exp(-(dx * dx + dy * dy) * inv2s2);
        }
    }
    Scalar* dst = data.images.data() + i * spec.height * spec.width * 3;
    for (Index p = 0; p < spec.height * spec.width; ++p) {
      double v = plane[static_cast<std::size_t>(p)];
      if (spec.noise > 0) v += rng.uniform(-spec.noise, spec.noise);
      v = std::min(1.0, std::max(0.0, v));
      dst[p * 3 + 0] = dst[p * 3 + 1] = dst[p * 3 + 2] = static_cast<Scalar>(v);
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitIndices {
  std::vector<Index> train, val, test;
};

/// Seeded stratified split. Each class is allocated by largest remainders so
/// per-class proportions hold within one sample; remainder ties go to the
/// split furthest below its overall target, which keeps the total sizes on
/// target as well (100 samples at 0.8/0.1/0.1 come out 80/10/10).
inline SplitIndices split_stratified(const std::vector<int>& labels, std::array<double, 3> fractions,
                                     std::uint64_t seed) {
  double sum = fractions[0] + fractions[1] + fractions[2];
  require(std::abs(sum - 1.0) < 1e-9, ErrorKind::config, "split fractions must sum to 1");
  int max_label = -1;
  for (int l : labels) {
    require(l >= 0, ErrorKind::data, "negative label");
    max_label = std::max(max_label, l);
  }
  std::vector<std::vector<Index>> per_class(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < labels.size(); ++i)
    per_class[static_cast<std::size_t>(labels[i])].push_back(static_cast<Index>(i));

  SplitIndices out;
  Rng root(seed);
  std::array<double, 3> global_target{};
  std::array<Index, 3> global_assigned{};
  for (int s = 0; s < 3; ++s)
    global_target[static_cast<std::size_t>(s)] =
        fractions[static_cast<std::size_t>(s)] * static_cast<double>(labels.size());

  for (std::size_t cls = 0; cls < per_class.size(); ++cls) {
    auto& idx = per_class[cls];
    Rng rng = root.split("class", cls);
    shuffle(idx, rng);
    const Index n = static_cast<Index>(idx.size());
    std::array<Index, 3> take{};
    std::array<double, 3> frac{};
    Index assigned = 0;
    for (int s = 0; s < 3; ++s) {
      const double target = fractions[static_cast<std::size_t>(s)] * static_cast<double>(n);
      take[static_cast<std::size_t>(s)] = static_cast<Index>(std::floor(target + 1e-9));
      frac[static_cast<std::size_t>(s)] = target - std::floor(target + 1e-9);
      assigned += take[static_cast<std::size_t>(s)];
    }
    while (assigned < n) {
      int best = -1;
      for (int s = 0; s < 3; ++s) {
        const std::size_t us = static_cast<std::size_t>(s);
        if (best < 0) {
          if (frac[us] >= 0) best = s;
          continue;
        }
        const std::size_t ub = static_cast<std::size_t>(best);
        if (frac[us] < 0) continue;
        if (frac[us] > frac[ub] + 1e-12) {
          best = s;
        } else if (frac[us] > frac[ub] - 1e-12) {
          const double deficit_s = global_target[us] - static_cast<double>(global_assigned[us] + take[us]);
          const double deficit_b = global_target[ub] - static_cast<double>(global_assigned[ub] + take[ub]);
          if (deficit_s > deficit_b + 1e-12) best = s;
        }
      }
      ++take[static_cast<std::size_t>(best)];
      frac[static_cast<std::size_t>(best)] = -1;
      ++assigned;
    }
    Index at = 0;
    for (Index i = 0; i < take[0]; ++i) out.train.push_back(idx[static_cast<std::size_t>(at++)]);
    for (Index i = 0; i < take[1]; ++i) out.val.push_back(idx[static_cast<std::size_t>(at++)]);
    for (Index i = 0; i < take[2]; ++i) out.test.push_back(idx[static_cast<std::size_t>(at++)]);
    for (int s = 0; s < 3; ++s) global_assigned[static_cast<std::size_t>(s)] += take[static_cast<std::size_t>(s)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests (CSV with header `path,label,split`)
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string path;
  int label = 0;
  std::string split;  // train | val | test
};

inline std::vector<ManifestRecord> load_manifest(const std::string& csv_path) {
  std::ifstream in(csv_path);
  require(static_cast<bool>(in), ErrorKind::data, "cannot open manifest: " + csv_path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::data, "empty manifest: " + csv_path);
  require(line == "path,label,split", ErrorKind::data, "manifest header must be `path,label,split`");
  std::vector<ManifestRecord> records;
  const auto base = std::filesystem::path(csv_path).parent_path();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    ManifestRecord r;
    std::string label;
    require(static_cast<bool>(std::getline(ss, r.path, ',')) && static_cast<bool>(std::getline(ss, label, ',')) &&
                static_cast<bool>(std::getline(ss, r.split)),
            ErrorKind::data, "malformed manifest row: " + line);
    try {
      r.label = std::stoi(label);
    } catch (...) {
      throw Error(ErrorKind::data, "bad label in manifest row: " + line);
    }
    require(r.label >= 0, ErrorKind::data, "negative label in manifest");
    require(r.split == "train" || r.split == "val" || r.split == "test", ErrorKind::data,
            "bad split in manifest row: " + line);
    if (!r.path.empty() && !std::filesystem::path(r.path).is_absolute())
      r.path = (base / r.path).string();
    records.push_back(std::move(r));
  }
  require(!records.empty(), ErrorKind::data, "manifest has no records");
  return records;
}

inline void write_manifest(const std::string& csv_path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(csv_path);
  require(static_cast<bool>(out), ErrorKind::data, "cannot write manifest: " + csv_path);
  out << "path,label,split\n";
  for (const auto& r : records) out << r.path << "," << r.label << "," << r.split << "\n";
}

/// Loads every image in the manifest, preprocesses to the model input size,
/// and returns the dataset together with indices grouped by split. When
/// `cache_dir` is set, the preprocessed [N,H,W,3] tensor is stored there as a
/// DMTX file keyed by the manifest contents and target size, and later loads
/// skip the decode/resize work entirely.
template <typename Scalar>
std::pair<Dataset<Scalar>, SplitIndices> load_dataset(const std::vector<ManifestRecord>& records, Index h, Index w,
                                                      const std::string& cache_dir = "") {
  Dataset<Scalar> data;
  data.labels.resize(records.size());
  SplitIndices splits;
  int max_label = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    data.labels[i] = records[i].label;
    max_label = std::max(max_label, records[i].label);
    if (records[i].split == "train")
      splits.train.push_back(static_cast<Index>(i));
    else if (records[i].split == "val")
      splits.val.push_back(static_cast<Index>(i));
    else
      splits.test.push_back(static_cast<Index>(i));
  }
  data.num_classes = max_label + 1;

  std::string cache_file;
  if (!cache_dir.empty()) {
    std::uint64_t key = fnv1a(std::is_same_v<Scalar, float> ? "f32" : "f64");
    key = key * 1099511628211ULL + static_cast<std::uint64_t>(h);
    key = key * 1099511628211ULL + static_cast<std::uint64_t>(w);
    for (const auto& r : records)
      key = key * 1099511628211ULL +
            fnv1a(r.path + "|" + std::to_string(r.label) + "|" + r.split);
    char name[48];
    std::snprintf(name, sizeof(name), "tensors_%016llx.dmtx", static_cast<unsigned long long>(key));
    std::filesystem::create_directories(cache_dir);
    cache_file = (std::filesystem::path(cache_dir) / name).string();
    if (std::filesystem::exists(cache_file)) {
      data.images = read_dmtx<Scalar>(cache_file);
      require(data.images.shape() == Shape{static_cast<Index>(records.size()), h, w, 3}, ErrorKind::data,
              "dataset cache shape mismatch: " + cache_file);
      return {std::move(data), std::move(splits)};
    }
  }

  data.images = Tensor<Scalar>({static_cast<Index>(records.size()), h, w, 3});
  const Index sample = h * w * 3;
  for (std::size_t i = 0; i < records.size(); ++i) {
    Tensor<Scalar> img = preprocess(load_image<Scalar>(records[i].path), h, w);
    std::copy(img.data(), img.data() + sample, data.images.data() + static_cast<Index>(i) * sample);
  }
  if (!cache_file.empty()) write_dmtx(cache_file, data.images);
  return {std::move(data), std::move(splits)};
}

}  // namespace medix
