#include "certvote/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "certvote/errors.hpp"
#include "certvote/rng.hpp"

namespace certvote {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw DataError("idx: truncated header in " + path);
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

std::ifstream open_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("idx: cannot open " + path);
  return in;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img = open_binary(images_path);
  if (read_be32(img, images_path) != kImagesMagic) {
    throw DataError("idx: bad magic in image file " + images_path);
  }
  const std::uint32_t count = read_be32(img, images_path);
  const std::uint32_t rows = read_be32(img, images_path);
  const std::uint32_t cols = read_be32(img, images_path);
  if (rows == 0 || cols == 0) throw DataError("idx: zero image dimensions");

  std::ifstream lab = open_binary(labels_path);
  if (read_be32(lab, labels_path) != kLabelsMagic) {
    throw DataError("idx: bad magic in label file " + labels_path);
  }
  const std::uint32_t label_count = read_be32(lab, labels_path);
  if (label_count != count) {
    throw DataError("idx: image/label count mismatch (" + std::to_string(count) +
                    " vs " + std::to_string(label_count) + ")");
  }

  Dataset ds;
  ds.name = images_path;
  ds.inputs.reserve(count);
  ds.labels.reserve(count);
  const std::size_t pixels = std::size_t(rows) * cols;
  std::vector<unsigned char> buf(pixels);
  for (std::uint32_t i = 0; i < count; ++i) {
    if (!img.read(reinterpret_cast<char*>(buf.data()), std::streamsize(pixels))) {
      throw DataError("idx: truncated image payload in " + images_path);
    }
    std::vector<double> px(pixels);
    for (std::size_t j = 0; j < pixels; ++j) px[j] = buf[j] / 255.0;
    ds.inputs.push_back(Tensor({rows, cols}, std::move(px)));
    int label = lab.get();
    if (label == EOF) throw DataError("idx: truncated label payload in " + labels_path);
    ds.labels.push_back(label);
  }
  return ds;
}

Partitioned partition(const Dataset& ds, const PartitionPlan& plan) {
  if (plan.part_count == 0 || plan.part_size == 0) {
    throw ConfigError("partition: part_count and part_size must be positive");
  }
  const std::size_t needed = plan.part_count * plan.part_size + plan.validation_size;
  if (needed > ds.size()) {
    throw DataError("partition: plan needs " + std::to_string(needed) +
                    " items but dataset has " + std::to_string(ds.size()));
  }

  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  rng::Stream stream(plan.seed);
  stream.shuffle(order);

  auto slice = [&](std::size_t begin, std::size_t count, const std::string& name) {
    Dataset out;
    out.name = name;
    out.inputs.reserve(count);
    out.labels.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      out.inputs.push_back(ds.inputs[order[begin + i]]);
      out.labels.push_back(ds.labels[order[begin + i]]);
    }
    return out;
  };

  Partitioned result;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < plan.part_count; ++p) {
    result.parts.push_back(slice(offset, plan.part_size,
                                 ds.name + "/part" + std::to_string(p)));
    offset += plan.part_size;
  }
  result.validation = slice(offset, plan.validation_size, ds.name + "/validation");
  return result;
}

Dataset synth_blobs(std::size_t class_count, std::size_t per_class,
                    std::size_t dim, double spread, std::uint64_t seed) {
  if (class_count < 2) throw ConfigError("synth_blobs: need at least 2 classes");
  if (dim < 2) throw ConfigError("synth_blobs: need dim >= 2");
  if (spread < 0.0) throw ConfigError("synth_blobs: spread must be non-negative");

  rng::Stream stream(seed);

  // Anchors drawn away from the walls, re-drawn while too close together so
  // clusters stay distinct; the attempt budget keeps generation total.
  std::vector<std::vector<double>> anchors;
  const double min_sep = 0.35;
  for (std::size_t c = 0; c < class_count; ++c) {
    std::vector<double> candidate(dim);
    for (int attempt = 0; attempt < 64; ++attempt) {
      for (double& v : candidate) v = 0.2 + 0.6 * stream.next_unit();
      bool ok = true;
      for (const auto& other : anchors) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
          const double d = candidate[k] - other[k];
          d2 += d * d;
        }
        if (d2 < min_sep * min_sep) {
          ok = false;
          break;
        }
      }
      if (ok) break;
    }
    anchors.push_back(candidate);
  }

  Dataset ds;
  ds.name = "blobs";
  ds.inputs.reserve(class_count * per_class);
  ds.labels.reserve(class_count * per_class);
  for (std::size_t c = 0; c < class_count; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      std::vector<double> point(dim);
      for (std::size_t k = 0; k < dim; ++k) {
        point[k] = std::clamp(anchors[c][k] + spread * stream.next_gaussian(), 0.0, 1.0);
      }
      ds.inputs.push_back(Tensor::vector1d(std::move(point)));
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  return ds;
}

}  // namespace certvote
