#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "certvote/tensor.hpp"

namespace certvote {

// Labeled inputs with entries in [0, 1]; inputs share one shape.
struct Dataset {
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  std::string name;

  std::size_t size() const { return inputs.size(); }
};

struct PartitionPlan {
  std::size_t part_count = 1;
  std::size_t part_size = 0;
  std::size_t validation_size = 0;
  std::uint64_t seed = 0;
};

// IDX ingestion (big-endian magic 0x00000803 for images, 0x00000801 for
// labels). Pixels are scaled to [0, 1] by division by 255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Seeded shuffle, then slices part_count disjoint subsets of part_size
// followed by the validation set. Throws DataError when the plan overflows.
struct Partitioned {
  std::vector<Dataset> parts;
  Dataset validation;
};
Partitioned partition(const Dataset& ds, const PartitionPlan& plan);

// Gaussian clusters at distinct anchors inside [0, 1]^dim, clipped to the
// domain and labeled by cluster.
Dataset synth_blobs(std::size_t class_count, std::size_t per_class,
                    std::size_t dim, double spread, std::uint64_t seed);

}  // namespace certvote
