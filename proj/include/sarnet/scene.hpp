#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sarnet/io.hpp"

namespace sarnet {

/// Synthetic SAR-like scene parameters. Lengths are in pixels, orientation in radians.
struct SceneSpec {
  Index size = 256;
  double looks = 4;  // speckle looks
  int min_targets = 2, max_targets = 4;
  double min_length = 10, max_length = 48;
  double min_aspect = 0.25, max_aspect = 0.9;  // width / length
  double min_width = 3;
  double orientation_lo = 0, orientation_hi = 3.141592653589793;
  double background = 0.15;  // mean background level before speckle
  double contrast = 0.25;    // guaranteed target-minus-background mean
  double edge_boost = 1.5;
  /// class = length_bucket * (aspect_edges.size() + 1) + aspect_bucket
  std::vector<double> length_edges{24};
  std::vector<double> aspect_edges{0.5};

  int num_classes() const { return static_cast<int>((length_edges.size() + 1) * (aspect_edges.size() + 1)); }
  int class_of(double length, double aspect) const;
  /// Throws ConfigError.
  void validate() const;
};

enum class TargetKind { rectangle, ellipse };

struct Target {
  TargetKind kind = TargetKind::rectangle;
  double cx = 0, cy = 0, length = 0, width = 0, theta = 0;
  int cls = 0;
  std::vector<std::uint8_t> mask;  // size x size, row-major
};

struct Scene {
  Tensor<float> image;  // (1,1,size,size) in [0,1]
  AnnotationRecord record;
  std::vector<Target> targets;
};

/// Deterministic per (seed, spec).
Scene generate_scene(std::uint64_t seed, const SceneSpec& spec);

/// Per-image seeds drawn from one stream so datasets with nearby seeds do not share scenes.
std::vector<std::uint64_t> scene_seeds(std::uint64_t seed, int count);

/// Writes images/scene_NNNN.ntf and annotations.jsonl under `dir`.
/// Generation fans out over worker threads; output order is by index.
void write_dataset(const std::string& dir, int count, std::uint64_t seed, const SceneSpec& spec);

struct Sample {
  Tensor<float> image;
  AnnotationRecord record;
};

/// Reads annotations.jsonl in `dir` and the images it names (relative to `dir`).
std::vector<Sample> load_dataset(const std::string& dir, int num_classes = -1);

/// Worker count: SARNET_THREADS if set, else hardware concurrency.
int worker_threads();

}  // namespace sarnet
