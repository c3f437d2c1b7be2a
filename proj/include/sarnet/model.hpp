#pragma once

#include <string>

#include "json.hpp"
#include "sarnet/loss.hpp"
#include "sarnet/neck.hpp"

namespace sarnet {

struct TrainConfig {
  Index batch = 32;
  double lr0 = 0.02;
  double lr_final = 0.0002;
  /// Passes over the training set; one pass is ceil(images / batch) steps.
  Index epochs = 200;
  double momentum = 0.937;
  double weight_decay = 0.0005;
  std::uint64_t seed = 0;
};

/// Full detector configuration. JSON keys mirror the field names; unknown keys
/// are rejected and missing ones keep their defaults.
struct ModelConfig {
  BackboneConfig backbone;
  NeckConfig neck;
  HeadConfig head{4, 16};
  LossWeights loss;
  TrainConfig train;

  /// Throws ConfigError.
  void validate() const;
  /// The neck's DA blocks follow the backbone: DAM off anywhere means off everywhere.
  NeckConfig effective_neck() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  static ModelConfig load(const std::string& path);
  void save(const std::string& path) const;
};

/// Backbone, neck and head sharing one parameter set.
template <typename T>
struct Detector {
  ModelConfig cfg;
  ParamSet<T> params;
  Backbone<T> backbone;
  Neck<T> neck;
  Head<T> head;

  /// Initial weights depend only on cfg (including train.seed).
  static Detector build(const ModelConfig& cfg);
  /// (N,1,H,W) images -> per-level logits.
  HeadOutput<T> operator()(const Tensor<T>& images, RunMode mode);
  /// Feature shapes of every stage for a (1,1,size,size) input.
  std::vector<std::pair<std::string, Shape>> level_shapes(Index size);
};

}  // namespace sarnet
