#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sarnet/metrics.hpp"
#include "sarnet/model.hpp"
#include "sarnet/scene.hpp"

namespace sarnet {

/// lr_final + (lr0 - lr_final)(1 + cos(pi t / T)) / 2, clamped to lr_final for t >= T.
double cosine_lr(Index t, Index total, double lr0, double lr_final);

/// SGD with heavy-ball momentum. Weight decay skips biases and BN affine
/// parameters (names ending in bias, gamma or beta).
template <typename T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(ParamSet<T>& params, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, std::vector<T>> velocity_;
};

struct StepRecord {
  Index step = 0;
  double lr = 0;
  double total = 0, cls = 0, iou = 0, dfl = 0;
  std::size_t positives = 0;
};

struct TrainOptions {
  /// Overrides cfg.train.epochs when >= 0.
  Index steps = -1;
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  std::vector<double> loss_history;
  Index steps = 0;
};

/// Number of optimizer steps implied by the config for `images` samples.
Index planned_steps(const TrainConfig& t, std::size_t images);

/// Stacks images of equal size into (N,1,H,W).
Tensor<float> stack_images(const std::vector<const Tensor<float>*>& images);

/// Mini-batch SGD under cosine_lr. Batches walk a per-epoch shuffle drawn
/// from train.seed, so the loss history is reproducible bit for bit.
TrainResult train(Detector<float>& model, const std::vector<Sample>& data, const TrainOptions& opt = {});

struct DetectOptions {
  double conf_thr = 0.01;
  double nms_iou = 0.6;
  std::size_t max_det = 100;
  Index batch = 8;
};

/// Eval-mode forward, decode and class-wise NMS per image.
std::vector<ImageDetections> detect(Detector<float>& model, const std::vector<Sample>& data, const DetectOptions& opt = {});

EvalReport evaluate_model(Detector<float>& model, const std::vector<Sample>& data, const DetectOptions& opt = {});

struct Checkpoint {
  Detector<float> model;
  Index step = 0;
  std::vector<double> loss_history;
};

/// config.json, manifest.json and one NTF file per parameter and buffer.
void save_checkpoint(const std::string& dir, const Detector<float>& model, Index step,
                     const std::vector<double>& loss_history);
/// Throws FormatError when the manifest and the files disagree.
Checkpoint load_checkpoint(const std::string& dir);

struct AblationArm {
  std::string name;
  bool ucm = false;
  DamMode dam = DamMode::off;
  Index params = 0;
  std::vector<double> loss_history;
  EvalReport report;
};

/// Trains and evaluates base with UCM and DAM switched off/on, in the order
/// baseline, +DAM, +UCM, +UCM+DAM. DAM on means base.backbone.dam_mode, or
/// davgg when base has it off.
std::vector<AblationArm> run_ablation(const ModelConfig& base, const std::vector<Sample>& data, Index steps);

}  // namespace sarnet
