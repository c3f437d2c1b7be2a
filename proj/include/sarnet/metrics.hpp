#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sarnet/boxes.hpp"

namespace sarnet {

struct ConfusionCounts {
  long tp = 0, fp = 0, fn = 0;
  bool operator==(const ConfusionCounts&) const = default;
};

struct Prf {
  double precision = 0, recall = 0, f1 = 0;
};

/// p = tp/(tp+fp), r = tp/(tp+fn), f1 = 2pr/(p+r); 0/0 is 0.
Prf precision_recall_f1(const ConfusionCounts& c);

struct MatchResult {
  std::vector<bool> tp;  // per detection, input order
  ConfusionCounts counts;
};

/// Greedy matching: detections in descending score order (lower index first
/// on ties) each take the unmatched same-class gt of highest IoU >= iou_thr
/// (lower gt index on ties).
MatchResult match_detections(const std::vector<DetBox>& dets, const std::vector<GtBox>& gts, double iou_thr = 0.5);

/// All-point interpolated AP. Detections are ranked by descending score,
/// ties kept in the given order. Empty when n_gt == 0.
std::optional<double> average_precision(const std::vector<bool>& tp, const std::vector<double>& scores, long n_gt);

struct ImageDetections {
  std::string image;
  std::vector<DetBox> boxes;
};

struct ImageAnnotations {
  std::string image;
  std::vector<GtBox> boxes;
};

struct ClassReport {
  int cls = 0;
  long n_gt = 0;
  long n_det = 0;
  std::optional<double> ap;
};

struct EvalReport {
  std::vector<ClassReport> classes;
  /// Mean AP over classes with at least one gt; 0 when there are none.
  double map50 = 0;
  /// Operating point with the best F1 over the global score sweep.
  double precision = 0, recall = 0, f1 = 0;
  double threshold = 0;
  ConfusionCounts counts;

  nlohmann::json to_json() const;
};

/// Detections are matched to the annotation record with the same image name;
/// images without detections count all their gts as misses. Class ids outside
/// [0, num_classes) in either input are an error naming the offenders.
EvalReport evaluate(const std::vector<ImageDetections>& dets, const std::vector<ImageAnnotations>& gts,
                    int num_classes, double iou_thr = 0.5);

}  // namespace sarnet
