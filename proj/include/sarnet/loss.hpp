#pragma once

#include <numbers>
#include <span>
#include <vector>

#include "sarnet/dual.hpp"
#include "sarnet/head.hpp"

namespace sarnet {

struct LossWeights {
  double lambda_iou = 2.5;
  double lambda_dfl = 0.5;
  double vfl_alpha = 0.75;
  double vfl_gamma = 2.0;
};

struct AssignerOptions {
  int top_k = 10;
  double alpha = 1.0;
  double beta = 6.0;
};

/// Per-anchor targets of one image.
struct Assignment {
  std::vector<int> gt;      // matched gt index or -1
  std::vector<double> q;    // IoU-aware class target, 0 when unmatched
  std::vector<int> cls;     // class of the matched gt, -1 when unmatched
  std::vector<Box> target;  // matched gt box

  std::size_t positives() const;
};

/// Simplified task-aligned assignment.
///
/// Candidates are anchors whose center lies strictly inside a gt and whose
/// four edge distances are below reg_max strides. Each gt keeps its top_k
/// candidates by t = score^alpha * IoU^beta (ties: lower anchor index). An
/// anchor claimed twice goes to the gt it overlaps more (ties: lower gt
/// index). q = t / max t * max IoU over the gt's final anchors.
/// `scores` is anchors x num_classes probabilities, `decoded` one box per anchor.
Assignment assign_targets(const std::vector<Anchor>& anchors, const std::vector<GtBox>& gts,
                          const std::vector<double>& scores, Index num_classes, const std::vector<Box>& decoded,
                          Index reg_max, const AssignerOptions& opt = {});

/// Assignment for every image of a batch from the current predictions.
template <typename T>
std::vector<Assignment> assign_batch(const HeadOutput<T>& h, const std::vector<std::vector<GtBox>>& gts,
                                     const AssignerOptions& opt = {});

/// Varifocal term for one probability/target pair; p is clamped to [1e-7, 1-1e-7].
double varifocal_loss(double p, double q, double alpha = 0.75, double gamma = 2.0);

/// SIoU loss of a predicted box against a gt box; generic so dual numbers can flow through.
template <typename S>
S siou_generic(S x1, S y1, S x2, S y2, const Box& g, double theta = 4.0) {
  using std::abs;
  using std::asin;
  using std::exp;
  using std::max;
  using std::min;
  using std::sin;
  using std::sqrt;
  constexpr double eps = 1e-9;
  const S w1 = x2 - x1, h1 = y2 - y1;
  const double w2 = g.width(), h2 = g.height();
  S iw = min(x2, S(g.x2)) - max(x1, S(g.x1));
  S ih = min(y2, S(g.y2)) - max(y1, S(g.y1));
  if (iw < 0.0) iw = S(0.0);
  if (ih < 0.0) ih = S(0.0);
  const S inter = iw * ih;
  const S iou_v = inter / (w1 * h1 + w2 * h2 - inter + eps);

  const S cw = max(x2, S(g.x2)) - min(x1, S(g.x1)) + eps;
  const S ch = max(y2, S(g.y2)) - min(y1, S(g.y1)) + eps;
  const S dx = g.cx() - (x1 + x2) * 0.5;
  const S dy = g.cy() - (y1 + y2) * 0.5;
  const S sigma2 = dx * dx + dy * dy;
  S sin_alpha(0.0);
  if (sigma2 > 0.0) {
    const S sigma = sqrt(sigma2);
    const S s1 = abs(dx) / sigma, s2 = abs(dy) / sigma;
    sin_alpha = s1 > std::numbers::sqrt2 / 2 ? s2 : s1;
  }
  const S sn = sin(asin(sin_alpha) - std::numbers::pi / 4);
  const S angle = 1.0 - 2.0 * sn * sn;
  const S gamma = 2.0 - angle;
  const S rx = (dx / cw) * (dx / cw), ry = (dy / ch) * (dy / ch);
  const S distance = (1.0 - exp(-(gamma * rx))) + (1.0 - exp(-(gamma * ry)));

  const S ow = abs(w1 - w2) / max(w1, S(w2));
  const S oh = abs(h1 - h2) / max(h1, S(h2));
  auto powt = [theta](const S& v) {
    S r(1.0);
    for (int i = 0; i < static_cast<int>(theta); ++i) r = r * v;
    return r;
  };
  const S shape = powt(1.0 - exp(-ow)) + powt(1.0 - exp(-oh));
  return 1.0 - iou_v + (distance + shape) * 0.5;
}

/// SIoU loss; zero-area boxes are a contract error.
double siou_loss(const Box& pred, const Box& gt);

/// DFL for one side: probabilities over 0..reg_max and a continuous target.
double dfl_loss(std::span<const double> probs, double target);

/// Differentiable forms used by training and by the gradient checks.
/// varifocal: sum over elements of varifocal(sigmoid(logits), q) / max(sum q, 1).
template <typename T>
Tensor<T> varifocal_loss(const Tensor<T>& logits, const Tensor<T>& q, const LossWeights& w = {});
/// pred holds K boxes as (1,1,K,4); returns the summed SIoU against gts.
template <typename T>
Tensor<T> siou_loss(const Tensor<T>& pred, const std::vector<Box>& gts);
/// logits (1,1,K,reg_max+1), one target per row; returns the summed DFL.
template <typename T>
Tensor<T> dfl_loss(const Tensor<T>& logits, const std::vector<double>& targets);

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double cls = 0, iou = 0, dfl = 0;
  double normalizer = 0;
  std::size_t positives = 0;
};

/// L_cls + lambda_iou L_iou + lambda_dfl L_dfl over the batch. VFL covers every
/// anchor and class; SIoU and DFL (mean over the four sides) cover matched
/// anchors weighted by q. All three are divided by max(sum q, 1).
template <typename T>
LossBreakdown<T> total_loss(const HeadOutput<T>& h, const std::vector<Assignment>& assignment,
                            const LossWeights& w = {});

}  // namespace sarnet
