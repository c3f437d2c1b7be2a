#include "sarnet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "sarnet/autograd.hpp"

namespace sarnet {

using detail::finish;
using detail::grad_target;

std::size_t Assignment::positives() const {
  return static_cast<std::size_t>(std::count_if(gt.begin(), gt.end(), [](int g) { return g >= 0; }));
}

Assignment assign_targets(const std::vector<Anchor>& anchors, const std::vector<GtBox>& gts,
                          const std::vector<double>& scores, Index num_classes, const std::vector<Box>& decoded,
                          Index reg_max, const AssignerOptions& opt) {
  const std::size_t A = anchors.size();
  if (scores.size() != A * static_cast<std::size_t>(num_classes) || decoded.size() != A)
    throw ContractError("assign_targets: scores/decoded boxes do not match the anchor count");
  Assignment out;
  out.gt.assign(A, -1);
  out.q.assign(A, 0.0);
  out.cls.assign(A, -1);
  out.target.assign(A, Box{});

  struct Claim {
    int g;
    double iou, t;
  };
  std::vector<std::vector<Claim>> claims(A);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const Box& b = gts[g].box;
    if (gts[g].cls < 0 || gts[g].cls >= num_classes)
      throw ContractError("assign_targets: gt " + std::to_string(g) + " has class " + std::to_string(gts[g].cls));
    std::vector<std::pair<double, std::size_t>> cand;
    std::vector<double> ious(A, 0.0);
    for (std::size_t a = 0; a < A; ++a) {
      const Anchor& an = anchors[a];
      if (!(an.cx > b.x1 && an.cx < b.x2 && an.cy > b.y1 && an.cy < b.y2)) continue;
      const auto d = encode_ltrb(an, b);
      if (*std::max_element(d.begin(), d.end()) >= static_cast<double>(reg_max)) continue;
      ious[a] = iou(decoded[a], b);
      const double s = scores[a * num_classes + gts[g].cls];
      cand.emplace_back(std::pow(s, opt.alpha) * std::pow(ious[a], opt.beta), a);
    }
    std::stable_sort(cand.begin(), cand.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    if (cand.size() > static_cast<std::size_t>(opt.top_k)) cand.resize(opt.top_k);
    for (const auto& [t, a] : cand) claims[a].push_back({static_cast<int>(g), ious[a], t});
  }

  std::vector<double> max_t(gts.size(), 0.0), max_iou(gts.size(), 0.0), t_of(A, 0.0);
  for (std::size_t a = 0; a < A; ++a) {
    if (claims[a].empty()) continue;
    // Claims arrive in gt order, so keeping the first strict maximum prefers the lower gt index.
    const Claim* best = &claims[a][0];
    for (const auto& c : claims[a])
      if (c.iou > best->iou) best = &c;
    out.gt[a] = best->g;
    out.cls[a] = gts[best->g].cls;
    out.target[a] = gts[best->g].box;
    t_of[a] = best->t;
    max_t[best->g] = std::max(max_t[best->g], best->t);
    max_iou[best->g] = std::max(max_iou[best->g], best->iou);
  }
  for (std::size_t a = 0; a < A; ++a) {
    const int g = out.gt[a];
    if (g >= 0 && max_t[g] > 0) out.q[a] = t_of[a] / max_t[g] * max_iou[g];
  }
  return out;
}

template <typename T>
std::vector<Assignment> assign_batch(const HeadOutput<T>& h, const std::vector<std::vector<GtBox>>& gts,
                                     const AssignerOptions& opt) {
  if (static_cast<Index>(gts.size()) != h.batch())
    throw ContractError("assign_batch: " + std::to_string(gts.size()) + " annotation lists for a batch of " +
                        std::to_string(h.batch()));
  const auto anchors = make_anchors(h);
  std::vector<Assignment> out;
  for (Index n = 0; n < h.batch(); ++n)
    out.push_back(assign_targets(anchors, gts[n], class_scores(h, n), h.num_classes, decode_all(h, n), h.reg_max, opt));
  return out;
}

namespace {

constexpr double kProbLo = 1e-7;
constexpr double kProbHi = 1.0 - 1e-7;

struct VflTerm {
  double loss, dlogit;
};

VflTerm vfl_from_logit(double x, double q, double alpha, double gamma) {
  const double raw = 1.0 / (1.0 + std::exp(-x));
  const double p = std::clamp(raw, kProbLo, kProbHi);
  const bool clamped = p != raw;
  if (q > 0) {
    const double loss = -q * (q * std::log(p) + (1 - q) * std::log(1 - p));
    return {loss, clamped ? 0.0 : q * (p - q)};
  }
  const double pg = std::pow(p, gamma);
  const double l1p = std::log(1 - p);
  const double loss = -alpha * pg * l1p;
  return {loss, clamped ? 0.0 : -alpha * (gamma * pg * (1 - p) * l1p - pg * p)};
}

// Softmax of `bins` strided values starting at base.
template <typename T>
void softmax_bins(const T* base, Index stride, Index bins, double* out) {
  double mx = -INFINITY;
  for (Index i = 0; i < bins; ++i) mx = std::max(mx, static_cast<double>(base[i * stride]));
  double z = 0;
  for (Index i = 0; i < bins; ++i) z += out[i] = std::exp(static_cast<double>(base[i * stride]) - mx);
  for (Index i = 0; i < bins; ++i) out[i] /= z;
}

struct DflTerm {
  double loss;
  Index left;
  double wl, wr;
};

DflTerm dfl_term(const double* probs, Index bins, double target) {
  const double y = std::clamp(target, 0.0, static_cast<double>(bins - 1) - 1e-6);
  const Index i = static_cast<Index>(std::floor(y));
  const double wl = static_cast<double>(i + 1) - y, wr = y - static_cast<double>(i);
  const double pl = std::max(probs[i], 1e-300), pr = std::max(probs[i + 1], 1e-300);
  double loss = -wl * std::log(pl);
  if (wr > 0) loss -= wr * std::log(pr);
  return {loss, i, wl, wr};
}

using Grad4 = std::array<double, 4>;

Grad4 siou_grad(const Box& p, const Box& g, double& value) {
  using D = Dual<double, 4>;
  const D r = siou_generic(D::variable(p.x1, 0), D::variable(p.y1, 1), D::variable(p.x2, 2), D::variable(p.y2, 3), g);
  value = r.v;
  return r.d;
}

}  // namespace

double varifocal_loss(double p, double q, double alpha, double gamma) {
  p = std::clamp(p, kProbLo, kProbHi);
  if (q > 0) return -q * (q * std::log(p) + (1 - q) * std::log(1 - p));
  return -alpha * std::pow(p, gamma) * std::log(1 - p);
}

double siou_loss(const Box& pred, const Box& gt) {
  if (pred.area() <= 0 || gt.area() <= 0) throw ContractError("siou_loss: zero-area box");
  return siou_generic(pred.x1, pred.y1, pred.x2, pred.y2, gt);
}

double dfl_loss(std::span<const double> probs, double target) {
  if (probs.size() < 2) throw ContractError("dfl_loss needs at least two bins");
  return dfl_term(probs.data(), static_cast<Index>(probs.size()), target).loss;
}

template <typename T>
Tensor<T> varifocal_loss(const Tensor<T>& logits, const Tensor<T>& q, const LossWeights& w) {
  if (logits.shape() != q.shape())
    throw ShapeError("varifocal_loss: logits " + logits.shape().str() + " vs targets " + q.shape().str());
  double qs = 0;
  for (T v : q.data()) qs += v;
  const double norm = std::max(qs, 1.0);
  auto grad = std::make_shared<std::vector<double>>(logits.numel());
  double total = 0;
  for (Index i = 0; i < logits.numel(); ++i) {
    const auto t = vfl_from_logit(logits[i], q[i], w.vfl_alpha, w.vfl_gamma);
    total += t.loss;
    (*grad)[i] = t.dlogit / norm;
  }
  Tensor<T> out(Shape(1, 1, 1, 1), static_cast<T>(total / norm));
  auto xs = logits.storage();
  return finish<T>("varifocal_loss", {&logits}, out, [xs, grad](const std::vector<T>& g) {
    if (T* gx = grad_target(xs))
      for (std::size_t i = 0; i < grad->size(); ++i) gx[i] += static_cast<T>(g[0] * (*grad)[i]);
  });
}

template <typename T>
Tensor<T> siou_loss(const Tensor<T>& pred, const std::vector<Box>& gts) {
  if (pred.dim(0) != 1 || pred.dim(1) != 1 || pred.dim(3) != 4 || pred.dim(2) != static_cast<Index>(gts.size()))
    throw ShapeError("siou_loss: pred must be (1,1,K,4) with K gt boxes, got " + pred.shape().str());
  auto grad = std::make_shared<std::vector<double>>(pred.numel());
  double total = 0;
  for (std::size_t k = 0; k < gts.size(); ++k) {
    const Box b{pred[4 * k], pred[4 * k + 1], pred[4 * k + 2], pred[4 * k + 3]};
    if (b.area() <= 0 || gts[k].area() <= 0) throw ContractError("siou_loss: zero-area box at row " + std::to_string(k));
    double v;
    const auto g = siou_grad(b, gts[k], v);
    total += v;
    for (int j = 0; j < 4; ++j) (*grad)[4 * k + j] = g[j];
  }
  Tensor<T> out(Shape(1, 1, 1, 1), static_cast<T>(total));
  auto xs = pred.storage();
  return finish<T>("siou_loss", {&pred}, out, [xs, grad](const std::vector<T>& g) {
    if (T* gx = grad_target(xs))
      for (std::size_t i = 0; i < grad->size(); ++i) gx[i] += static_cast<T>(g[0] * (*grad)[i]);
  });
}

template <typename T>
Tensor<T> dfl_loss(const Tensor<T>& logits, const std::vector<double>& targets) {
  const Index K = logits.dim(2), bins = logits.dim(3);
  if (logits.dim(0) != 1 || logits.dim(1) != 1 || K != static_cast<Index>(targets.size()) || bins < 2)
    throw ShapeError("dfl_loss: logits must be (1,1,K,bins) with K targets, got " + logits.shape().str());
  auto grad = std::make_shared<std::vector<double>>(logits.numel());
  std::vector<double> p(bins);
  double total = 0;
  for (Index k = 0; k < K; ++k) {
    softmax_bins(logits.ptr() + k * bins, 1, bins, p.data());
    const auto t = dfl_term(p.data(), bins, targets[k]);
    total += t.loss;
    for (Index i = 0; i < bins; ++i) (*grad)[k * bins + i] = (t.wl + t.wr) * p[i];
    (*grad)[k * bins + t.left] -= t.wl;
    (*grad)[k * bins + t.left + 1] -= t.wr;
  }
  Tensor<T> out(Shape(1, 1, 1, 1), static_cast<T>(total));
  auto xs = logits.storage();
  return finish<T>("dfl_loss", {&logits}, out, [xs, grad](const std::vector<T>& g) {
    if (T* gx = grad_target(xs))
      for (std::size_t i = 0; i < grad->size(); ++i) gx[i] += static_cast<T>(g[0] * (*grad)[i]);
  });
}

template <typename T>
LossBreakdown<T> total_loss(const HeadOutput<T>& h, const std::vector<Assignment>& assignment, const LossWeights& w) {
  const Index N = h.batch(), K = h.num_classes, R = h.reg_max, bins = R + 1;
  if (static_cast<Index>(assignment.size()) != N) throw ContractError("total_loss: one assignment per image expected");
  const auto anchors = make_anchors(h);
  for (const auto& a : assignment)
    if (a.gt.size() != anchors.size()) throw ContractError("total_loss: assignment does not match the anchor count");

  double qsum = 0;
  for (const auto& a : assignment) qsum = std::accumulate(a.q.begin(), a.q.end(), qsum);
  const double norm = std::max(qsum, 1.0);

  auto grads = std::make_shared<std::vector<std::vector<double>>>();
  for (const auto& lv : h.levels) {
    grads->emplace_back(lv.cls.numel(), 0.0);
    grads->emplace_back(lv.reg.numel(), 0.0);
  }

  LossBreakdown<T> out;
  out.normalizer = norm;
  double l_cls = 0, l_iou = 0, l_dfl = 0;
  std::vector<double> probs(4 * bins);
  for (Index n = 0; n < N; ++n) {
    const Assignment& asg = assignment[n];
    for (std::size_t ai = 0; ai < anchors.size(); ++ai) {
      const Anchor& a = anchors[ai];
      const auto& lv = h.levels[a.level];
      const Index H = lv.cls.dim(2), W = lv.cls.dim(3), HW = H * W, pix = a.y * W + a.x;
      auto& gc = (*grads)[2 * a.level];
      auto& gr = (*grads)[2 * a.level + 1];
      for (Index c = 0; c < K; ++c) {
        const Index idx = (n * K + c) * HW + pix;
        const double q = asg.cls[ai] == c ? asg.q[ai] : 0.0;
        const auto t = vfl_from_logit(lv.cls[idx], q, w.vfl_alpha, w.vfl_gamma);
        l_cls += t.loss;
        gc[idx] += t.dlogit / norm;
      }
      if (asg.gt[ai] < 0) continue;
      ++out.positives;
      const double q = asg.q[ai];
      const T* reg0 = lv.reg.ptr() + n * 4 * bins * HW + pix;
      std::array<double, 4> d{};
      for (int s = 0; s < 4; ++s) {
        double* p = probs.data() + s * bins;
        softmax_bins(reg0 + s * bins * HW, HW, bins, p);
        for (Index i = 0; i < bins; ++i) d[s] += static_cast<double>(i) * p[i];
      }
      const double st = a.stride;
      const Box pred{a.cx - d[0] * st, a.cy - d[1] * st, a.cx + d[2] * st, a.cy + d[3] * st};
      double siou_v;
      const Grad4 gb = siou_grad(pred, asg.target[ai], siou_v);
      l_iou += q * siou_v;
      const std::array<double, 4> gd{-st * gb[0], -st * gb[1], st * gb[2], st * gb[3]};

      const auto tgt = encode_ltrb(a, asg.target[ai]);
      for (int s = 0; s < 4; ++s) {
        const double* p = probs.data() + s * bins;
        const auto df = dfl_term(p, bins, tgt[s]);
        l_dfl += q * df.loss / 4.0;
        const double c_iou = w.lambda_iou * q / norm * gd[s];
        const double c_dfl = w.lambda_dfl * q / (4.0 * norm);
        const Index base = (n * 4 * bins + s * bins) * HW + pix;
        for (Index i = 0; i < bins; ++i) {
          double g = c_iou * p[i] * (static_cast<double>(i) - d[s]) + c_dfl * (df.wl + df.wr) * p[i];
          if (i == df.left) g -= c_dfl * df.wl;
          if (i == df.left + 1) g -= c_dfl * df.wr;
          gr[base + i * HW] += g;
        }
      }
    }
  }
  out.cls = l_cls / norm;
  out.iou = l_iou / norm;
  out.dfl = l_dfl / norm;
  const double total = out.cls + w.lambda_iou * out.iou + w.lambda_dfl * out.dfl;

  std::vector<const Tensor<T>*> inputs;
  std::vector<std::shared_ptr<TensorStorage<T>>> stores;
  for (const auto& lv : h.levels) {
    inputs.push_back(&lv.cls);
    inputs.push_back(&lv.reg);
    stores.push_back(lv.cls.storage());
    stores.push_back(lv.reg.storage());
  }
  out.total = finish<T>("detection_loss", inputs, Tensor<T>(Shape(1, 1, 1, 1), static_cast<T>(total)),
                        [stores, grads](const std::vector<T>& g) {
                          for (std::size_t k = 0; k < stores.size(); ++k)
                            if (T* gx = grad_target(stores[k])) {
                              const auto& src = (*grads)[k];
                              for (std::size_t i = 0; i < src.size(); ++i) gx[i] += static_cast<T>(g[0] * src[i]);
                            }
                        });
  return out;
}

#define SARNET_INSTANTIATE_LOSS(T)                                                                              \
  template std::vector<Assignment> assign_batch(const HeadOutput<T>&, const std::vector<std::vector<GtBox>>&,   \
                                                const AssignerOptions&);                                        \
  template Tensor<T> varifocal_loss(const Tensor<T>&, const Tensor<T>&, const LossWeights&);                    \
  template Tensor<T> siou_loss(const Tensor<T>&, const std::vector<Box>&);                                      \
  template Tensor<T> dfl_loss(const Tensor<T>&, const std::vector<double>&);                                    \
  template LossBreakdown<T> total_loss(const HeadOutput<T>&, const std::vector<Assignment>&, const LossWeights&);

SARNET_INSTANTIATE_LOSS(float)
SARNET_INSTANTIATE_LOSS(double)

}  // namespace sarnet
