#pragma once

// Second, deliberately plain implementations of the detection metrics.

#include <algorithm>
#include <map>
#include <vector>

#include "sarnet/layers.hpp"
#include "sarnet/metrics.hpp"

namespace sarnet::oracle {

inline double box_iou(const Box& a, const Box& b) {
  const double wa = a.x2 - a.x1, ha = a.y2 - a.y1, wb = b.x2 - b.x1, hb = b.y2 - b.y1;
  if (wa <= 0 || ha <= 0 || wb <= 0 || hb <= 0) return 0;
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  return inter / (wa * ha + wb * hb - inter);
}

// Per class, repeatedly pick the highest-scoring unprocessed detection.
inline std::vector<bool> match(const std::vector<DetBox>& dets, const std::vector<GtBox>& gts, double thr) {
  std::vector<bool> tp(dets.size(), false), done(dets.size(), false), used(gts.size(), false);
  for (std::size_t step = 0; step < dets.size(); ++step) {
    std::size_t pick = dets.size();
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (!done[i] && (pick == dets.size() || dets[i].score > dets[pick].score)) pick = i;
    done[pick] = true;
    std::size_t g_best = gts.size();
    double v_best = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].cls != dets[pick].cls) continue;
      const double v = box_iou(dets[pick].box, gts[g].box);
      if (v >= thr && v > v_best) {
        v_best = v;
        g_best = g;
      }
    }
    if (g_best < gts.size()) {
      used[g_best] = true;
      tp[pick] = true;
    }
  }
  return tp;
}

// VOC-style: sentinel-padded recall/precision arrays, envelope, sum where recall changes.
inline double ap(std::vector<bool> tp, std::vector<double> scores, long n_gt) {
  std::vector<std::size_t> idx(tp.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> mrec{0.0}, mpre{0.0};
  double c_tp = 0, c_fp = 0;
  for (std::size_t i : idx) {
    if (tp[i]) c_tp += 1; else c_fp += 1;
    mrec.push_back(c_tp / double(n_gt));
    mpre.push_back(c_tp / (c_tp + c_fp));
  }
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double area = 0;
  for (std::size_t i = 1; i + 1 < mrec.size(); ++i)
    if (mrec[i] != mrec[i - 1]) area += (mrec[i] - mrec[i - 1]) * mpre[i];
  return area;
}

struct Report {
  std::map<int, double> ap;
  double map50 = 0;
  ConfusionCounts best;
  double best_f1 = 0;
};

// Re-matches from scratch at every distinct threshold.
inline Report evaluate(const std::vector<ImageDetections>& dets, const std::vector<ImageAnnotations>& gts,
                       int num_classes, double thr = 0.5) {
  Report r;
  auto dets_of = [&](const std::string& name) -> std::vector<DetBox> {
    for (const auto& d : dets)
      if (d.image == name) return d.boxes;
    return {};
  };
  int represented = 0;
  for (int c = 0; c < num_classes; ++c) {
    long n = 0;
    std::vector<bool> flags;
    std::vector<double> scores;
    for (const auto& g : gts) {
      for (const auto& b : g.boxes) n += b.cls == c;
      const auto d = dets_of(g.image);
      const auto m = match(d, g.boxes, thr);
      for (std::size_t i = 0; i < d.size(); ++i)
        if (d[i].cls == c) {
          flags.push_back(m[i]);
          scores.push_back(d[i].score);
        }
    }
    if (n == 0) continue;
    r.ap[c] = ap(flags, scores, n);
    r.map50 += r.ap[c];
    ++represented;
  }
  if (represented) r.map50 /= represented;

  std::vector<double> thresholds;
  long total_gt = 0;
  for (const auto& g : gts) total_gt += static_cast<long>(g.boxes.size());
  for (const auto& d : dets)
    for (const auto& b : d.boxes) thresholds.push_back(b.score);
  std::sort(thresholds.rbegin(), thresholds.rend());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  r.best = {0, 0, total_gt};
  r.best_f1 = 0;
  bool first = true;
  for (double t : thresholds) {
    ConfusionCounts c{0, 0, 0};
    for (const auto& g : gts) {
      std::vector<DetBox> kept;
      for (const auto& b : dets_of(g.image))
        if (b.score >= t) kept.push_back(b);
      const auto m = match(kept, g.boxes, thr);
      for (bool f : m) f ? ++c.tp : ++c.fp;
    }
    c.fn = total_gt - c.tp;
    const double p = c.tp + c.fp ? double(c.tp) / double(c.tp + c.fp) : 0;
    const double rc = total_gt ? double(c.tp) / double(total_gt) : 0;
    const double f1 = p + rc > 0 ? 2 * p * rc / (p + rc) : 0;
    if (first || f1 > r.best_f1) {
      r.best_f1 = f1;
      r.best = c;
      first = false;
    }
  }
  return r;
}

// Up to six boxes per side and three classes on a small canvas, so overlaps are common.
inline void micro_dataset(Rng& rng, std::vector<ImageDetections>& dets, std::vector<ImageAnnotations>& gts) {
  dets.clear();
  gts.clear();
  const int images = 1 + static_cast<int>(rng.below(3));
  for (int im = 0; im < images; ++im) {
    ImageAnnotations g{"img" + std::to_string(im), {}};
    ImageDetections d{g.image, {}};
    const int ng = static_cast<int>(rng.below(7)), nd = static_cast<int>(rng.below(7));
    for (int i = 0; i < ng; ++i) {
      const double x = rng.uniform(0, 20), y = rng.uniform(0, 20);
      g.boxes.push_back({{x, y, x + rng.uniform(2, 10), y + rng.uniform(2, 10)}, static_cast<int>(rng.below(3))});
    }
    for (int i = 0; i < nd; ++i) {
      Box b;
      if (!g.boxes.empty() && rng.uniform() < 0.6) {
        b = g.boxes[rng.below(g.boxes.size())].box;
        const double j = rng.uniform(0, 2);
        b.x1 += rng.uniform(-j, j);
        b.x2 += rng.uniform(-j, j);
        b.y1 += rng.uniform(-j, j);
        b.y2 += rng.uniform(-j, j);
        if (b.x2 <= b.x1) b.x2 = b.x1 + 1;
        if (b.y2 <= b.y1) b.y2 = b.y1 + 1;
      } else {
        const double x = rng.uniform(0, 20), y = rng.uniform(0, 20);
        b = {x, y, x + rng.uniform(2, 10), y + rng.uniform(2, 10)};
      }
      // Coarse scores so ties happen.
      d.boxes.push_back({b, std::round(rng.uniform(0, 1) * 8) / 8, static_cast<int>(rng.below(3))});
    }
    gts.push_back(g);
    dets.push_back(d);
  }
}

}  // namespace sarnet::oracle
