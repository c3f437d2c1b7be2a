#include "sarnet/metrics.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include "sarnet/errors.hpp"

namespace sarnet {

namespace {

double ratio(double a, double b) { return b > 0 ? a / b : 0.0; }

std::vector<std::size_t> score_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

Prf precision_recall_f1(const ConfusionCounts& c) {
  Prf r;
  r.precision = ratio(double(c.tp), double(c.tp + c.fp));
  r.recall = ratio(double(c.tp), double(c.tp + c.fn));
  r.f1 = ratio(2 * r.precision * r.recall, r.precision + r.recall);
  return r;
}

MatchResult match_detections(const std::vector<DetBox>& dets, const std::vector<GtBox>& gts, double iou_thr) {
  std::vector<double> scores;
  for (const auto& d : dets) scores.push_back(d.score);
  MatchResult m;
  m.tp.assign(dets.size(), false);
  std::vector<bool> used(gts.size(), false);
  for (std::size_t i : score_order(scores)) {
    int best = -1;
    double best_iou = iou_thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].cls != dets[i].cls) continue;
      const double v = iou(dets[i].box, gts[g].box);
      if (v > best_iou || (best < 0 && v >= iou_thr)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[best] = true;
      m.tp[i] = true;
      ++m.counts.tp;
    } else {
      ++m.counts.fp;
    }
  }
  m.counts.fn = static_cast<long>(gts.size()) - m.counts.tp;
  return m;
}

std::optional<double> average_precision(const std::vector<bool>& tp, const std::vector<double>& scores, long n_gt) {
  if (tp.size() != scores.size()) throw ContractError("average_precision: flags and scores differ in length");
  if (n_gt <= 0) return std::nullopt;
  std::vector<double> prec, rec;
  long ctp = 0, cfp = 0;
  for (std::size_t i : score_order(scores)) {
    tp[i] ? ++ctp : ++cfp;
    prec.push_back(double(ctp) / double(ctp + cfp));
    rec.push_back(double(ctp) / double(n_gt));
  }
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0, last_r = 0;
  for (std::size_t i = 0; i < prec.size(); ++i) {
    ap += (rec[i] - last_r) * prec[i];
    last_r = rec[i];
  }
  return ap;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& c : classes) {
    nlohmann::json j{{"class", c.cls}, {"n_gt", c.n_gt}, {"n_det", c.n_det}};
    j["ap50"] = c.ap ? nlohmann::json(*c.ap) : nlohmann::json(nullptr);
    per.push_back(j);
  }
  return {{"map50", map50},
          {"precision", precision},
          {"recall", recall},
          {"f1", f1},
          {"threshold", threshold},
          {"tp", counts.tp},
          {"fp", counts.fp},
          {"fn", counts.fn},
          {"classes", per}};
}

EvalReport evaluate(const std::vector<ImageDetections>& dets, const std::vector<ImageAnnotations>& gts,
                    int num_classes, double iou_thr) {
  std::string bad;
  auto check = [&](int cls, const std::string& where) {
    if (cls < 0 || cls >= num_classes) bad += (bad.empty() ? "" : ", ") + where + " class " + std::to_string(cls);
  };
  for (const auto& im : dets)
    for (std::size_t i = 0; i < im.boxes.size(); ++i) check(im.boxes[i].cls, im.image + " det " + std::to_string(i));
  for (const auto& im : gts)
    for (std::size_t i = 0; i < im.boxes.size(); ++i) check(im.boxes[i].cls, im.image + " gt " + std::to_string(i));
  if (!bad.empty()) throw ContractError("unknown class ids: " + bad);

  std::map<std::string, const ImageDetections*> by_name;
  for (const auto& im : dets) {
    if (by_name.count(im.image)) throw ContractError("duplicate detection record for image " + im.image);
    by_name[im.image] = &im;
  }
  for (const auto& [name, im] : by_name) {
    const bool known = std::any_of(gts.begin(), gts.end(), [&](const ImageAnnotations& g) { return g.image == name; });
    if (!known) throw ContractError("detections for image " + name + " have no annotation record");
  }

  // Pooled detections in annotation order, then detection order.
  std::vector<bool> flags;
  std::vector<double> scores;
  std::vector<int> cls;
  std::vector<long> n_gt(num_classes, 0);
  for (const auto& g : gts) {
    for (const auto& b : g.boxes) ++n_gt[b.cls];
    auto it = by_name.find(g.image);
    if (it == by_name.end()) continue;
    const auto m = match_detections(it->second->boxes, g.boxes, iou_thr);
    for (std::size_t i = 0; i < m.tp.size(); ++i) {
      flags.push_back(m.tp[i]);
      scores.push_back(it->second->boxes[i].score);
      cls.push_back(it->second->boxes[i].cls);
    }
  }

  EvalReport r;
  double ap_sum = 0;
  int represented = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<bool> f;
    std::vector<double> s;
    for (std::size_t i = 0; i < flags.size(); ++i)
      if (cls[i] == c) {
        f.push_back(flags[i]);
        s.push_back(scores[i]);
      }
    ClassReport cr{c, n_gt[c], static_cast<long>(f.size()), average_precision(f, s, n_gt[c])};
    if (cr.ap) {
      ap_sum += *cr.ap;
      ++represented;
    }
    r.classes.push_back(cr);
  }
  r.map50 = represented ? ap_sum / represented : 0.0;

  // Best F1 over thresholds at each distinct score (all dets with score >= t kept).
  const long total_gt = std::accumulate(n_gt.begin(), n_gt.end(), 0L);
  r.counts = {0, 0, total_gt};
  const auto order = score_order(scores);
  long tp = 0, fp = 0;
  double best_f1 = -1;
  for (std::size_t k = 0; k < order.size(); ++k) {
    flags[order[k]] ? ++tp : ++fp;
    if (k + 1 < order.size() && scores[order[k + 1]] == scores[order[k]]) continue;
    const ConfusionCounts c{tp, fp, total_gt - tp};
    const Prf p = precision_recall_f1(c);
    if (p.f1 > best_f1) {
      best_f1 = p.f1;
      r.counts = c;
      r.precision = p.precision;
      r.recall = p.recall;
      r.f1 = p.f1;
      r.threshold = scores[order[k]];
    }
  }
  return r;
}

}  // namespace sarnet
