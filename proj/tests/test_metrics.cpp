#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "metrics_oracle.hpp"
#include "sarnet/errors.hpp"

using namespace sarnet;

TEST_CASE("iou") {
  const Box a{0, 0, 2, 2};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{5, 5, 6, 6}) == 0.0);
  CHECK(iou(a, Box{1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
  CHECK(iou(a, Box{2, 0, 4, 2}) == 0.0);
  CHECK(iou(a, Box{1, 1, 1, 3}) == 0.0);
}

TEST_CASE("precision, recall, f1") {
  auto z = precision_recall_f1({0, 0, 0});
  CHECK(z.precision == 0.0);
  CHECK(z.recall == 0.0);
  CHECK(z.f1 == 0.0);
  CHECK(precision_recall_f1({5, 0, 0}).f1 == 1.0);
  auto p = precision_recall_f1({8, 2, 8});
  CHECK(p.precision == doctest::Approx(0.8));
  CHECK(p.recall == doctest::Approx(0.5));
  CHECK(p.f1 == doctest::Approx(0.6154).epsilon(1e-4));
}

TEST_CASE("match_detections") {
  const GtBox g{{0, 0, 10, 10}, 0};
  auto one = match_detections({{g.box, 0.9, 0}}, {g});
  CHECK(one.counts == ConfusionCounts{1, 0, 0});

  auto two = match_detections({{{0, 0, 10, 9}, 0.4, 0}, {{0, 0, 10, 9.5}, 0.8, 0}}, {g});
  CHECK(two.counts == ConfusionCounts{1, 1, 0});
  CHECK(two.tp == std::vector<bool>{false, true});

  auto wrong_class = match_detections({{g.box, 0.9, 1}}, {g});
  CHECK(wrong_class.counts == ConfusionCounts{0, 1, 1});
  auto low = match_detections({{{0, 0, 10, 4}, 0.9, 0}}, {g});
  CHECK(low.counts == ConfusionCounts{0, 1, 1});

  // Equal scores: the lower index matches first.
  auto tie = match_detections({{g.box, 0.5, 0}, {g.box, 0.5, 0}}, {g});
  CHECK(tie.tp == std::vector<bool>{true, false});

  Rng rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<ImageDetections> d;
    std::vector<ImageAnnotations> a;
    oracle::micro_dataset(rng, d, a);
    const auto m = match_detections(d[0].boxes, a[0].boxes);
    CHECK(m.tp == oracle::match(d[0].boxes, a[0].boxes, 0.5));
    CHECK(m.counts.tp + m.counts.fn == static_cast<long>(a[0].boxes.size()));
    CHECK(m.counts.tp + m.counts.fp == static_cast<long>(d[0].boxes.size()));
  }
}

TEST_CASE("average_precision") {
  CHECK(*average_precision({true}, {0.9}, 1) == 1.0);
  CHECK(*average_precision({false, false}, {0.9, 0.4}, 3) == 0.0);
  CHECK(*average_precision({true, false}, {0.9, 0.3}, 1) == 1.0);
  CHECK(*average_precision({false, true}, {0.9, 0.3}, 1) == 0.5);
  CHECK_FALSE(average_precision({false}, {0.5}, 0).has_value());
  // Envelope: TP, FP, TP over 2 gts -> 0.5 * 1 + 0.5 * 2/3.
  CHECK(*average_precision({true, false, true}, {0.9, 0.8, 0.7}, 2) == doctest::Approx(0.5 + 1.0 / 3.0));
}

TEST_CASE("AP properties") {
  Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    std::vector<bool> tp(n);
    std::vector<double> s(n);
    long n_tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
      tp[i] = rng.uniform() < 0.5;
      n_tp += tp[i];
      s[i] = rng.uniform();
    }
    const long n_gt = n_tp + static_cast<long>(rng.below(3));
    if (n_gt == 0) continue;
    const double ap = *average_precision(tp, s, n_gt);
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
    CHECK(std::abs(ap - oracle::ap(tp, s, n_gt)) <= 1e-12);

    // Dropping a false positive never lowers AP.
    for (std::size_t i = 0; i < n; ++i)
      if (!tp[i]) {
        auto t2 = tp;
        auto s2 = s;
        t2.erase(t2.begin() + i);
        s2.erase(s2.begin() + i);
        CHECK(*average_precision(t2, s2, n_gt) >= ap - 1e-15);
      }
    // A duplicate of a true positive is a false positive and never raises AP.
    auto t3 = tp;
    auto s3 = s;
    t3.push_back(false);
    s3.push_back(rng.uniform());
    CHECK(*average_precision(t3, s3, n_gt) <= ap + 1e-15);

    // Strictly increasing relabeling.
    std::vector<double> s4;
    for (double v : s) s4.push_back(std::exp(3 * v) - 7);
    CHECK(*average_precision(tp, s4, n_gt) == ap);
  }
}

TEST_CASE("evaluate") {
  std::vector<ImageAnnotations> gts{{"a", {{{0, 0, 10, 10}, 0}, {{20, 20, 30, 35}, 1}}}, {"b", {{{5, 5, 9, 9}, 2}}}};
  std::vector<ImageDetections> exact;
  for (const auto& g : gts) {
    ImageDetections d{g.image, {}};
    for (const auto& b : g.boxes) d.boxes.push_back({b.box, 1.0, b.cls});
    exact.push_back(d);
  }
  auto perfect = evaluate(exact, gts, 3);
  CHECK(perfect.map50 == 1.0);
  CHECK(perfect.f1 == 1.0);
  CHECK(perfect.counts == ConfusionCounts{3, 0, 0});

  auto empty = evaluate({}, gts, 3);
  CHECK(empty.map50 == 0.0);
  CHECK(empty.recall == 0.0);
  CHECK(empty.counts == ConfusionCounts{0, 0, 3});

  // A class without gts is excluded from the mean.
  auto four = evaluate(exact, gts, 4);
  CHECK(four.map50 == 1.0);
  CHECK_FALSE(four.classes[3].ap.has_value());

  auto bad = exact;
  bad[0].boxes[0].cls = 7;
  bad[1].boxes[0].cls = -1;
  try {
    evaluate(bad, gts, 3);
    FAIL("expected an error");
  } catch (const ContractError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("a det 0 class 7") != std::string::npos);
    CHECK(msg.find("b det 0 class -1") != std::string::npos);
  }

  auto j = perfect.to_json();
  CHECK(j["map50"] == 1.0);
  CHECK(j["classes"].size() == 3);
}

TEST_CASE("evaluate agrees with the oracle on micro-datasets") {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<ImageDetections> d;
    std::vector<ImageAnnotations> a;
    oracle::micro_dataset(rng, d, a);
    const auto r = evaluate(d, a, 3);
    const auto o = oracle::evaluate(d, a, 3);
    CHECK(std::abs(r.map50 - o.map50) <= 1e-12);
    CHECK(r.counts == o.best);
    CHECK(std::abs(r.f1 - o.best_f1) <= 1e-12);
    for (const auto& c : r.classes) {
      CHECK(c.ap.has_value() == (o.ap.count(c.cls) == 1));
      if (c.ap) CHECK(std::abs(*c.ap - o.ap.at(c.cls)) <= 1e-12);
    }

    // Relabeling scores monotonically keeps AP and the best-F1 counts.
    auto d2 = d;
    for (auto& im : d2)
      for (auto& b : im.boxes) b.score = 0.1 + b.score * b.score;
    const auto r2 = evaluate(d2, a, 3);
    CHECK(r2.map50 == r.map50);
    CHECK(r2.counts == r.counts);
  }
}
