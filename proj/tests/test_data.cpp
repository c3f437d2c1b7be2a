#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <set>
#include <unistd.h>

#include "sarnet/scene.hpp"
#include "test_util.hpp"

using namespace sarnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("sarnet_test_data_" + std::to_string(::getpid())) / name;
  fs::create_directories(p.parent_path());
  return p;
}

std::uint64_t fnv(std::span<const float> v) {
  std::uint64_t h = 1469598103934665603ull;
  for (float f : v) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int i = 0; i < 4; ++i) h = (h ^ ((u >> (8 * i)) & 0xff)) * 1099511628211ull;
  }
  return h;
}

}  // namespace

TEST_CASE("ntf round trip is bit exact") {
  Rng rng(1);
  auto f = testing::random_tensor<float>(Shape(2, 3, 4, 5), rng);
  f.mutable_data()[0] = -0.0f;
  f.mutable_data()[1] = std::numeric_limits<float>::denorm_min();
  const auto pf = scratch("f.ntf").string();
  ntf_write(f, pf);
  CHECK(testing::bit_equal(ntf_read<float>(pf), f));
  CHECK(std::signbit(ntf_read<float>(pf)[0]));

  auto d = testing::random_tensor<double>(Shape(1, 1, 7, 3), rng);
  for (int rank = 2; rank <= 4; ++rank) {
    const auto pd = scratch("d" + std::to_string(rank) + ".ntf").string();
    ntf_write(d, pd, rank);
    CHECK(fs::file_size(pd) == 8 + 8 * static_cast<std::uintmax_t>(rank) + 21 * 8);
    CHECK(testing::bit_equal(ntf_read<double>(pd), d));
  }
  CHECK_THROWS_AS(ntf_write(d, scratch("bad.ntf").string(), 1), ShapeError);
}

TEST_CASE("ntf header arithmetic") {
  Tensor<float> one(Shape(1, 1, 1, 1), 3.5f);
  const auto p = scratch("one.ntf").string();
  ntf_write(one, p, 1);
  const auto bytes = read_file_bytes(p);
  REQUIRE(bytes.size() == 20);
  CHECK(std::memcmp(bytes.data(), "NTEN", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 1);
  CHECK(bytes[6] == 1);
  CHECK(bytes[7] == 0);
  CHECK(bytes[8] == 1);
  for (int i = 9; i < 16; ++i) CHECK(bytes[static_cast<std::size_t>(i)] == 0);
  // 3.5f = 0x40600000, little-endian
  CHECK(bytes[16] == 0x00);
  CHECK(bytes[17] == 0x00);
  CHECK(bytes[18] == 0x60);
  CHECK(bytes[19] == 0x40);
}

TEST_CASE("ntf rejects damaged files with offsets") {
  Rng rng(2);
  NtfArray a{NtfDtype::f32, {2, 3}, std::vector<std::uint8_t>(24, 7)};
  const auto good = ntf_encode(a);
  REQUIRE(good.size() == 8 + 16 + 24);
  CHECK(ntf_decode(good).payload == a.payload);

  auto offset_of = [](const std::vector<std::uint8_t>& b) {
    try {
      ntf_decode(b);
    } catch (const FormatError& e) {
      return e.position();
    }
    return -1ll;
  };
  auto bad = good;
  bad[2] = 'X';
  CHECK(offset_of(bad) == 0);
  bad = good;
  bad[4] = 2;
  CHECK(offset_of(bad) == 4);
  bad = good;
  bad[5] = 3;
  CHECK(offset_of(bad) == 5);
  bad = good;
  bad[6] = 5;
  CHECK(offset_of(bad) == 6);

  auto cut = good;
  cut.pop_back();
  CHECK(offset_of(cut) == static_cast<long long>(good.size()) - 1);
  try {
    ntf_decode(cut);
    FAIL("expected truncation error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("expected 48 bytes, have 47") != std::string::npos);
  }
  cut.resize(12);
  CHECK(offset_of(cut) == 12);
  auto longer = good;
  longer.push_back(0);
  CHECK(offset_of(longer) == 48);
}

TEST_CASE("annotations parse, clamp and reject") {
  CHECK(parse_annotations("").records.empty());
  CHECK(parse_annotations("\n  \n").records.empty());

  auto one = parse_annotations(R"({"image": "a.pgm", "boxes": [[1.5, 2, 10, 20.25, 2]]})");
  REQUIRE(one.records.size() == 1);
  CHECK(one.records[0].image == "a.pgm");
  REQUIRE(one.records[0].boxes.size() == 1);
  CHECK(one.records[0].boxes[0] == GtBox{{1.5, 2, 10, 20.25}, 2});
  CHECK(one.clamped == 0);

  auto clamp = parse_annotations(R"({"image": "b", "width": 32, "height": 32, "boxes": [[-2, 0, 10, 40, 0], [1, 1, 2, 2, 1]]})");
  CHECK(clamp.clamped == 1);
  CHECK(clamp.records[0].boxes[0].box == Box{0, 0, 10, 32});

  auto error_of = [](const std::string& text, int classes = -1) -> std::string {
    try {
      parse_annotations(text, classes);
    } catch (const FormatError& e) {
      return e.what();
    }
    return "";
  };
  const std::string flipped = "{\"image\": \"a\", \"boxes\": []}\n{\"image\": \"b\", \"boxes\": [[0,0,4,4,0], [5, 0, 3, 4, 0]]}";
  CHECK(error_of(flipped).find("line 2 box 1: x2 <= x1") != std::string::npos);
  CHECK(error_of("{\"image\": \"b\", \"boxes\": [[0,4,4,4,0]]}").find("line 1 box 0: y2 <= y1") != std::string::npos);
  CHECK(error_of("{\"image\": \"a\", \"boxes\": []}\nnot json").find("line 2") != std::string::npos);
  CHECK(error_of("{\"image\": 3, \"boxes\": []}").find("line 1") != std::string::npos);
  CHECK(error_of("{\"image\": \"a\", \"boxes\": [[0,0,1]]}").find("expected 5 fields") != std::string::npos);
  CHECK(error_of("{\"image\": \"a\", \"boxes\": [[0,0,1,1,1.5]]}").find("not an integer") != std::string::npos);
  CHECK(error_of("{\"image\": \"a\", \"boxes\": [[0,0,1,1,3]]}", 3).find("class 3 out of range") != std::string::npos);
  CHECK(error_of("{\"image\": \"a\", \"width\": 8, \"height\": 8, \"boxes\": [[9,0,12,1,0]]}").find("outside") !=
        std::string::npos);
}

TEST_CASE("annotation and detection files round trip") {
  std::vector<AnnotationRecord> recs{{"x.ntf", {{{0.25, 1, 3, 4}, 1}, {{5, 5, 9.5, 7}, 0}}, 64, 64}, {"y.ntf", {}, 0, 0}};
  const auto pa = scratch("ann.jsonl").string();
  save_annotations(pa, recs);
  auto back = load_annotations(pa).records;
  REQUIRE(back.size() == 2);
  CHECK(back[0].boxes == recs[0].boxes);
  CHECK(back[0].width == 64);
  CHECK(back[1].boxes.empty());

  std::vector<ImageDetections> dets{{"x.ntf", {{{0.1, 0.2, 3.3, 4.4}, 0.123456789012345, 2}}}, {"y.ntf", {}}};
  const auto pd = scratch("det.jsonl").string();
  save_detections(pd, dets);
  auto dback = load_detections(pd);
  REQUIRE(dback.size() == 2);
  CHECK(dback[0].boxes == dets[0].boxes);
  CHECK(dback[1].image == "y.ntf");
  CHECK_THROWS_AS(parse_detections("{\"image\": \"a\", \"boxes\": [[0,0,1,1,0]]}"), FormatError);
}

TEST_CASE("pgm read and write") {
  Tensor<float> img(Shape(1, 1, 3, 5));
  for (Index i = 0; i < img.numel(); ++i) img.mutable_data()[static_cast<std::size_t>(i)] = static_cast<float>(i) / 14.0f;
  const auto p = scratch("a.pgm").string();
  write_pgm(img, p);
  auto back = read_pgm(p);
  CHECK(back.shape() == img.shape());
  CHECK(testing::max_abs_diff(back, img) <= 0.5 / 255.0 + 1e-7);
  CHECK(testing::bit_equal(load_image(p), back));

  const auto q = scratch("c.pgm").string();
  const std::string raw = "P5\n# comment\n2 1\n4\n\x02\x04";
  write_file_bytes(q, std::vector<std::uint8_t>(raw.begin(), raw.end()));
  auto c = read_pgm(q);
  CHECK(c[0] == 0.5f);
  CHECK(c[1] == 1.0f);

  const std::string trunc = "P5 4 4 255\n\x01\x02";
  write_file_bytes(q, std::vector<std::uint8_t>(trunc.begin(), trunc.end()));
  CHECK_THROWS_AS(read_pgm(q), FormatError);
  const std::string p2 = "P2 1 1 255\n1";
  write_file_bytes(q, std::vector<std::uint8_t>(p2.begin(), p2.end()));
  CHECK_THROWS_AS(read_pgm(q), FormatError);
}

TEST_CASE("scene generation is deterministic and seed dependent") {
  SceneSpec spec;
  spec.size = 64;
  spec.max_length = 24;
  auto a = generate_scene(7, spec), b = generate_scene(7, spec);
  CHECK(testing::bit_equal(a.image, b.image));
  CHECK(a.record.boxes == b.record.boxes);

  std::set<std::uint64_t> hashes;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto img = generate_scene(s, spec).image;
    hashes.insert(fnv(img.data()));
  }
  CHECK(hashes.size() == 100);

  spec.min_targets = spec.max_targets = 0;
  auto empty = generate_scene(3, spec);
  CHECK(empty.record.boxes.empty());
  CHECK(empty.image.shape() == Shape(1, 1, 64, 64));

  spec.size = 48;
  CHECK_THROWS_AS(generate_scene(1, spec), ConfigError);
}

TEST_CASE("scene content: range, contrast, hull, classes") {
  SceneSpec spec;
  spec.size = 128;
  long targets = 0;
  std::set<int> classes;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto s = generate_scene(seed, spec);
    const Index n = spec.size;
    REQUIRE(s.targets.size() == s.record.boxes.size());
    for (float v : s.image.data()) REQUIRE((v >= 0.0f && v <= 1.0f));

    std::vector<std::uint8_t> any(static_cast<std::size_t>(n * n), 0);
    for (std::size_t k = 0; k < s.targets.size(); ++k) {
      const auto& t = s.targets[k];
      Index x1 = n, y1 = n, x2 = -1, y2 = -1;
      for (Index y = 0; y < n; ++y)
        for (Index x = 0; x < n; ++x)
          if (t.mask[static_cast<std::size_t>(y * n + x)]) {
            any[static_cast<std::size_t>(y * n + x)] = 1;
            x1 = std::min(x1, x), y1 = std::min(y1, y), x2 = std::max(x2, x), y2 = std::max(y2, y);
          }
      const Box hull{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2 + 1), static_cast<double>(y2 + 1)};
      CHECK(s.record.boxes[k].box == hull);
      CHECK(s.record.boxes[k].cls == t.cls);
      CHECK(t.cls >= 0);
      CHECK(t.cls < spec.num_classes());
      classes.insert(t.cls);
      ++targets;
    }
    if (s.targets.empty()) continue;
    double ts = 0, bs = 0;
    long tn = 0, bn = 0;
    for (std::size_t i = 0; i < any.size(); ++i) {
      const double v = s.image.data()[i];
      if (any[i])
        ts += v, ++tn;
      else
        bs += v, ++bn;
    }
    CHECK(ts / static_cast<double>(tn) - bs / static_cast<double>(bn) >= spec.contrast);
    CHECK(bs / static_cast<double>(bn) == doctest::Approx(spec.background).epsilon(0.1));
  }
  CHECK(targets >= 60);
  CHECK(classes.size() == static_cast<std::size_t>(spec.num_classes()));
  CHECK(spec.class_of(10, 0.3) == 0);
  CHECK(spec.class_of(10, 0.7) == 1);
  CHECK(spec.class_of(30, 0.3) == 2);
  CHECK(spec.class_of(30, 0.7) == 3);
}

TEST_CASE("dataset directory round trip") {
  SceneSpec spec;
  spec.size = 64;
  spec.max_length = 24;
  const auto dir = scratch("ds").string();
  write_dataset(dir, 5, 11, spec);
  auto samples = load_dataset(dir, spec.num_classes());
  REQUIRE(samples.size() == 5);
  const auto seeds = scene_seeds(11, 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto s = generate_scene(seeds[i], spec);
    CHECK(testing::bit_equal(samples[i].image, s.image));
    CHECK(samples[i].record.boxes == s.record.boxes);
  }
  CHECK(samples[0].record.image == "images/scene_0000.ntf");
  fs::remove_all(fs::path(dir).parent_path());
}
