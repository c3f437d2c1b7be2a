#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unistd.h>

#include "sarnet/cli.hpp"
#include "sarnet/train.hpp"

using namespace sarnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("sarnet_test_train_" + std::to_string(::getpid())) / name;
  fs::create_directories(p.parent_path());
  return p;
}

std::vector<Sample> scenes(int count, Index size, std::uint64_t seed) {
  SceneSpec spec;
  spec.size = size;
  spec.max_length = std::min(48.0, static_cast<double>(size) / 2.5);
  std::vector<Sample> out;
  for (auto s : scene_seeds(seed, count)) {
    auto sc = generate_scene(s, spec);
    sc.record.image = "scene" + std::to_string(s);
    out.push_back({sc.image, sc.record});
  }
  return out;
}

ModelConfig small_config() {
  ModelConfig c;
  c.backbone.width = 8;
  c.neck.n_blocks = 1;
  c.neck.heads = 2;
  c.train.batch = 4;
  return c;
}

int cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "sarnet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 200, 0.02, 0.0002) == 0.02);
  CHECK(cosine_lr(200, 200, 0.02, 0.0002) == 0.0002);
  CHECK(cosine_lr(100, 200, 0.02, 0.0002) == doctest::Approx(0.0101).epsilon(1e-12));
  CHECK(cosine_lr(500, 200, 0.02, 0.0002) == 0.0002);
  for (Index t = 0; t < 200; ++t) CHECK(cosine_lr(t + 1, 200, 0.02, 0.0002) <= cosine_lr(t, 200, 0.02, 0.0002));
  CHECK(cosine_lr(0, 1, 0.5, 0.5) == 0.5);
  CHECK_THROWS_AS(cosine_lr(0, 0, 0.02, 0.0002), ContractError);
}

TEST_CASE("config json") {
  ModelConfig d;
  CHECK(d.train.batch == 32);
  CHECK(d.train.lr0 == 0.02);
  CHECK(d.train.lr_final == 0.0002);
  CHECK(d.train.momentum == 0.937);
  CHECK(d.train.weight_decay == 0.0005);

  auto j = d.to_json();
  auto back = ModelConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(ModelConfig::from_json(nlohmann::json::object()).to_json() == j);

  auto partial = ModelConfig::from_json(nlohmann::json::parse(R"({"neck": {"align_op": "add"}, "backbone": {"dam_mode": "off"}})"));
  CHECK(partial.neck.align_op == AlignOp::add);
  CHECK(partial.backbone.dam_mode == DamMode::off);
  CHECK_FALSE(partial.effective_neck().dam);
  CHECK(partial.neck.n_blocks == d.neck.n_blocks);

  auto rejects = [](const char* text) {
    try {
      ModelConfig::from_json(nlohmann::json::parse(text));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(rejects(R"({"optimizer": {}})").find("unknown config key optimizer") != std::string::npos);
  CHECK(rejects(R"({"train": {"lr": 0.1}})").find("unknown config key train.lr") != std::string::npos);
  CHECK(rejects(R"({"train": {"batch": "big"}})").find("train.batch") != std::string::npos);
  CHECK(rejects(R"({"train": {"batch": 1.5}})").find("train.batch") != std::string::npos);
  CHECK_FALSE(rejects(R"({"train": {"lr0": 0.001, "lr_final": 0.01}})").empty());
  CHECK_FALSE(rejects(R"({"neck": {"compensation": "mul"}})").empty());
  CHECK_FALSE(rejects(R"({"backbone": {"dam_mode": "everywhere"}})").empty());
  CHECK_FALSE(rejects(R"([1, 2])").empty());
}

TEST_CASE("parameter counts match the hand count") {
  // Derived from the layer formulas before the model was assembled; see README.
  struct Arm {
    bool ucm;
    DamMode dam;
    Index params;
  };
  for (const auto& arm : {Arm{false, DamMode::off, 758064}, Arm{false, DamMode::davgg, 927294},
                          Arm{true, DamMode::off, 2363024}, Arm{true, DamMode::davgg, 3060906}}) {
    ModelConfig c;
    c.neck.ucm = arm.ucm;
    c.backbone.dam_mode = arm.dam;
    CHECK(Detector<float>::build(c).params.parameter_count() == arm.params);
  }
}

TEST_CASE("sgd update and weight decay") {
  ParamSet<double> ps;
  auto w = ps.add_param("layer.weight", Tensor<double>(Shape(1, 1, 1, 2), 1.0));
  auto b = ps.add_param("layer.bias", Tensor<double>(Shape(1, 1, 1, 2), 1.0));
  Sgd<double> sgd(0.5, 0.1);
  sgd.step(ps, 0.1);  // zero gradient: only decay moves the weight
  CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.1));
  CHECK(b[0] == 1.0);
  w.storage()->grad_buffer()[0] = 1.0;
  sgd.step(ps, 0.1);
  const double v = 0.5 * 0.1 + 1.0 + 0.1 * 0.99;
  CHECK(w[0] == doctest::Approx(0.99 - 0.1 * v));
}

TEST_CASE("overfitting one image") {
  // Per-step losses bounce under heavy-ball momentum; the trend is what must hold.
  for (std::uint64_t seed : {1, 4, 6}) {
    auto data = scenes(1, 128, seed);
    REQUIRE_FALSE(data[0].record.boxes.empty());
    auto model = Detector<float>::build(ModelConfig{});
    TrainOptions opt;
    opt.steps = 50;
    const auto h = train(model, data, opt).loss_history;
    REQUIRE(h.size() == 50);
    for (double l : h) CHECK((std::isfinite(l) && l >= 0));
    INFO("seed " << seed << " first " << h.front() << " last " << h.back());
    CHECK(h.back() < 0.5 * h.front());
    CHECK(std::accumulate(h.end() - 10, h.end(), 0.0) < std::accumulate(h.begin(), h.begin() + 10, 0.0));
  }
}

TEST_CASE("training is reproducible and checkpoints restore evaluation") {
  auto data = scenes(3, 64, 9);
  TrainOptions opt;
  opt.steps = 4;
  auto a = Detector<float>::build(small_config());
  auto b = Detector<float>::build(small_config());
  auto ra = train(a, data, opt);
  auto rb = train(b, data, opt);
  CHECK(ra.loss_history == rb.loss_history);

  const auto before = evaluate_model(a, data).to_json();
  const auto dir = scratch("ckpt").string();
  save_checkpoint(dir, a, ra.steps, ra.loss_history);
  auto ck = load_checkpoint(dir);
  CHECK(ck.step == 4);
  CHECK(ck.loss_history == ra.loss_history);
  CHECK(evaluate_model(ck.model, data).to_json() == before);
  for (const auto& [name, t] : a.params.buffers()) {
    const auto& u = ck.model.params.buffers().at(name);
    CHECK(std::equal(t.data().begin(), t.data().end(), u.data().begin()));
  }

  fs::remove(fs::path(dir) / "params" / "head.level0.stem.bn.beta.ntf");
  CHECK_THROWS(load_checkpoint(dir));
}

TEST_CASE("planned steps and batching") {
  TrainConfig t;
  t.epochs = 200;
  t.batch = 32;
  CHECK(planned_steps(t, 8) == 200);
  t.batch = 3;
  CHECK(planned_steps(t, 8) == 600);
  CHECK(planned_steps(t, 0) == 0);
  Tensor<float> x(Shape(1, 1, 32, 32)), y(Shape(1, 1, 64, 64));
  CHECK(stack_images({&x, &x}).shape() == Shape(2, 1, 32, 32));
  CHECK_THROWS_AS(stack_images({&x, &y}), ShapeError);
}

TEST_CASE("command line") {
  std::string out, err;
  CHECK(cli({"inspect"}, &out) == 0);
  CHECK(out.find("parameters 3060906") != std::string::npos);
  CHECK(out.find("B5 (1,128,8,8)") != std::string::npos);

  CHECK(cli({"inspect", "--frobnicate"}, &out, &err) == 2);
  CHECK(err.find("Usage") != std::string::npos);
  CHECK(cli({}, &out, &err) == 2);
  CHECK(cli({"gradcheck", "--module", "nothing"}, &out, &err) == 2);

  const auto cfg = scratch("bad.json").string();
  std::ofstream(cfg) << R"({"neck": {"blocks": 3}})";
  CHECK(cli({"inspect", "--config", cfg}, &out, &err) == 2);
  CHECK(err.find("neck.blocks") != std::string::npos);

  const auto gt = scratch("gt.jsonl").string(), dets = scratch("dets.jsonl").string();
  save_annotations(gt, {{"a", {{{1, 1, 9, 9}, 0}, {{20, 20, 30, 28}, 1}}, 0, 0}, {"b", {{{3, 3, 8, 12}, 1}}, 0, 0}});
  save_detections(dets, {{"a", {{{1, 1, 9, 9}, 1.0, 0}, {{20, 20, 30, 28}, 1.0, 1}}}, {"b", {{{3, 3, 8, 12}, 1.0, 1}}}});
  const auto report = scratch("report.json").string();
  CHECK(cli({"eval", "--dets", dets, "--gt", gt, "--out", report}, &out, &err) == 0);
  std::ifstream rin(report);
  const auto j = nlohmann::json::parse(rin);
  CHECK(j["map50"] == 1.0);
  CHECK(j["f1"] == 1.0);
  CHECK(cli({"eval", "--dets", dets}, &out, &err) == 2);

  const auto data = scratch("data").string(), ck = scratch("run").string();
  CHECK(cli({"gen-data", "--out", data, "--count", "2", "--seed", "3", "--size", "64"}, &out, &err) == 0);
  CHECK(fs::exists(fs::path(data) / "images" / "scene_0001.ntf"));
  const auto small = scratch("small.json").string();
  small_config().save(small);
  CHECK(cli({"train", "--config", small, "--data", data, "--out", ck, "--steps", "2"}, &out, &err) == 0);
  CHECK(fs::exists(fs::path(ck) / "loss_history.json"));
  CHECK(fs::exists(fs::path(ck) / "manifest.json"));
  CHECK(cli({"eval", "--checkpoint", ck, "--data", data, "--out", report}, &out, &err) == 0);
  CHECK(out.find("mAP50") != std::string::npos);
  CHECK(cli({"eval", "--checkpoint", (fs::path(ck) / "missing").string(), "--data", data}, &out, &err) == 1);

  CHECK(cli({"gradcheck", "--module", "tensor"}, &out, &err) == 0);
  CHECK(out.find("negative control") != std::string::npos);
  fs::remove_all(fs::path(data).parent_path());
}
