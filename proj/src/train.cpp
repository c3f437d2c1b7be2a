#include "sarnet/train.hpp"

#include <algorithm>
#include <array>
#include <tuple>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

namespace sarnet {

namespace fs = std::filesystem;

double cosine_lr(Index t, Index total, double lr0, double lr_final) {
  if (total < 1) throw ContractError("cosine_lr needs total >= 1");
  if (t < 0) throw ContractError("cosine_lr needs t >= 0");
  if (t >= total) return lr_final;
  const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(total);
  return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + std::cos(phase));
}

namespace {

bool decays(const std::string& name) {
  for (const char* s : {"bias", "gamma", "beta"}) {
    const std::string suffix = s;
    if (name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) return false;
  }
  return true;
}

}  // namespace

template <typename T>
void Sgd<T>::step(ParamSet<T>& params, double lr) {
  for (const auto& [name, p] : params.params()) {
    auto& v = velocity_[name];
    Tensor<T> handle = p;
    auto w = handle.mutable_data();
    if (v.empty()) v.assign(w.size(), T(0));
    const auto g = p.grad();
    const T wd = decays(name) ? static_cast<T>(weight_decay_) : T(0);
    const T mu = static_cast<T>(momentum_), step = static_cast<T>(lr);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = mu * v[i] + g[i] + wd * w[i];
      w[i] -= step * v[i];
    }
  }
}

template class Sgd<float>;
template class Sgd<double>;

Index planned_steps(const TrainConfig& t, std::size_t images) {
  if (images == 0) return 0;
  const Index b = std::min<Index>(t.batch, static_cast<Index>(images));
  return t.epochs * ((static_cast<Index>(images) + b - 1) / b);
}

Tensor<float> stack_images(const std::vector<const Tensor<float>*>& images) {
  if (images.empty()) throw ContractError("cannot stack zero images");
  const Shape s = images.front()->shape();
  std::vector<float> v;
  v.reserve(static_cast<std::size_t>(s.numel()) * images.size());
  for (const auto* im : images) {
    if (im->shape() != s) throw ShapeError("images in a batch differ in size: " + s.str() + " vs " + im->shape().str());
    v.insert(v.end(), im->data().begin(), im->data().end());
  }
  return Tensor<float>(Shape(static_cast<Index>(images.size()) * s.n(), s.c(), s.h(), s.w()), std::move(v));
}

TrainResult train(Detector<float>& model, const std::vector<Sample>& data, const TrainOptions& opt) {
  const auto& tc = model.cfg.train;
  TrainResult out;
  if (data.empty()) throw ContractError("training needs at least one image");
  const Index n = static_cast<Index>(data.size());
  const Index b = std::min<Index>(tc.batch, n);
  const Index per_epoch = (n + b - 1) / b;
  const Index total = opt.steps >= 0 ? opt.steps : planned_steps(tc, data.size());

  Sgd<float> sgd(tc.momentum, tc.weight_decay);
  Rng shuffle(tc.seed ^ 0x5eedULL);
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index t = 0; t < total; ++t) {
    if (t % per_epoch == 0) {
      for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
      for (Index i = n - 1; i > 0; --i)
        std::swap(order[static_cast<std::size_t>(i)], order[shuffle.below(static_cast<std::uint64_t>(i + 1))]);
    }
    const Index begin = (t % per_epoch) * b, end = std::min(begin + b, n);
    std::vector<const Tensor<float>*> imgs;
    std::vector<std::vector<GtBox>> gts;
    for (Index i = begin; i < end; ++i) {
      const auto& s = data[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      imgs.push_back(&s.image);
      gts.push_back(s.record.boxes);
    }

    model.params.zero_grad();
    Tape<float> tape;
    StepRecord rec;
    {
      TapeScope<float> scope(tape);
      auto h = model(stack_images(imgs), RunMode{true});
      auto asg = assign_batch(h, gts);
      auto loss = total_loss(h, asg, model.cfg.loss);
      rec.total = static_cast<double>(loss.total[0]);
      rec.cls = loss.cls;
      rec.iou = loss.iou;
      rec.dfl = loss.dfl;
      rec.positives = loss.positives;
      if (!std::isfinite(rec.total)) throw NumericError("non-finite loss at step " + std::to_string(t));
      backward(loss.total, tape);
    }
    rec.step = t;
    rec.lr = cosine_lr(t, total, tc.lr0, tc.lr_final);
    sgd.step(model.params, rec.lr);
    out.loss_history.push_back(rec.total);
    if (opt.on_step) opt.on_step(rec);
  }
  model.params.zero_grad();
  out.steps = total;
  return out;
}

std::vector<ImageDetections> detect(Detector<float>& model, const std::vector<Sample>& data, const DetectOptions& opt) {
  NoGradScope<float> off;
  std::vector<ImageDetections> out;
  const Index b = std::max<Index>(1, opt.batch);
  for (std::size_t begin = 0; begin < data.size(); begin += static_cast<std::size_t>(b)) {
    const std::size_t end = std::min(data.size(), begin + static_cast<std::size_t>(b));
    std::vector<const Tensor<float>*> imgs;
    for (std::size_t i = begin; i < end; ++i) imgs.push_back(&data[i].image);
    auto h = model(stack_images(imgs), RunMode{false});
    for (std::size_t i = begin; i < end; ++i) {
      auto kept = nms(decode_boxes(h, static_cast<Index>(i - begin), opt.conf_thr), opt.nms_iou);
      if (kept.size() > opt.max_det) kept.resize(opt.max_det);
      out.push_back({data[i].record.image, std::move(kept)});
    }
  }
  return out;
}

EvalReport evaluate_model(Detector<float>& model, const std::vector<Sample>& data, const DetectOptions& opt) {
  std::vector<ImageAnnotations> gts;
  for (const auto& s : data) gts.push_back({s.record.image, s.record.boxes});
  return evaluate(detect(model, data, opt), gts, static_cast<int>(model.cfg.head.num_classes));
}

namespace {

std::string entry_file(const std::string& kind, const std::string& name) { return kind + "/" + name + ".ntf"; }

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("missing " + p.string(), 0);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what(), static_cast<long long>(e.byte));
  }
}

}  // namespace

void save_checkpoint(const std::string& dir, const Detector<float>& model, Index step,
                     const std::vector<double>& loss_history) {
  const fs::path root(dir);
  fs::create_directories(root / "params");
  fs::create_directories(root / "buffers");
  model.cfg.save((root / "config.json").string());
  nlohmann::json manifest{{"step", step}, {"loss_history", loss_history}};
  manifest["params"] = nlohmann::json::object();
  manifest["buffers"] = nlohmann::json::object();
  for (const auto& [kind, set] : {std::pair{std::string("params"), &model.params.params()},
                                  std::pair{std::string("buffers"), &model.params.buffers()}})
    for (const auto& [name, t] : *set) {
      const auto file = entry_file(kind, name);
      ntf_write(t, (root / file).string());
      manifest[kind][name] = file;
    }
  std::ofstream out(root / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir);
  out << manifest.dump(1) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path root(dir);
  const auto cfg = ModelConfig::from_json(read_json(root / "config.json"));
  const auto manifest = read_json(root / "manifest.json");
  Checkpoint ck{Detector<float>::build(cfg), 0, {}};
  try {
    ck.step = manifest.at("step").get<Index>();
    ck.loss_history = manifest.at("loss_history").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what(), 0);
  }
  for (const std::string kind : {"params", "buffers"}) {
    auto& set = kind == "params" ? ck.model.params.params() : ck.model.params.buffers();
    if (!manifest.contains(kind) || !manifest[kind].is_object()) throw FormatError("manifest lacks " + kind, 0);
    const auto& listed = manifest[kind];
    if (listed.size() != set.size())
      throw FormatError("manifest lists " + std::to_string(listed.size()) + " " + kind + ", model has " +
                            std::to_string(set.size()),
                        0);
    for (const auto& [name, t] : set) {
      if (!listed.contains(name)) throw FormatError("manifest lacks " + kind + " entry " + name, 0);
      auto loaded = ntf_read<float>((root / listed[name].get<std::string>()).string());
      if (loaded.shape() != t.shape())
        throw FormatError(name + " has shape " + loaded.shape().str() + ", expected " + t.shape().str(), 0);
      Tensor<float> handle = t;
      auto dst = handle.mutable_data();
      std::copy(loaded.data().begin(), loaded.data().end(), dst.begin());
    }
    std::size_t files = 0;
    if (fs::exists(root / kind))
      for (const auto& e : fs::directory_iterator(root / kind)) files += e.path().extension() == ".ntf";
    if (files != set.size())
      throw FormatError(kind + " directory holds " + std::to_string(files) + " files for " + std::to_string(set.size()) +
                            " entries",
                        0);
  }
  return ck;
}

std::vector<AblationArm> run_ablation(const ModelConfig& base, const std::vector<Sample>& data, Index steps) {
  const DamMode on = base.backbone.dam_mode == DamMode::off ? DamMode::davgg : base.backbone.dam_mode;
  std::vector<AblationArm> arms(4);
  const std::array<std::tuple<const char*, bool, DamMode>, 4> grid{
      {{"baseline", false, DamMode::off}, {"+DAM", false, on}, {"+UCM", true, DamMode::off}, {"+UCM+DAM", true, on}}};
  for (std::size_t i = 0; i < arms.size(); ++i) {
    auto& arm = arms[i];
    std::tie(arm.name, arm.ucm, arm.dam) = grid[i];
    ModelConfig cfg = base;
    cfg.neck.ucm = arm.ucm;
    cfg.backbone.dam_mode = arm.dam;
    auto model = Detector<float>::build(cfg);
    arm.params = model.params.parameter_count();
    TrainOptions opt;
    opt.steps = steps;
    arm.loss_history = train(model, data, opt).loss_history;
    arm.report = evaluate_model(model, data);
  }
  return arms;
}

}  // namespace sarnet
