#include "sarnet/model.hpp"

#include <fstream>
#include <set>

namespace sarnet {

namespace {

using nlohmann::json;

// Reads known keys from one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      const json& v = j_.at(key);
      if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw ConfigError("");
      }
      out = v.get<V>();
    } catch (const std::exception&) {
      throw ConfigError(where() + "." + key + " has the wrong type");
    }
  }

  void get_enum(const char* key, std::string& out) { get(key, out); }

  const json& object(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return j_.contains(key) ? j_.at(key) : empty;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key " + (path_.empty() ? k : path_ + "." + k));
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

void ModelConfig::validate() const {
  if (backbone.width < 8 || backbone.width > 1024) throw ConfigError("backbone.width must be in [8,1024]");
  for (Index d : backbone.depths)
    if (d < 1) throw ConfigError("backbone.depths must be >= 1");
  if (backbone.dam_kernel < 1 || backbone.dam_kernel % 2 == 0) throw ConfigError("backbone.dam_kernel must be odd");
  if (backbone.dam_reduction < 1) throw ConfigError("backbone.dam_reduction must be >= 1");
  if (neck.n_blocks < 1) throw ConfigError("neck.n_blocks must be >= 1");
  if (neck.heads < 1) throw ConfigError("neck.heads must be >= 1");
  if (head.num_classes < 1) throw ConfigError("head.num_classes must be >= 1");
  if (head.reg_max < 1) throw ConfigError("head.reg_max must be >= 1");
  if (loss.lambda_iou < 0 || loss.lambda_dfl < 0 || loss.vfl_alpha < 0 || loss.vfl_gamma < 0)
    throw ConfigError("loss weights must be >= 0");
  if (train.batch < 1) throw ConfigError("train.batch must be >= 1");
  if (train.epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (!(train.lr0 > 0) || !(train.lr_final >= 0) || train.lr_final > train.lr0)
    throw ConfigError("learning rates need 0 <= lr_final <= lr0 and lr0 > 0");
  if (train.momentum < 0 || train.momentum >= 1) throw ConfigError("train.momentum must be in [0,1)");
  if (train.weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
}

NeckConfig ModelConfig::effective_neck() const {
  NeckConfig n = neck;
  n.dam = backbone.dam_mode != DamMode::off;
  n.dam_kernel = backbone.dam_kernel;
  n.dam_reduction = backbone.dam_reduction;
  return n;
}

nlohmann::json ModelConfig::to_json() const {
  return {
      {"backbone",
       {{"width", backbone.width},
        {"depths", backbone.depths},
        {"dam_mode", to_string(backbone.dam_mode)},
        {"dam_kernel", backbone.dam_kernel},
        {"dam_reduction", backbone.dam_reduction}}},
      {"neck",
       {{"ucm", neck.ucm},
        {"align_op", to_string(neck.align_op)},
        {"compensation", to_string(neck.compensation)},
        {"n_blocks", neck.n_blocks},
        {"heads", neck.heads}}},
      {"head", {{"num_classes", head.num_classes}, {"reg_max", head.reg_max}}},
      {"loss",
       {{"lambda_iou", loss.lambda_iou},
        {"lambda_dfl", loss.lambda_dfl},
        {"vfl_alpha", loss.vfl_alpha},
        {"vfl_gamma", loss.vfl_gamma}}},
      {"train",
       {{"batch", train.batch},
        {"lr0", train.lr0},
        {"lr_final", train.lr_final},
        {"epochs", train.epochs},
        {"momentum", train.momentum},
        {"weight_decay", train.weight_decay},
        {"seed", train.seed}}},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  Section root(j, "");

  Section bb(root.object("backbone"), "backbone");
  bb.get("width", c.backbone.width);
  bb.get("depths", c.backbone.depths);
  std::string dam = to_string(c.backbone.dam_mode);
  bb.get_enum("dam_mode", dam);
  c.backbone.dam_mode = parse_dam_mode(dam);
  bb.get("dam_kernel", c.backbone.dam_kernel);
  bb.get("dam_reduction", c.backbone.dam_reduction);
  bb.finish();

  Section nk(root.object("neck"), "neck");
  nk.get("ucm", c.neck.ucm);
  std::string align = to_string(c.neck.align_op), comp = to_string(c.neck.compensation);
  nk.get_enum("align_op", align);
  nk.get_enum("compensation", comp);
  c.neck.align_op = parse_align_op(align);
  c.neck.compensation = parse_compensation(comp);
  nk.get("n_blocks", c.neck.n_blocks);
  nk.get("heads", c.neck.heads);
  nk.finish();

  Section hd(root.object("head"), "head");
  hd.get("num_classes", c.head.num_classes);
  hd.get("reg_max", c.head.reg_max);
  hd.finish();

  Section ls(root.object("loss"), "loss");
  ls.get("lambda_iou", c.loss.lambda_iou);
  ls.get("lambda_dfl", c.loss.lambda_dfl);
  ls.get("vfl_alpha", c.loss.vfl_alpha);
  ls.get("vfl_gamma", c.loss.vfl_gamma);
  ls.finish();

  Section tr(root.object("train"), "train");
  tr.get("batch", c.train.batch);
  tr.get("lr0", c.train.lr0);
  tr.get("lr_final", c.train.lr_final);
  tr.get("epochs", c.train.epochs);
  tr.get("momentum", c.train.momentum);
  tr.get("weight_decay", c.train.weight_decay);
  tr.get("seed", c.train.seed);
  tr.finish();

  root.finish();
  c.validate();
  return c;
}

ModelConfig ModelConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void ModelConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json().dump(2) << "\n";
}

template <typename T>
Detector<T> Detector<T>::build(const ModelConfig& cfg) {
  cfg.validate();
  Detector d;
  d.cfg = cfg;
  Rng rng(cfg.train.seed);
  const auto& bc = cfg.backbone;
  d.backbone = Backbone<T>::make(Builder<T>(d.params, rng, "backbone"), bc);
  d.neck = Neck<T>::make(Builder<T>(d.params, rng, "neck"), cfg.effective_neck(),
                         {bc.stage_channels(0), bc.stage_channels(1), bc.stage_channels(2), bc.stage_channels(3)});
  d.head = Head<T>::make(Builder<T>(d.params, rng, "head"), cfg.head,
                         {bc.stage_channels(1), bc.stage_channels(2), bc.stage_channels(3)});
  return d;
}

template <typename T>
HeadOutput<T> Detector<T>::operator()(const Tensor<T>& images, RunMode mode) {
  return head(neck(backbone(images, mode), mode), mode);
}

template <typename T>
std::vector<std::pair<std::string, Shape>> Detector<T>::level_shapes(Index size) {
  NoGradScope<T> off;
  Tensor<T> img(Shape(1, 1, size, size), T(0));
  std::vector<std::pair<std::string, Shape>> out;
  auto c = backbone(img, RunMode{false});
  for (const auto& [name, t] : c.levels()) out.emplace_back(name, t.shape());
  auto k = neck(c, RunMode{false});
  for (const auto& [name, t] : k.levels()) out.emplace_back(name, t.shape());
  auto h = head(k, RunMode{false});
  for (std::size_t i = 0; i < h.levels.size(); ++i) {
    out.emplace_back("P" + std::to_string(i + 3) + ".cls", h.levels[i].cls.shape());
    out.emplace_back("P" + std::to_string(i + 3) + ".reg", h.levels[i].reg.shape());
  }
  return out;
}

template struct Detector<float>;
template struct Detector<double>;

}  // namespace sarnet
