#include "sarnet/suite.hpp"

#include "sarnet/loss.hpp"
#include "sarnet/neck.hpp"

namespace sarnet {

namespace {

using V = std::vector<Tensor<double>>;

Tensor<double> rand_t(const Shape& s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(s);
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

void randomize(Tensor<double>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
}

// sum(x * r) with fixed random r.
Tensor<double> project(const Tensor<double>& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(x, rand_t(x.shape(), rng, 0.5, 1.5)));
}

class Runner {
 public:
  Runner(std::string module, std::vector<SuiteEntry>& out, const std::function<void(const SuiteEntry&)>& cb)
      : module_(std::move(module)), out_(out), cb_(cb) {}

  void check(const std::string& name, const ScalarClosure& fn, V inputs, GradCheckOptions opt = {},
             bool expect_failure = false) {
    SuiteEntry e{module_, name, grad_check(fn, std::move(inputs), opt), expect_failure};
    if (cb_) cb_(e);
    out_.push_back(std::move(e));
  }

 private:
  std::string module_;
  std::vector<SuiteEntry>& out_;
  const std::function<void(const SuiteEntry&)>& cb_;
};

void tensor_module(Runner& r) {
  Rng rng(21);
  auto a = rand_t(Shape(2, 3, 4, 5), rng);
  auto b = rand_t(Shape(2, 3, 4, 5), rng);
  r.check("elementwise", [](const V& v) { return project(sigmoid(add(mul(v[0], v[1]), relu(sub(v[0], v[1]))))); }, {a, b});
  r.check("softmax", [](const V& v) { return project(softmax(v[0], 2)); }, {a});
  r.check("matmul", [](const V& v) { return project(matmul(v[0], v[1])); },
          {rand_t(Shape(2, 2, 3, 4), rng), rand_t(Shape(2, 2, 4, 5), rng)});
  r.check("layout", [](const V& v) {
    auto j = concat(V{permute(v[0], {0, 1, 3, 2}), v[1]}, 2);
    return project(slice(j, 1, 1, 2));
  }, {rand_t(Shape(2, 3, 4, 5), rng), rand_t(Shape(2, 3, 3, 4), rng)});
  r.check("batchnorm", [](const V& v) {
    Tensor<double> rm(Shape(1, 3, 1, 1), 0.0), rv(Shape(1, 3, 1, 1), 1.0);
    return project(batchnorm(v[0], v[1], v[2], rm, rv, BatchNormOptions{true}));
  }, {a, rand_t(Shape(1, 3, 1, 1), rng, 0.5, 1.5), rand_t(Shape(1, 3, 1, 1), rng)});
  r.check("conv2d", [](const V& v) { return project(conv2d(v[0], v[1], v[2], Conv2dOptions{2, 1, 1, 1})); },
          {rand_t(Shape(2, 4, 6, 5), rng), rand_t(Shape(3, 4, 3, 3), rng), rand_t(Shape(1, 3, 1, 1), rng)});
  r.check("conv2d depthwise",
          [](const V& v) { return project(conv2d(v[0], v[1], Tensor<double>(), Conv2dOptions::same(3, 3, 1, 4))); },
          {rand_t(Shape(2, 4, 5, 5), rng), rand_t(Shape(4, 1, 3, 3), rng)});
  for (bool row : {true, false})
    r.check(row ? "deform conv row" : "deform conv column",
            [row](const V& v) {
              return project(deform_conv_axis(v[0], v[1], v[2], v[3], row ? ConvAxis::row : ConvAxis::column));
            },
            {rand_t(Shape(2, 3, 5, 6), rng), rand_t(Shape(2, 3, 5, 6), rng, -1.9, 1.9),
             rand_t(row ? Shape(3, 3, 1, 3) : Shape(3, 3, 3, 1), rng), rand_t(Shape(1, 3, 1, 1), rng)});
  r.check("resize", [](const V& v) { return add(project(resize_bilinear(v[0], 7, 9)), project(resize_bilinear(v[0], 3, 2), 5)); },
          {a});
  r.check("pools", [](const V& v) { return add(project(adaptive_avg_pool(v[0], 3, 2)), project(adaptive_avg_pool(v[0], 4, 1), 5)); },
          {a});

  GradCheckOptions bad;
  bad.analytic_scale = 1.01;
  r.check("negative control", [](const V& v) { return project(mul(v[0], v[0])); }, {rand_t(Shape(1, 2, 3, 3), rng)}, bad,
          true);
}

void dam_module(Runner& r) {
  Rng rng(13);
  ParamSet<double> ps;
  auto p = DamParams<double>::make(Builder<double>(ps, rng, "dam"), 8, 3, 4);
  for (auto* conv : {&p.row_deform.offset, &p.col_deform.offset}) {
    randomize(conv->weight, rng, -0.4, 0.4);
    randomize(conv->bias, rng, -0.4, 0.4);
  }
  auto x = rand_t(Shape(2, 8, 5, 6), rng);
  GradCheckOptions opt;
  opt.max_coords_per_input = 40;
  r.check("dam", [&](const V& v) { return project(dam_forward(v[0], p, RunMode{true})); },
          {x, p.row_deform.offset.weight, p.col_deform.weight, p.cbr.conv.weight, p.cbr.bn.gamma, p.conv_h.weight,
           p.conv_w.bias},
          opt);

  auto blk = DaBlock<double>::make(Builder<double>(ps, rng, "block"), 4, 8, 2, true, 3, 4);
  r.check("da block", [&](const V& v) { return project(blk(v[0], RunMode{true})); },
          {rand_t(Shape(2, 4, 6, 6), rng), ps.param("block.1.conv.conv.weight"), ps.param("block.0.dam.conv_w.weight")},
          opt);

  BackboneConfig cfg;
  cfg.width = 8;
  cfg.depths = {1, 1, 1, 1};
  auto net = Backbone<double>::make(Builder<double>(ps, rng, "backbone"), cfg);
  auto img = rand_t(Shape(2, 1, 64, 64), rng, 0, 1);
  auto loss = [&](const V& v) {
    auto f = net(v[0], RunMode{true});
    auto s = project(f.at("C2"), 1);
    for (const char* l : {"C3", "C4", "C5"}) s = add(s, project(f.at(l), 2));
    return s;
  };
  opt.max_coords_per_input = 25;
  r.check("backbone", loss,
          {img, ps.param("backbone.stage2.blocks.0.dam.conv_h.weight"), ps.param("backbone.stage4.blocks.0.dam.row_deform.weight"),
           ps.param("backbone.stage5.down.conv.weight")},
          opt);
  // Early weights fan out into many ReLUs; the smaller step avoids kink crossings.
 
  r.check("backbone early layers", [&](const V&) { return loss({img}); },
          {ps.param("backbone.stem.conv.weight"), ps.param("backbone.stage3.down.conv.weight")}, opt);
}

void neck_module(Runner& r) {
  Rng rng(11);
  ParamSet<double> ps;
  GradCheckOptions opt;
  opt.max_coords_per_input = 30;

  auto tb = TransformerBlock<double>::make(Builder<double>(ps, rng, "tb"), 8, 2);
  randomize(tb.cb1.bn.beta, rng, -0.5, 0.5);
  r.check("transformer block", [&](const V& v) { return project(tb(v[0], RunMode{true})); },
          {rand_t(Shape(2, 8, 3, 4), rng), tb.q.weight, tb.k.weight, tb.out.weight, tb.dw.weight}, opt);

  NeckConfig cfg;
  auto mem = MemParams<double>::make(Builder<double>(ps, rng, "mem"), Compensation::mem, 16, 24, cfg);
  r.check("mem", [&](const V& v) { return project(mem_embed(v[0], v[1], mem, RunMode{true})); },
          {rand_t(Shape(2, 16, 6, 6), rng), rand_t(Shape(2, 24, 6, 6), rng), mem.local.weight, mem.global.bias}, opt);

  opt.max_coords_per_input = 20;
  for (AlignOp a : {AlignOp::concat, AlignOp::add}) {
    NeckConfig nc;
    nc.align_op = a;
    nc.n_blocks = 1;
    const std::string prefix = "neck_" + to_string(a);
    auto neck = Neck<double>::make(Builder<double>(ps, rng, prefix), nc, {8, 16, 32, 64});
    V in;
    for (int i = 0; i < 4; ++i) in.push_back(rand_t(Shape(2, 8 << i, 16 >> i, 16 >> i), rng));
    in.push_back(ps.param(prefix + ".mem_b4.global.weight"));
    in.push_back(ps.param(prefix + ".deep0.v.weight"));
    r.check("neck " + to_string(a),
            [&](const V& v) {
              FeaturePyramid<double> p;
              for (int i = 0; i < 4; ++i) p.add("C" + std::to_string(i + 2), v[static_cast<std::size_t>(i)]);
              auto o = neck(p, RunMode{true});
              return add(add(project(o.at("K3"), 1), project(o.at("B4"), 2)), project(o.at("B5"), 3));
            },
            in, opt);
  }
}

HeadOutput<double> raw_output(Rng& rng, Index n, Index size, Index K, Index R, double lo, double hi) {
  HeadOutput<double> h;
  h.num_classes = K;
  h.reg_max = R;
  for (Index s : {8, 16, 32})
    h.levels.push_back({rand_t(Shape(n, K, size / s, size / s), rng, lo, hi),
                        rand_t(Shape(n, 4 * (R + 1), size / s, size / s), rng, lo, hi), s});
  return h;
}

void loss_module(Runner& r) {
  Rng rng(8);
  ParamSet<double> ps;
  GradCheckOptions opt;
  {
    auto head = Head<double>::make(Builder<double>(ps, rng, "head"), HeadConfig{3, 4}, {8, 16, 16});
    for (auto& l : head.levels) {
      randomize(l.cls_pred.weight, rng, -0.5, 0.5);
      randomize(l.reg_pred.weight, rng, -0.5, 0.5);
    }
    auto loss = [&](const V& v) {
      FeaturePyramid<double> p;
      p.add("K3", v[0]);
      p.add("B4", v[1]);
      p.add("B5", v[2]);
      auto o = head(p, RunMode{true});
      auto s = project(o.levels[0].cls, 1);
      for (std::size_t i = 0; i < 3; ++i) s = add(s, project(o.levels[i].reg, 2 + i));
      return s;
    };
    GradCheckOptions hopt;
    hopt.max_coords_per_input = 30;
    r.check("head", loss,
            {rand_t(Shape(2, 8, 8, 8), rng), rand_t(Shape(2, 16, 4, 4), rng), rand_t(Shape(2, 16, 2, 2), rng),
             ps.param("head.level0.cls_conv.conv.weight"), ps.param("head.level1.reg_pred.weight")},
            hopt);
  }

  auto x = rand_t(Shape(2, 3, 4, 4), rng, -4, 4);
  auto q = rand_t(Shape(2, 3, 4, 4), rng, 0, 1);
  for (Index i = 0; i < q.numel(); i += 2) q.mutable_data()[static_cast<std::size_t>(i)] = 0.0;
  r.check("varifocal", [&](const V& v) { return varifocal_loss(v[0], q); }, {x}, opt);

  std::vector<Box> gts;
  Tensor<double> pred(Shape(1, 1, 20, 4));
  auto box = [&] {
    const double bx = rng.uniform(0, 40), by = rng.uniform(0, 40);
    return Box{bx, by, bx + rng.uniform(2, 40), by + rng.uniform(2, 40)};
  };
  for (std::size_t k = 0; k < 20; ++k) {
    gts.push_back(box());
    const Box p = box();
    const double c[4] = {p.x1, p.y1, p.x2, p.y2};
    for (std::size_t j = 0; j < 4; ++j) pred.mutable_data()[4 * k + j] = c[j];
  }
  r.check("siou", [&](const V& v) { return siou_loss(v[0], gts); }, {pred}, opt);

  auto logits = rand_t(Shape(1, 1, 12, 17), rng, -3, 3);
  std::vector<double> t;
  for (int k = 0; k < 12; ++k) t.push_back(rng.uniform(0, 16));
  t[0] = 4.0;
  r.check("dfl", [&](const V& v) { return dfl_loss(v[0], t); }, {logits}, opt);

  auto h = raw_output(rng, 2, 64, 3, 8, -3, 3);
  std::vector<std::vector<GtBox>> boxes{{{{4, 6, 40, 30}, 0}, {{30, 30, 60, 62}, 2}}, {{{10, 12, 22, 50}, 1}}};
  auto asg = assign_batch(h, boxes);
  // Aligned targets can be ~1e-9, below central-difference resolution.
  for (auto& a : asg)
    for (std::size_t i = 0; i < a.q.size(); ++i)
      if (a.gt[i] >= 0) a.q[i] = rng.uniform(0.3, 1.0);
  V inputs;
  for (auto& l : h.levels) {
    inputs.push_back(l.cls);
    inputs.push_back(l.reg);
  }
  GradCheckOptions topt;
  topt.max_coords_per_input = 200;
  r.check("total loss",
          [&](const V& v) {
            HeadOutput<double> o = h;
            for (std::size_t i = 0; i < 3; ++i) {
              o.levels[i].cls = v[2 * i];
              o.levels[i].reg = v[2 * i + 1];
            }
            return total_loss(o, asg).total;
          },
          inputs, topt);
}

}  // namespace

const std::vector<std::string>& grad_suite_modules() {
  static const std::vector<std::string> names{"tensor", "dam", "neck", "loss"};
  return names;
}

std::vector<SuiteEntry> run_grad_suite(const std::string& module, const std::function<void(const SuiteEntry&)>& on_entry) {
  const auto& names = grad_suite_modules();
  if (module != "all" && std::find(names.begin(), names.end(), module) == names.end())
    throw ConfigError("unknown gradcheck module '" + module + "' (all|tensor|dam|neck|loss)");
  std::vector<SuiteEntry> out;
  for (const auto& m : names) {
    if (module != "all" && module != m) continue;
    Runner r(m, out, on_entry);
    if (m == "tensor") tensor_module(r);
    if (m == "dam") dam_module(r);
    if (m == "neck") neck_module(r);
    if (m == "loss") loss_module(r);
  }
  return out;
}

}  // namespace sarnet
