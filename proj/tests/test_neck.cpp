#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "sarnet/gradcheck.hpp"
#include "sarnet/neck.hpp"
#include "test_util.hpp"

using namespace sarnet;
using sarnet::testing::bit_equal;
using sarnet::testing::max_abs_diff;
using sarnet::testing::project;
using sarnet::testing::random_tensor;

namespace {

template <typename T = double>
FeaturePyramid<T> pyramid(Rng& rng, std::array<Index, 4> ch, Index size, Index n = 1, std::string prefix = "C",
                          int first = 2) {
  FeaturePyramid<T> p;
  for (int i = 0; i < 4; ++i)
    p.add(prefix + std::to_string(first + i), random_tensor<T>(Shape(n, ch[i], size >> i, size >> i), rng));
  return p;
}

template <typename T>
void fill(Tensor<T> t, T v) {
  for (auto& x : t.mutable_data()) x = v;
}

}  // namespace

TEST_CASE("alignment size rule") {
  CHECK(alignment_size({Shape(1, 1, 32, 32), Shape(1, 1, 16, 16), Shape(1, 1, 8, 8), Shape(1, 1, 4, 4)}) ==
        std::array<Index, 2>{8, 8});
  CHECK(alignment_size({Shape(1, 1, 16, 16), Shape(1, 1, 8, 8), Shape(1, 1, 4, 4)}) == std::array<Index, 2>{4, 4});
  CHECK(alignment_size({Shape(1, 1, 40, 24), Shape(1, 1, 20, 12), Shape(1, 1, 10, 6), Shape(1, 1, 5, 3)}) ==
        std::array<Index, 2>{10, 6});
  CHECK_THROWS_AS(alignment_size({Shape(1, 1, 8, 8), Shape(1, 1, 4, 4)}), ContractError);
  CHECK_THROWS_AS(alignment_size({Shape(1, 1, 8, 8), Shape(1, 1, 8, 8), Shape(1, 1, 4, 4)}), ContractError);
  CHECK_THROWS_AS(alignment_size(std::vector<Shape>(5, Shape(1, 1, 2, 2))), ContractError);

  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 3 + static_cast<int>(rng.below(2));
    std::vector<Shape> s;
    Index h = 2 + rng.below(5), w = 2 + rng.below(5);
    for (int i = 0; i < n; ++i) {
      s.insert(s.begin(), Shape(1, 1, h, w));
      h += 1 + rng.below(9);
      w += rng.below(9);
    }
    const auto t = alignment_size(s);
    const Shape& want = n == 4 ? s[n - 2] : s[n - 1];
    CHECK(t == std::array<Index, 2>{want.h(), want.w()});
  }
}

TEST_CASE("concat alignment layout") {
  Rng rng(2);
  auto c = pyramid(rng, {16, 32, 64, 128}, 32);
  ParamSet<double> ps;
  auto mam = MamParams<double>::make(Builder<double>(ps, rng), AlignOp::concat, {16, 32, 64, 128});
  auto b = mam_align(c, mam);
  CHECK(b.fused.shape() == Shape(1, 240, 8, 8));
  CHECK(b.aligned_h == 8);
  CHECK(b.aligned_w == 8);
  REQUIRE(b.layout.size() == 4);
  const std::array<std::pair<Index, Index>, 4> spans{{{0, 16}, {16, 32}, {48, 64}, {112, 128}}};
  for (int i = 0; i < 4; ++i) {
    CHECK(b.layout[i].begin == spans[i].first);
    CHECK(b.layout[i].length == spans[i].second);
  }
  // Layout round trip with identity fusion.
  for (auto& [name, t] : c.levels()) CHECK(bit_equal(separate(b.fused, b, name), resize_to(t, 8, 8)));
  CHECK(ps.parameter_count() == 0);
}

TEST_CASE("add alignment") {
  Rng rng(3);
  auto c = pyramid(rng, {16, 32, 64, 128}, 32, 2);
  ParamSet<double> ps;
  auto mam = MamParams<double>::make(Builder<double>(ps, rng), AlignOp::add, {16, 32, 64, 128});
  auto b = mam_align(c, mam);
  CHECK(b.fused.shape() == Shape(2, 16, 8, 8));
  CHECK(ps.parameter_count() == 16 * (16 + 32 + 64 + 128));
  CHECK(bit_equal(separate(b.fused, b, "C3"), b.fused));

  // Sum of the independently projected, resized levels.
  Tensor<double> want(Shape(2, 16, 8, 8), 0.0);
  for (std::size_t i = 0; i < 4; ++i) want = add(want, mam.proj[i](resize_to(c.levels()[i].second, 8, 8)));
  CHECK(max_abs_diff(want, b.fused) < 1e-12);
}

TEST_CASE("shallow_mfm") {
  Rng rng(4);
  ParamSet<double> ps;
  auto c = pyramid(rng, {16, 32, 64, 128}, 32, 2);
  auto mam = MamParams<double>::make(Builder<double>(ps, rng), AlignOp::concat, {16, 32, 64, 128});
  auto block = DaBlock<double>::make(Builder<double>(ps, rng, "shallow"), 240, 240, 1);
  auto b = mam_align(c, mam);
  auto [e3, e4] = shallow_mfm(b, block, RunMode{true});
  CHECK(e3.shape() == Shape(2, 32, 16, 16));
  CHECK(e4.shape() == Shape(2, 64, 8, 8));

  b.fused = Tensor<double>(b.fused.shape(), 0.0);
  auto [z3, z4] = shallow_mfm(b, block, RunMode{true});
  for (double v : z3.data()) CHECK(v == 0.0);
  for (double v : z4.data()) CHECK(v == 0.0);

  AlignedBundle<double> wrong = b;
  wrong.layout.erase(wrong.layout.begin() + 1);
  CHECK_THROWS_AS(shallow_mfm(wrong, block, RunMode{true}), ContractError);
}

TEST_CASE("transformer block") {
  Rng rng(5);
  ParamSet<double> ps;
  auto blk = TransformerBlock<double>::make(Builder<double>(ps, rng), 64, 4);
  auto x = random_tensor(Shape(2, 64, 4, 4), rng);

  auto a = blk.attention_weights(x);
  CHECK(a.shape() == Shape(2, 4, 16, 16));
  for (Index r = 0; r < a.numel() / 16; ++r) {
    double s = 0;
    for (Index j = 0; j < 16; ++j) s += a[r * 16 + j];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  auto y = blk(x, RunMode{true});
  CHECK(y.shape() == x.shape());

  fill(blk.out.weight, 0.0);
  fill(blk.cb2.conv.weight, 0.0);
  CHECK(bit_equal(blk(x, RunMode{true}), x));

  CHECK_THROWS_AS(TransformerBlock<double>::make(Builder<double>(ps, rng, "bad"), 30, 4), ConfigError);
}

TEST_CASE("deep_mfm") {
  Rng rng(6);
  ParamSet<double> ps;
  FeaturePyramid<double> k;
  k.add("K3", random_tensor(Shape(2, 16, 8, 8), rng));
  k.add("K4", random_tensor(Shape(2, 32, 4, 4), rng));
  k.add("K5", random_tensor(Shape(2, 64, 2, 2), rng));
  auto mam = MamParams<double>::make(Builder<double>(ps, rng), AlignOp::concat, {16, 32, 64});
  std::vector<TransformerBlock<double>> blocks;
  for (int i = 0; i < 2; ++i) blocks.push_back(TransformerBlock<double>::make(Builder<double>(ps, rng, "t" + std::to_string(i)), 112, 4));
  auto b = mam_align(k, mam);
  CHECK(b.fused.shape() == Shape(2, 112, 2, 2));
  auto [e3, e4] = deep_mfm(b, blocks, RunMode{true});
  CHECK(e3.shape() == Shape(2, 16, 4, 4));
  CHECK(e4.shape() == Shape(2, 32, 2, 2));

  auto zb = b;
  zb.fused = Tensor<double>(b.fused.shape(), 0.0);
  auto [z3, z4] = deep_mfm(zb, blocks, RunMode{true});
  for (double v : z3.data()) CHECK(v == 0.0);
  for (double v : z4.data()) CHECK(v == 0.0);

  GradCheckOptions opt;
  opt.max_coords_per_input = 30;
  auto rep = grad_check(
      [&](const std::vector<Tensor<double>>& v) {
        FeaturePyramid<double> kk;
        kk.add("K3", v[0]);
        kk.add("K4", v[1]);
        kk.add("K5", v[2]);
        auto [a3, a4] = deep_mfm(mam_align(kk, mam), blocks, RunMode{true});
        return add(project(a3, 1), project(a4, 2));
      },
      {k.at("K3"), k.at("K4"), k.at("K5"), blocks[0].q.weight, blocks[1].dw.weight, blocks[1].cb1.bn.gamma}, opt);
  INFO("max rel err " << rep.max_rel_err << " at " << rep.worst);
  CHECK(rep.pass);
}

TEST_CASE("mem_embed") {
  Rng rng(7);
  ParamSet<double> ps;
  NeckConfig cfg;
  auto local = random_tensor(Shape(2, 16, 6, 6), rng);
  auto global = random_tensor(Shape(2, 24, 6, 6), rng);
  auto mem = MemParams<double>::make(Builder<double>(ps, rng, "mem"), Compensation::mem, 16, 24, cfg);
  CHECK(mem_embed(local, global, mem, RunMode{true}).shape() == local.shape());

  fill(mem.global.weight, 0.0);
  fill(mem.global.bias, -1000.0);
  CHECK(max_abs_diff(mem_embed(local, global, mem, RunMode{true}), da_block(local, mem.block, RunMode{true})) < 1e-12);

  auto addp = MemParams<double>::make(Builder<double>(ps, rng, "add"), Compensation::add, 16, 24, cfg);
  CHECK(bit_equal(mem_embed(local, Tensor<double>(global.shape(), 0.0), addp, RunMode{true}), local));
  CHECK(mem_embed(local, global, addp, RunMode{true}).shape() == local.shape());

  CHECK_THROWS_AS(mem_embed(local, random_tensor(Shape(2, 24, 3, 3), rng), mem, RunMode{true}), ShapeError);

  GradCheckOptions opt;
  opt.max_coords_per_input = 30;
  auto mem2 = MemParams<double>::make(Builder<double>(ps, rng, "mem2"), Compensation::mem, 16, 24, cfg);
  auto rep = grad_check(
      [&](const std::vector<Tensor<double>>& v) { return project(mem_embed(v[0], v[1], mem2, RunMode{true})); },
      {local, global, mem2.local.weight, mem2.global.bias}, opt);
  INFO("max rel err " << rep.max_rel_err << " at " << rep.worst);
  CHECK(rep.pass);
}

TEST_CASE("neck shape contract across switches") {
  Rng rng(8);
  auto c = pyramid<float>(rng, {16, 32, 64, 128}, 32, 2);
  for (bool ucm : {true, false})
    for (AlignOp a : {AlignOp::concat, AlignOp::add})
      for (Compensation m : {Compensation::mem, Compensation::add})
        for (bool dam : {true, false}) {
          NeckConfig cfg;
          cfg.ucm = ucm;
          cfg.align_op = a;
          cfg.compensation = m;
          cfg.dam = dam;
          ParamSet<float> ps;
          Rng init(9);
          auto neck = Neck<float>::make(Builder<float>(ps, init, "neck"), cfg, {16, 32, 64, 128});
          auto out = neck(c, RunMode{true});
          REQUIRE(out.size() == 3);
          CHECK(out.levels()[0].first == "K3");
          CHECK(out.at("K3").shape() == Shape(2, 32, 16, 16));
          CHECK(out.at("B4").shape() == Shape(2, 64, 8, 8));
          CHECK(out.at("B5").shape() == Shape(2, 128, 4, 4));
          if (!ucm) CHECK(ps.parameter_count() == 0);
        }
  CHECK(parse_align_op("add") == AlignOp::add);
  CHECK(parse_compensation("mem") == Compensation::mem);
  CHECK_THROWS_AS(parse_align_op("mul"), ConfigError);
}

TEST_CASE("neck determinism") {
  Rng rng(10);
  auto c = pyramid<float>(rng, {16, 32, 64, 128}, 32, 2);
  ParamSet<float> pa, pb;
  Rng ia(3), ib(3);
  auto na = Neck<float>::make(Builder<float>(pa, ia), NeckConfig{}, {16, 32, 64, 128});
  auto nb = Neck<float>::make(Builder<float>(pb, ib), NeckConfig{}, {16, 32, 64, 128});
  auto oa = na(c, RunMode{true});
  auto ob = nb(c, RunMode{true});
  for (std::size_t i = 0; i < 3; ++i) CHECK(bit_equal(oa.levels()[i].second, ob.levels()[i].second));
}

TEST_CASE("neck grad_check") {
  Rng rng(11);
  for (AlignOp a : {AlignOp::concat, AlignOp::add}) {
    NeckConfig cfg;
    cfg.align_op = a;
    cfg.n_blocks = 1;
    ParamSet<double> ps;
    auto neck = Neck<double>::make(Builder<double>(ps, rng, "neck"), cfg, {8, 16, 32, 64});
    auto c = pyramid(rng, {8, 16, 32, 64}, 16, 2);
    auto loss = [&](const std::vector<Tensor<double>>& v) {
      FeaturePyramid<double> p;
      for (int i = 0; i < 4; ++i) p.add("C" + std::to_string(i + 2), v[i]);
      auto o = neck(p, RunMode{true});
      return add(add(project(o.at("K3"), 1), project(o.at("B4"), 2)), project(o.at("B5"), 3));
    };
    GradCheckOptions opt;
    opt.max_coords_per_input = 20;
    auto rep = grad_check(loss,
                          {c.at("C2"), c.at("C3"), c.at("C4"), c.at("C5"), ps.param("neck.mem_b4.global.weight"),
                           ps.param("neck.deep0.v.weight")},
                          opt);
    INFO(to_string(a) << " max rel err " << rep.max_rel_err << " at " << rep.worst);
    CHECK(rep.pass);
  }
}
