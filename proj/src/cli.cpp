#include "sarnet/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "sarnet/suite.hpp"
#include "sarnet/train.hpp"

namespace sarnet {

namespace {

namespace fs = std::filesystem;

void write_json(const std::string& path, const nlohmann::json& j) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2) << "\n";
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void print_report(std::ostream& out, const EvalReport& r) {
  out << "mAP50 " << fmt("%.4f", r.map50) << "  P " << fmt("%.4f", r.precision) << "  R " << fmt("%.4f", r.recall)
      << "  F1 " << fmt("%.4f", r.f1) << "\n";
  for (const auto& c : r.classes)
    out << "  class " << c.cls << "  gt " << c.n_gt << "  det " << c.n_det << "  AP50 "
        << (c.ap ? fmt("%.4f", *c.ap) : std::string("n/a")) << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Direction-aware SAR object detector at desk scale", "sarnet"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic SAR-like scenes");
  std::string gen_out;
  int gen_count = 16;
  std::uint64_t gen_seed = 0;
  Index gen_size = 256;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of scenes")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gen_seed, "Dataset seed");
  gen->add_option("--size", gen_size, "Image side in pixels (multiple of 32)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite in double precision");
  std::string gc_module = "all";
  gc->add_option("--module", gc_module, "all|tensor|dam|neck|loss");

  auto* tr = app.add_subcommand("train", "Train a detector with SGD and cosine learning rate decay");
  std::string tr_config, tr_data, tr_out;
  Index tr_steps = -1;
  tr->add_option("--config", tr_config, "ModelConfig JSON (defaults when omitted)");
  tr->add_option("--data", tr_data, "Dataset directory with annotations.jsonl")->required();
  tr->add_option("--out", tr_out, "Checkpoint directory")->required();
  tr->add_option("--steps", tr_steps, "Override the number of optimizer steps");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint, or a detection file against annotations");
  std::string ev_ckpt, ev_data, ev_out, ev_dets, ev_gt;
  int ev_classes = -1;
  double ev_conf = DetectOptions{}.conf_thr;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint directory");
  ev->add_option("--data", ev_data, "Dataset directory");
  ev->add_option("--dets", ev_dets, "Detection JSONL");
  ev->add_option("--gt", ev_gt, "Annotation JSONL");
  ev->add_option("--classes", ev_classes, "Class count for --dets/--gt (default: max id + 1)");
  ev->add_option("--conf", ev_conf, "Score threshold before NMS");
  ev->add_option("--out", ev_out, "Report JSON path");

  auto* in = app.add_subcommand("inspect", "Parameter count and per-level output shapes");
  std::string in_config;
  Index in_size = 256;
  in->add_option("--config", in_config, "ModelConfig JSON (defaults when omitted)");
  in->add_option("--size", in_size, "Input side for the shape listing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*gen) {
      SceneSpec spec;
      spec.size = gen_size;
      write_dataset(gen_out, gen_count, gen_seed, spec);
      out << "wrote " << gen_count << " scenes to " << gen_out << "\n";
      return 0;
    }

    if (*gc) {
      bool ok = true;
      run_grad_suite(gc_module, [&](const SuiteEntry& e) {
        ok = ok && e.ok();
        out << (e.ok() ? "ok   " : "FAIL ") << e.module << " / " << e.name << "  max_rel_err " << fmt("%.3e", e.report.max_rel_err)
            << (e.report.coords_refined ? "  (" + std::to_string(e.report.coords_refined) + " at a finer step)" : "")
            << (e.expect_failure ? "  (negative control, must fail)" : "") << "\n";
        if (!e.ok()) out << "     worst: " << e.report.worst << "\n";
        out.flush();
      });
      out << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
      return ok ? 0 : 1;
    }

    if (*tr) {
      const ModelConfig cfg = tr_config.empty() ? ModelConfig{} : ModelConfig::load(tr_config);
      const auto data = load_dataset(tr_data, static_cast<int>(cfg.head.num_classes));
      auto model = Detector<float>::build(cfg);
      TrainOptions opt;
      opt.steps = tr_steps;
      opt.on_step = [&](const StepRecord& r) {
        out << "step " << r.step << "  lr " << fmt("%.6f", r.lr) << "  loss " << fmt("%.5f", r.total) << "  (cls "
            << fmt("%.4f", r.cls) << " iou " << fmt("%.4f", r.iou) << " dfl " << fmt("%.4f", r.dfl) << ")\n";
      };
      const auto res = train(model, data, opt);
      save_checkpoint(tr_out, model, res.steps, res.loss_history);
      write_json((fs::path(tr_out) / "loss_history.json").string(), res.loss_history);
      out << "checkpoint written to " << tr_out << "\n";
      return 0;
    }

    if (*ev) {
      EvalReport report;
      if (!ev_dets.empty() || !ev_gt.empty()) {
        if (ev_dets.empty() || ev_gt.empty() || !ev_ckpt.empty()) {
          err << "error: --dets and --gt go together and exclude --checkpoint\n";
          return 2;
        }
        const auto dets = load_detections(ev_dets);
        const auto gts = to_image_annotations(load_annotations(ev_gt).records);
        int k = ev_classes;
        if (k < 0) {
          k = 0;
          for (const auto& g : gts)
            for (const auto& b : g.boxes) k = std::max(k, b.cls + 1);
        }
        report = evaluate(dets, gts, k);
      } else {
        if (ev_ckpt.empty() || ev_data.empty()) {
          err << "error: eval needs --checkpoint and --data, or --dets and --gt\n";
          return 2;
        }
        auto ck = load_checkpoint(ev_ckpt);
        const auto data = load_dataset(ev_data, static_cast<int>(ck.model.cfg.head.num_classes));
        DetectOptions opt;
        opt.conf_thr = ev_conf;
        report = evaluate_model(ck.model, data, opt);
      }
      print_report(out, report);
      if (!ev_out.empty()) write_json(ev_out, report.to_json());
      return 0;
    }

    if (*in) {
      const ModelConfig cfg = in_config.empty() ? ModelConfig{} : ModelConfig::load(in_config);
      auto model = Detector<float>::build(cfg);
      Index backbone = 0, neck = 0, head = 0;
      for (const auto& [name, t] : model.params.params()) {
        (name.starts_with("backbone.") ? backbone : name.starts_with("neck.") ? neck : head) += t.numel();
      }
      out << "parameters " << model.params.parameter_count() << " (" << fmt("%.3f", static_cast<double>(model.params.parameter_count()) / 1e6)
          << " M)\n  backbone " << backbone << "\n  neck " << neck << "\n  head " << head << "\n";
      out << "shapes for a " << in_size << "x" << in_size << " input\n";
      for (const auto& [name, s] : model.level_shapes(in_size)) out << "  " << name << " " << s.str() << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace sarnet
