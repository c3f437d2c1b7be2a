#include "sarnet/scene.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <thread>

#include "sarnet/layers.hpp"

namespace sarnet {

namespace {

int bucket(double v, const std::vector<double>& edges) {
  int b = 0;
  for (double e : edges)
    if (v >= e) ++b;
  return b;
}

bool inside(const Target& t, double px, double py) {
  const double dx = px - t.cx, dy = py - t.cy;
  const double c = std::cos(t.theta), s = std::sin(t.theta);
  const double u = (dx * c + dy * s) / (0.5 * t.length);
  const double v = (-dx * s + dy * c) / (0.5 * t.width);
  if (t.kind == TargetKind::rectangle) return std::abs(u) <= 1 && std::abs(v) <= 1;
  return u * u + v * v <= 1;
}

}  // namespace

int SceneSpec::class_of(double length, double aspect) const {
  return bucket(length, length_edges) * static_cast<int>(aspect_edges.size() + 1) + bucket(aspect, aspect_edges);
}

void SceneSpec::validate() const {
  if (size < 32 || size % 32 != 0) throw ConfigError("scene size must be a positive multiple of 32, got " + std::to_string(size));
  if (looks <= 0) throw ConfigError("speckle looks must be positive");
  if (min_targets < 0 || max_targets < min_targets) throw ConfigError("target count range is invalid");
  if (min_length <= 0 || max_length < min_length) throw ConfigError("target length range is invalid");
  if (min_aspect <= 0 || max_aspect < min_aspect || max_aspect > 1) throw ConfigError("target aspect range is invalid");
  if (orientation_hi < orientation_lo) throw ConfigError("orientation range is invalid");
  if (background <= 0 || contrast < 0 || edge_boost < 1) throw ConfigError("intensity settings are invalid");
  if (!std::is_sorted(length_edges.begin(), length_edges.end()) || !std::is_sorted(aspect_edges.begin(), aspect_edges.end()))
    throw ConfigError("bucket edges must be sorted");
}

Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  Rng rng(seed);
  const Index n = spec.size;
  const auto area = static_cast<std::size_t>(n * n);
  Scene scene;
  std::vector<std::uint8_t> occupied(area, 0);  // targets dilated by 2 px

  const int count = spec.min_targets + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_targets - spec.min_targets + 1)));
  for (int k = 0; k < count; ++k) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      Target t;
      t.kind = rng.uniform() < 0.5 ? TargetKind::rectangle : TargetKind::ellipse;
      t.length = rng.uniform(spec.min_length, spec.max_length);
      const double aspect = rng.uniform(spec.min_aspect, spec.max_aspect);
      t.width = std::max(spec.min_width, aspect * t.length);
      t.theta = rng.uniform(spec.orientation_lo, spec.orientation_hi);
      t.cx = rng.uniform(0, static_cast<double>(n));
      t.cy = rng.uniform(0, static_cast<double>(n));
      t.cls = spec.class_of(t.length, aspect);

      const double c = std::abs(std::cos(t.theta)), s = std::abs(std::sin(t.theta));
      const double ex = 0.5 * (t.length * c + t.width * s), ey = 0.5 * (t.length * s + t.width * c);
      if (t.cx - ex < 1 || t.cy - ey < 1 || t.cx + ex > static_cast<double>(n - 1) || t.cy + ey > static_cast<double>(n - 1))
        continue;

      t.mask.assign(area, 0);
      bool clash = false;
      long pixels = 0;
      const auto x0 = static_cast<Index>(std::floor(t.cx - ex)), x1 = static_cast<Index>(std::ceil(t.cx + ex));
      const auto y0 = static_cast<Index>(std::floor(t.cy - ey)), y1 = static_cast<Index>(std::ceil(t.cy + ey));
      for (Index y = std::max<Index>(y0, 0); y <= std::min(y1, n - 1); ++y)
        for (Index x = std::max<Index>(x0, 0); x <= std::min(x1, n - 1); ++x)
          if (inside(t, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
            const auto i = static_cast<std::size_t>(y * n + x);
            t.mask[i] = 1;
            clash = clash || occupied[i];
            ++pixels;
          }
      if (clash || pixels < 4) continue;

      Box hull{1e300, 1e300, -1e300, -1e300};
      for (Index y = 0; y < n; ++y)
        for (Index x = 0; x < n; ++x) {
          if (!t.mask[static_cast<std::size_t>(y * n + x)]) continue;
          hull.x1 = std::min(hull.x1, static_cast<double>(x));
          hull.y1 = std::min(hull.y1, static_cast<double>(y));
          hull.x2 = std::max(hull.x2, static_cast<double>(x + 1));
          hull.y2 = std::max(hull.y2, static_cast<double>(y + 1));
          for (Index dy = -2; dy <= 2; ++dy)
            for (Index dx = -2; dx <= 2; ++dx) {
              const Index yy = y + dy, xx = x + dx;
              if (yy >= 0 && yy < n && xx >= 0 && xx < n) occupied[static_cast<std::size_t>(yy * n + xx)] = 1;
            }
        }
      scene.record.boxes.push_back({hull, t.cls});
      scene.targets.push_back(std::move(t));
      break;
    }
  }

  // Smooth low-frequency field for the background.
  struct Wave {
    double a, fx, fy, phase;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 3; ++k)
    waves.push_back({rng.uniform(0.0, 0.1), static_cast<double>(rng.below(5)) - 2.0, static_cast<double>(rng.below(5)) - 2.0,
                     rng.uniform(0.0, 2.0 * std::numbers::pi)});

  std::vector<std::uint8_t> owner(area, 0);  // 1 interior, 2 edge
  for (const auto& t : scene.targets)
    for (Index y = 0; y < n; ++y)
      for (Index x = 0; x < n; ++x) {
        const auto i = static_cast<std::size_t>(y * n + x);
        if (!t.mask[i]) continue;
        const bool edge = x == 0 || y == 0 || x == n - 1 || y == n - 1 || !t.mask[i - 1] || !t.mask[i + 1] ||
                          !t.mask[i - static_cast<std::size_t>(n)] || !t.mask[i + static_cast<std::size_t>(n)];
        owner[i] = edge ? 2 : 1;
      }

  const double target_level = spec.background + 2.0 * spec.contrast;
  std::vector<float> v(area);
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) {
      const auto i = static_cast<std::size_t>(y * n + x);
      const double speckle = rng.gamma(spec.looks) / spec.looks;
      double level;
      if (owner[i] == 0) {
        double field = 1;
        for (const auto& w : waves)
          field += w.a * std::cos(2.0 * std::numbers::pi * (w.fx * static_cast<double>(x) + w.fy * static_cast<double>(y)) /
                                      static_cast<double>(n) +
                                  w.phase);
        level = spec.background * field;
      } else {
        level = owner[i] == 2 ? target_level * spec.edge_boost : target_level;
      }
      v[i] = static_cast<float>(std::clamp(level * speckle, 0.0, 1.0));
    }
  scene.image = Tensor<float>(Shape(1, 1, n, n), std::move(v));
  scene.record.width = static_cast<double>(n);
  scene.record.height = static_cast<double>(n);
  return scene;
}

std::vector<std::uint64_t> scene_seeds(std::uint64_t seed, int count) {
  Rng rng(seed);
  std::vector<std::uint64_t> out(static_cast<std::size_t>(std::max(count, 0)));
  for (auto& s : out) s = rng.next_u64();
  return out;
}

int worker_threads() {
  if (const char* env = std::getenv("SARNET_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void write_dataset(const std::string& dir, int count, std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  if (count < 0) throw ConfigError("scene count must be >= 0");
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  const auto seeds = scene_seeds(seed, count);
  std::vector<AnnotationRecord> records(static_cast<std::size_t>(count));

  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto work = [&] {
    for (int i; (i = next++) < count;) {
      try {
        Scene s = generate_scene(seeds[static_cast<std::size_t>(i)], spec);
        char name[32];
        std::snprintf(name, sizeof name, "images/scene_%04d.ntf", i);
        ntf_write(s.image, (fs::path(dir) / name).string(), 2);
        s.record.image = name;
        records[static_cast<std::size_t>(i)] = std::move(s.record);
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
      }
    }
  };
  const int threads = std::min(worker_threads(), std::max(count, 1));
  for (int t = 0; t < threads; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  save_annotations((fs::path(dir) / "annotations.jsonl").string(), records);
}

std::vector<Sample> load_dataset(const std::string& dir, int num_classes) {
  namespace fs = std::filesystem;
  const auto loaded = load_annotations((fs::path(dir) / "annotations.jsonl").string(), num_classes);
  if (loaded.clamped > 0) std::fprintf(stderr, "warning: %ld boxes clamped to image bounds\n", loaded.clamped);
  std::vector<Sample> out;
  for (const auto& r : loaded.records) {
    Sample s{load_image((fs::path(dir) / r.image).string()), r};
    if ((r.width > 0 && r.width != static_cast<double>(s.image.dim(3))) ||
        (r.height > 0 && r.height != static_cast<double>(s.image.dim(2))))
      throw FormatError("image " + r.image + " size disagrees with its annotation", 0);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace sarnet
