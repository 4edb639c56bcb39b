#include "revnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <thread>

namespace revnet {

namespace ro = revnet::ops;

ShapeFamily shape_family_from_string(const std::string& s) {
  if (s == "sphere") return ShapeFamily::kSphere;
  if (s == "cuboid") return ShapeFamily::kCuboid;
  if (s == "cylinder") return ShapeFamily::kCylinder;
  if (s == "mixed") return ShapeFamily::kMixed;
  REVNET_CHECK(false, "unknown shape family: " + s);
}

std::string to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::kSphere: return "sphere";
    case ShapeFamily::kCuboid: return "cuboid";
    case ShapeFamily::kCylinder: return "cylinder";
    case ShapeFamily::kMixed: return "mixed";
  }
  return "?";
}

void SyntheticShapeSpec::validate() const {
  REVNET_CHECK(crop_fraction > 0.0 && crop_fraction < 1.0,
               "shape spec: crop_fraction must lie in (0,1)");
  REVNET_CHECK(gt_size >= partial_size,
               "shape spec: gt_size must be >= partial_size");
  REVNET_CHECK(partial_size >= 8, "shape spec: partial_size too small");
  REVNET_CHECK(min_scale > 0.0 && max_scale >= min_scale,
               "shape spec: bad scale range");
}

namespace {

struct Vec3 {
  double x, y, z;
};

// Uniform surface samplers, all centered at the origin.

Vec3 sample_sphere(Rng& rng, double r) {
  double x, y, z, n2;
  do {
    x = rng.gaussian();
    y = rng.gaussian();
    z = rng.gaussian();
    n2 = x * x + y * y + z * z;
  } while (n2 < 1e-12);
  const double inv = r / std::sqrt(n2);
  return {x * inv, y * inv, z * inv};
}

Vec3 sample_cuboid(Rng& rng, double a, double b, double c) {
  // face pair areas: x-faces bc, y-faces ac, z-faces ab
  const double ax = b * c, ay = a * c, az = a * b;
  const double u = rng.uniform() * (ax + ay + az);
  const double s = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double p = rng.uniform() * 2.0 - 1.0;
  const double q = rng.uniform() * 2.0 - 1.0;
  if (u < ax) return {s * a, p * b, q * c};
  if (u < ax + ay) return {p * a, s * b, q * c};
  return {p * a, q * b, s * c};
}

Vec3 sample_cylinder(Rng& rng, double r, double h) {
  const double lateral = 2.0 * M_PI * r * (2.0 * h);
  const double caps = 2.0 * M_PI * r * r;
  const double u = rng.uniform() * (lateral + caps);
  const double theta = rng.uniform() * 2.0 * M_PI;
  if (u < lateral) {
    const double z = (rng.uniform() * 2.0 - 1.0) * h;
    return {r * std::cos(theta), r * std::sin(theta), z};
  }
  const double rr = r * std::sqrt(rng.uniform());
  const double z = rng.uniform() < 0.5 ? -h : h;
  return {rr * std::cos(theta), rr * std::sin(theta), z};
}

struct ShapeParams {
  ShapeFamily family;
  double a, b, c;
};

ShapeParams draw_shape(const SyntheticShapeSpec& spec, Rng& rng) {
  ShapeFamily fam = spec.family;
  if (fam == ShapeFamily::kMixed) {
    const std::uint64_t pick = rng.uniform_int(3);
    fam = pick == 0 ? ShapeFamily::kSphere
                    : (pick == 1 ? ShapeFamily::kCuboid : ShapeFamily::kCylinder);
  }
  auto scale = [&] { return rng.uniform(spec.min_scale, spec.max_scale); };
  switch (fam) {
    case ShapeFamily::kSphere: return {fam, scale(), 0, 0};
    case ShapeFamily::kCuboid: return {fam, scale(), scale(), scale()};
    default: return {fam, 0.6 * scale(), scale(), 0};  // radius, half-height
  }
}

Vec3 sample_surface(const ShapeParams& sp, Rng& rng) {
  switch (sp.family) {
    case ShapeFamily::kSphere: return sample_sphere(rng, sp.a);
    case ShapeFamily::kCuboid: return sample_cuboid(rng, sp.a, sp.b, sp.c);
    default: return sample_cylinder(rng, sp.a, sp.b);
  }
}

}  // namespace

std::pair<PointCloud, PointCloud> generate_pair(const SyntheticShapeSpec& spec,
                                                std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const ShapeParams sp = draw_shape(spec, rng);

  std::vector<std::array<double, 3>> gt(static_cast<size_t>(spec.gt_size));
  for (auto& p : gt) {
    const Vec3 v = sample_surface(sp, rng);
    p = {v.x, v.y, v.z};
  }

  // candidate pool for the partial view
  const int pool = std::max(4 * spec.partial_size, 64);
  std::vector<std::array<double, 3>> cand(static_cast<size_t>(pool));
  double centroid[3] = {0, 0, 0};
  for (auto& p : cand) {
    const Vec3 v = sample_surface(sp, rng);
    p = {v.x, v.y, v.z};
    centroid[0] += v.x;
    centroid[1] += v.y;
    centroid[2] += v.z;
  }
  for (double& c : centroid) c /= pool;

  const Vec3 dir = sample_sphere(rng, 1.0);
  std::vector<std::pair<double, int>> proj(static_cast<size_t>(pool));
  for (int i = 0; i < pool; ++i)
    proj[static_cast<size_t>(i)] = {
        (cand[i][0] - centroid[0]) * dir.x + (cand[i][1] - centroid[1]) * dir.y +
            (cand[i][2] - centroid[2]) * dir.z,
        i};
  std::sort(proj.begin(), proj.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  int keep = static_cast<int>(std::lround(spec.crop_fraction * pool));
  keep = std::max(keep, 8);  // shifted plane when the crop is degenerate
  keep = std::min(keep, pool);

  std::vector<std::array<double, 3>> part;
  part.reserve(static_cast<size_t>(std::min(keep, spec.partial_size)));
  for (int i = 0; i < keep && static_cast<int>(part.size()) < spec.partial_size;
       ++i)
    part.push_back(cand[static_cast<size_t>(proj[static_cast<size_t>(i)].second)]);

  PointCloud gt_cloud = PointCloud::from_points(gt);
  PointCloud partial = PointCloud::from_points(part, spec.partial_size);
  if (spec.random_pose) {
    const Rotation r = random_rotation(rng);
    gt_cloud = rotated(gt_cloud, r);
    partial = rotated(partial, r);
  }
  return {partial, gt_cloud};
}

// ---- AdamW ------------------------------------------------------------------

double AdamW::current_lr() const {
  if (cfg.decay_interval <= 0) return cfg.lr;
  const long k = step_count / cfg.decay_interval;
  return cfg.lr * std::pow(cfg.decay_factor, static_cast<double>(k));
}

void AdamW::step(const ParamList& params, const GradMap& grads) {
  grads.check_finite("adamw: non-finite gradient");
  const double lr = current_lr();
  ++step_count;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));

  double clip_scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    double norm2 = 0.0;
    for (const auto& [name, p] : params) {
      if (!grads.has(p)) continue;
      const auto g = grads.grad(p);
      for (double v : g) norm2 += v * v;
    }
    const double norm = std::sqrt(norm2);
    if (norm > cfg.clip_norm) clip_scale = cfg.clip_norm / norm;
  }

  for (const auto& [name, param] : params) {
    Tensor p = param;
    auto& vals = p.leaf_values();
    const std::vector<double> g = grads.grad(p);
    auto& mom = moments[p.node()];
    if (mom.m.empty()) {
      mom.m.assign(vals.size(), 0.0);
      mom.v.assign(vals.size(), 0.0);
    }
    for (size_t i = 0; i < vals.size(); ++i) {
      const double gi = g[i] * clip_scale;
      mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * gi;
      mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      vals[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                       cfg.weight_decay * vals[i]);
    }
  }
}

// ---- training loop -----------------------------------------------------------

int effective_threads(int requested) {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  int cap = hw;
  if (const char* env = std::getenv("REVNET_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) cap = std::min(cap, v);
  }
  if (requested >= 1) cap = std::min(cap, requested);
  return std::max(cap, 1);
}

double evaluate_heldout(
    const REVNet& model,
    const std::vector<std::pair<PointCloud, PointCloud>>& pairs) {
  REVNET_CHECK(!pairs.empty(), "evaluate_heldout: no pairs");
  double total = 0.0;
  for (const auto& [partial, gt] : pairs) {
    auto [anchors, fine] = model.forward(partial);
    total += chamfer_l1(fine, gt);
  }
  return total / static_cast<double>(pairs.size());
}

namespace {

struct SampleResult {
  double loss = 0.0;
  double fine_cd = 0.0;
  GradMap grads;
};

SampleResult run_sample(const REVNet& model, const PointCloud& partial,
                        const PointCloud& gt) {
  auto [anchors, fine] = model.forward(partial);
  Tensor gt_pts = gt.valid_points();
  Tensor anchor_term = ops::chamfer_l1_op(anchors.positions, gt_pts);
  Tensor fine_term = ops::chamfer_l1_op(fine.points, gt_pts);
  Tensor loss = ops::add(anchor_term, fine_term);
  SampleResult r;
  r.loss = loss.value();
  r.fine_cd = fine_term.value();
  REVNET_CHECK(std::isfinite(r.loss), "train: loss diverged (non-finite)");
  r.grads = backward(loss);
  return r;
}

}  // namespace

TrainResult train(REVNet& model, const SyntheticShapeSpec& data,
                  const TrainOptions& opt) {
  data.validate();
  REVNET_CHECK(opt.epochs >= 0 && opt.steps_per_epoch >= 1 && opt.batch >= 1,
               "train: bad options");
  AdamWConfig oc = opt.opt;
  if (oc.decay_interval == 0 && opt.decay_epochs > 0)
    oc.decay_interval =
        static_cast<long>(opt.decay_epochs) * opt.steps_per_epoch;
  AdamW optimizer(oc);
  const ParamList params = model.parameters();
  const int threads = effective_threads(opt.threads);

  Rng data_rng(opt.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::pair<PointCloud, PointCloud>> heldout;
  Rng held_rng(opt.seed ^ 0x69d93b735b1b3d47ull);
  for (int i = 0; i < opt.heldout_pairs; ++i)
    heldout.push_back(generate_pair(data, held_rng.fork_seed()));

  TrainResult result;
  result.initial_heldout = evaluate_heldout(model, heldout);
  result.final_heldout = result.initial_heldout;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int step = 0; step < opt.steps_per_epoch; ++step) {
      std::vector<std::pair<PointCloud, PointCloud>> batch;
      batch.reserve(static_cast<size_t>(opt.batch));
      for (int b = 0; b < opt.batch; ++b)
        batch.push_back(generate_pair(data, data_rng.fork_seed()));

      std::vector<SampleResult> results(static_cast<size_t>(opt.batch));
      const int workers = std::min(threads, opt.batch);
      if (workers <= 1) {
        for (int b = 0; b < opt.batch; ++b)
          results[static_cast<size_t>(b)] =
              run_sample(model, batch[static_cast<size_t>(b)].first,
                         batch[static_cast<size_t>(b)].second);
      } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(workers));
        for (int w = 0; w < workers; ++w)
          pool.emplace_back([&, w] {
            for (int b = w; b < opt.batch; b += workers)
              results[static_cast<size_t>(b)] =
                  run_sample(model, batch[static_cast<size_t>(b)].first,
                             batch[static_cast<size_t>(b)].second);
          });
        for (auto& t : pool) t.join();
      }

      // fixed-order reduction keeps the run deterministic under threading
      GradMap total;
      double batch_cd = 0.0;
      const double inv_b = 1.0 / static_cast<double>(opt.batch);
      for (int b = 0; b < opt.batch; ++b) {
        total.add_scaled(results[static_cast<size_t>(b)].grads, inv_b);
        batch_cd += results[static_cast<size_t>(b)].fine_cd * inv_b;
      }
      optimizer.step(params, total);
      epoch_loss += batch_cd;
    }
    EpochRow row;
    row.epoch = epoch + 1;
    row.train_cd = epoch_loss / opt.steps_per_epoch;
    row.heldout_cd = evaluate_heldout(model, heldout);
    result.curve.push_back(row);
    result.final_heldout = row.heldout_cd;
    if (opt.verbose)
      std::fprintf(stderr, "epoch %d: train=%.6g heldout=%.6g lr=%.3g\n",
                   row.epoch, row.train_cd, row.heldout_cd,
                   optimizer.current_lr());
  }
  return result;
}

void write_curve_csv(const std::string& path,
                     const std::vector<EpochRow>& curve) {
  std::ofstream out(path);
  REVNET_CHECK(out.good(), "cannot open curve file for writing: " + path);
  out << "epoch,train_cd,heldout_cd\n";
  char buf[128];
  for (const EpochRow& r : curve) {
    std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6g\n", r.epoch, r.train_cd,
                  r.heldout_cd);
    out << buf;
  }
}

}  // namespace revnet
