#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "revnet/model.hpp"

namespace revnet {

enum class ShapeFamily { kSphere, kCuboid, kCylinder, kMixed };

ShapeFamily shape_family_from_string(const std::string& s);
std::string to_string(ShapeFamily f);

/// Synthetic surface-sampled shapes standing in for scanned objects: a dense
/// ground truth plus a half-space crop as the partial observation.
struct SyntheticShapeSpec {
  ShapeFamily family = ShapeFamily::kMixed;
  double min_scale = 0.6;
  double max_scale = 1.0;
  int partial_size = 256;  // partial buffer (zero-padded when the crop is small)
  int gt_size = 1024;
  double crop_fraction = 0.5;  // kept fraction; 0.5 puts the plane near the centroid
  bool random_pose = false;    // default: canonical pose (no augmentation)

  void validate() const;
};

/// Deterministic (partial, ground-truth) pair for a seed. The partial keeps
/// the points on one side of a plane orthogonal to a random direction,
/// positioned at the (1 - crop_fraction) quantile of the projections; if a
/// crop leaves fewer than 8 points the plane shifts until 8 remain.
std::pair<PointCloud, PointCloud> generate_pair(const SyntheticShapeSpec& spec,
                                                std::uint64_t seed);

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double decay_factor = 0.7;
  long decay_interval = 0;  // steps between decays; 0 disables the schedule
  double clip_norm = 10.0;  // global gradient norm cap; <= 0 disables
};

/// Decoupled weight-decay Adam with a stepped learning-rate schedule.
struct AdamW {
  AdamWConfig cfg;
  long step_count = 0;

  explicit AdamW(AdamWConfig c = {}) : cfg(c) {}
  /// Learning rate for the next step.
  double current_lr() const;
  /// Applies one update in place. Throws on non-finite gradients.
  void step(const ParamList& params, const GradMap& grads);

  struct Moments {
    std::vector<double> m, v;
  };
  std::unordered_map<const Node*, Moments> moments;
};

struct TrainOptions {
  int epochs = 30;
  int steps_per_epoch = 60;
  int batch = 8;
  int decay_epochs = 20;
  std::uint64_t seed = 0;
  int heldout_pairs = 16;
  int threads = 0;  // 0 = REVNET_THREADS or hardware default
  bool verbose = false;
  AdamWConfig opt;
};

struct EpochRow {
  int epoch;
  double train_cd;
  double heldout_cd;
};

struct TrainResult {
  std::vector<EpochRow> curve;
  double initial_heldout = 0.0;
  double final_heldout = 0.0;
};

/// Mini-batch supervised loop over generated pairs. Deterministic for a
/// fixed seed: per-sample gradient maps are reduced in sample order
/// regardless of thread count.
TrainResult train(REVNet& model, const SyntheticShapeSpec& data,
                  const TrainOptions& opt);

/// Mean CD-l1 between model completions and ground truths.
double evaluate_heldout(const REVNet& model,
                        const std::vector<std::pair<PointCloud, PointCloud>>& pairs);

void write_curve_csv(const std::string& path, const std::vector<EpochRow>& curve);

/// Worker-thread cap: min(explicit request, REVNET_THREADS, hardware).
int effective_threads(int requested);

}  // namespace revnet
