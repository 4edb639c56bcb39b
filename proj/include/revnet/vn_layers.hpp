#pragma once

#include <atomic>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "revnet/ops.hpp"
#include "revnet/rng.hpp"
#include "revnet/tensor.hpp"

// Vector Neuron layer algebra. A VN feature is an ordered list of C
// 3-vectors stored as {C,3}; a set of n features is {n,C,3}. Rotations act
// on the right, X -> X*R, and every layer here commutes with that action.

namespace revnet {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

/// {C,3} -> {1,C,3}; {n,C,3} passes through.
Tensor as_set(const Tensor& x);

/// Linear map across channels, optionally with the rotation-equivariant bias
/// term B * (Wb X) / ||Wb X||_F. A bias direction with Frobenius norm below
/// 1e-8 contributes nothing (no direction is inferable from a null feature).
struct VNLinear {
  Tensor weight;    // {Cout, Cin}
  Tensor bias_map;  // {3, Cin}
  Tensor bias;      // {Cout, 3}
  bool has_bias = false;

  VNLinear() = default;
  VNLinear(int cin, int cout, bool with_bias, Rng& rng);

  Tensor forward(const Tensor& x) const;
  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Projects each channel vector onto the halfspace of a learned direction:
/// x stays if <x,k> > 0, otherwise x -> x - <x,k/|k|> k/|k|.
struct VNReLU {
  Tensor dir_map;  // {C,C}, bias-free

  VNReLU() = default;
  VNReLU(int c, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Core projection with explicit per-channel directions (same shape as x).
/// Channels whose direction norm is below 1e-12 pass through unchanged.
Tensor vn_relu_project(const Tensor& x, const Tensor& directions);

/// Channel-wise arithmetic mean over a feature set {n,C,3} -> {C,3}.
Tensor vn_mean_pool(const Tensor& xs);

/// Per channel, selects the member vector best aligned with a learned
/// direction (ties to the lowest index). The direction map receives no
/// gradient through the discrete selection.
struct VNMaxPool {
  Tensor dir_map;  // {C,C}

  VNMaxPool() = default;
  VNMaxPool(int c, Rng& rng);
  Tensor forward(const Tensor& xs) const;  // {n,C,3} -> {C,3}
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Selection with explicit directions {C,3}.
Tensor vn_max_pool_select(const Tensor& xs, const Tensor& directions);

/// Normalizes the rotation-invariant channel norms across a batch
/// (mean norm per channel driven to 1, times the learned scale).
struct VNBatchNorm {
  Tensor gamma;  // {C}
  double eps = 1e-12;
  double momentum = 0.9;
  mutable std::vector<double> running_mean_norm;
  mutable bool has_running = false;

  VNBatchNorm() = default;
  explicit VNBatchNorm(int c);
  Tensor forward(const Tensor& xs, bool training = true) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// 2-norm layer normalization: each feature's channel vectors divided by the
/// RMS of its channel norms (floored at 1e-12), times the learned scale.
struct VNLayerNorm2 {
  Tensor scale;  // {C}

  VNLayerNorm2() = default;
  explicit VNLayerNorm2(int c);
  Tensor forward(const Tensor& x) const;  // per feature, set-aware
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Whitening handling of VNZCANorm::forward. kLive recomputes the transform
/// from the inputs each call; kCapture stores it on the next call and then
/// behaves as kFrozen, which reuses the stored transform. Gradient checks
/// freeze the whitening so finite differences probe the same stop-gradient
/// forward that reverse mode differentiates.
enum class WhiteningMode { kLive, kCapture, kFrozen };

/// ZCA whitening layer normalization over a feature set: all n*C vectors are
/// centered and decorrelated by U (Lambda+eps)^(-1/2) U^T, then channel-scaled
/// by alpha. The eigendecomposition is treated as a constant in backward
/// (stop-gradient); the mean path remains differentiable.
struct VNZCANorm {
  Tensor alpha;  // {C}
  double eps = 1e-5;
  mutable WhiteningMode mode = WhiteningMode::kLive;
  mutable Tensor captured_w;

  VNZCANorm() = default;
  explicit VNZCANorm(int c);
  Tensor forward(const Tensor& xs) const;
  /// Forward with an externally fixed whitening matrix; this is the function
  /// finite differences must probe when validating the stop-gradient rule.
  Tensor forward_frozen(const Tensor& xs, const Tensor& w_zca) const;
  /// Whitening matrix of the current values (constant tensor).
  Tensor whitening(const Tensor& xs) const;
  void set_whitening_mode(WhiteningMode m) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct VNMLPStageSpec {
  int out_channels;
  bool bias = false;
  bool zca_norm = false;
  bool relu = false;
};

/// Sequential VN stages (linear [+bias], optional ZCA norm over the set,
/// optional VN-ReLU), with an optional residual connection when channel
/// counts match.
struct VNMLP {
  struct Stage {
    VNLinear linear;
    std::optional<VNZCANorm> norm;
    std::optional<VNReLU> relu;
  };
  std::vector<Stage> stages;
  bool residual = false;

  VNMLP() = default;
  VNMLP(int cin, const std::vector<VNMLPStageSpec>& spec, Rng& rng,
        bool residual = false);
  Tensor forward(const Tensor& xs) const;
  int out_channels(int cin_if_empty = -1) const;
  void set_whitening_mode(WhiteningMode m) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Equivariant-to-invariant conversion: a VN-MLP emits a 3x3 transform T per
/// feature; X_inv = X T^T is rotation-invariant while T is equivariant.
/// With `orthonormalize`, rows of T are Gram-Schmidt orthonormalized in
/// fixed order and the third row is flipped if det < 0, keeping T in SO(3)
/// so X_inv * T inverts the transform exactly. Rank-deficient raw transforms
/// are nudged by 1e-8*I and counted in `degenerate_count`.
struct VNInv {
  VNMLP mlp;  // C -> 3 channels
  bool orthonormalize = true;
  mutable std::atomic<long> degenerate_count{0};

  VNInv() = default;
  VNInv(int c, int hidden, bool orthonormalize, Rng& rng);
  VNInv(const VNInv& other);
  VNInv& operator=(const VNInv& other);

  std::pair<Tensor, Tensor> forward(const Tensor& x) const;      // {C,3}
  std::pair<Tensor, Tensor> forward_set(const Tensor& xs) const; // {n,C,3}
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Row-wise Gram-Schmidt over a batch of 3x3 matrices, det fixed to +1.
Tensor orthonormalize_rows3(const Tensor& t);

/// Edge convolution: per query point, k nearest source points form edge
/// features concat[center, neighbor - center] (channel axis), mapped by a
/// shared VN-MLP and mean-pooled. With no feature tensors the raw coordinate
/// is the 1-channel center feature.
struct VNEdgeConv {
  VNMLP mlp;
  int k = 1;

  VNEdgeConv() = default;
  /// cin_features = 0 lifts raw coordinates (2 -> cout through `hidden`).
  VNEdgeConv(int cin_features, int cout, int k, Rng& rng);

  /// Coordinate lifting; positions may be graph tensors ({m,3} and {s,3}).
  Tensor forward_points(const Tensor& query_pts, const Tensor& source_pts) const;
  /// Feature edge conv over one set: features {n,C,3} at positions {n,3}.
  Tensor forward_features(const Tensor& positions, const Tensor& features) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

}  // namespace revnet
