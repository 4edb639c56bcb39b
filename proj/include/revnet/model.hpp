#pragma once

#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "revnet/geometry.hpp"
#include "revnet/vn_layers.hpp"

namespace revnet {

struct ModelConfig {
  // input embedding
  int k0 = 16;  // neighbors for lifting raw coordinates
  int c0 = 32;  // embedding channels
  // backbone stages: FPS size, channel width, residual MLP count
  struct Stage {
    int size;
    int channels;
    int resmlps;
  };
  std::vector<Stage> stages;  // final stage size == n_observed
  int k_group = 16;           // grouping neighbors in VN-SA / VN-ResMLP
  int n_observed = 128;       // N
  int m_missing = 128;        // M
  int anchor_channels = 64;   // fused anchor feature width (= transformer C)
  int global_channels = 128;  // Cg
  // transformer
  int n_enc = 4;
  int n_dec = 6;
  int heads = 4;
  int k_attn = 8;       // neighbors for the query positional embedding
  int ff_channels = 0;  // block MLP width; 0 means = anchor_channels
  // decoders
  int points_per_anchor = 32;
  int predictor_hidden = 128;  // canonical-coordinate MLP width
  int fine_hidden = 128;       // fine offset MLP width
  int inv_hidden = 0;          // VN-Inv internal width; 0 means = channels

  static ModelConfig paper_scale();
  static ModelConfig toy();
  static ModelConfig tiny();
  void validate() const;
  /// Dense output size (N+M) * points_per_anchor.
  int output_size() const;
};

/// Anchor positions with their equivariant features.
struct AnchorSet {
  Tensor positions;  // {K,3}
  Tensor features;   // {K,C,3}

  int count() const { return positions.defined() ? positions.dim(0) : 0; }
  int channels() const { return features.defined() ? features.dim(1) : 0; }
};

/// Dense scalar layer on row-major batches: y = x W + b, W stored {in,out}.
struct DenseLayer {
  Tensor weight;  // {in,out}
  Tensor bias;    // {out}

  DenseLayer() = default;
  DenseLayer(int in, int out, Rng& rng);
  Tensor forward(const Tensor& x) const;  // {n,in} -> {n,out}
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Plain MLP with ReLU between layers, acting on rotation-invariant rows.
struct ScalarMLP {
  std::vector<DenseLayer> layers;

  ScalarMLP() = default;
  ScalarMLP(int in, const std::vector<int>& widths, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// One head of channel-wise subtraction attention: scores are an invariant
/// MLP of VN-Inv(Q_j - K_i), applied per channel.
struct CWSAHead {
  VNInv inv;        // orthonormalize = false
  ScalarMLP score;  // 3*Ch -> hidden -> Ch

  CWSAHead() = default;
  CWSAHead(int channels, Rng& rng);
  /// Raw (pre-softmax) scores {m,n,Ch} for Q {m,Ch,3}, K {n,Ch,3}.
  Tensor raw_scores(const Tensor& q, const Tensor& k) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Multi-head CWSA: channels are partitioned across heads, each with its own
/// VN-Inv and score MLP; softmax runs over the key axis per channel.
struct MultiHeadCWSA {
  int heads = 1;
  std::vector<CWSAHead> head;

  MultiHeadCWSA() = default;
  MultiHeadCWSA(int channels, int heads, Rng& rng);
  /// Post-softmax score matrix {n,C} for a single query {C,3}.
  Tensor scores(const Tensor& q_single, const Tensor& k) const;
  /// Weighted aggregation {m,C,3} for Q {m,C,3}, K/V {n,C,3}.
  Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Pre-norm-free transformer block: attention + projection + residual, then
/// VN-MLP + residual. Zeroing the projection and the MLP's last linear makes
/// the block an identity map.
struct AttentionBlock {
  MultiHeadCWSA attn;
  VNLinear out_proj;  // C -> C
  VNMLP mlp;          // C -> ff -> C, last stage plain linear

  AttentionBlock() = default;
  AttentionBlock(int channels, int heads, int ff, Rng& rng);
  Tensor forward_self(const Tensor& x) const;
  Tensor forward_cross(const Tensor& q, const Tensor& kv) const;
  void set_whitening_mode(WhiteningMode m) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

class REVNet {
 public:
  REVNet(const ModelConfig& cfg, Rng& rng);
  REVNet(const ModelConfig& cfg, std::uint64_t seed);

  /// Hierarchical backbone: input embedding, then per stage VN-SA
  /// (FPS downsample, kNN grouping with relative position encoding, mean
  /// pooling) and residual VN-MLP blocks; per-anchor stage features are
  /// concatenated and fused. Anchor positions are rows of the input cloud.
  AnchorSet backbone(const PointCloud& cloud) const;

  /// Predicts missing anchor positions in the canonical frame of the global
  /// feature and maps them back with the frame transform.
  /// Returns (positions {M,3}, global feature {Cg,3}, frame T {3,3}).
  std::tuple<Tensor, Tensor, Tensor> predict_missing_positions(
      const AnchorSet& observed) const;

  /// Encoder-decoder transformer producing features for the predicted
  /// anchors: {M,C,3}.
  Tensor matr(const AnchorSet& observed, const Tensor& predicted_positions,
              const Tensor& global_feature) const;

  /// Decodes every anchor into points_per_anchor offsets emitted in a local
  /// invariant frame and mapped back: {(N+M)*points_per_anchor, 3}.
  Tensor fine_decode(const AnchorSet& all_anchors) const;

  /// Full pipeline; returns the union anchor set and the dense completion.
  std::pair<AnchorSet, PointCloud> forward(const PointCloud& cloud) const;

  /// Relative position encoding of a single pair (test hook).
  Tensor rpe_single(int stage, const Tensor& pi, const Tensor& pj) const;

  ParamList parameters() const;
  const ModelConfig& config() const { return cfg_; }
  /// Overwrites parameters by name (checkpoint restore).
  void load_parameters(const ParamList& named);
  /// Applies a whitening mode to every ZCA normalization in the model
  /// (gradient-check support; see WhiteningMode).
  void set_whitening_mode(WhiteningMode m) const;

 private:
  struct SAStage {
    VNMLP pre;   // neighbor update before grouping
    VNMLP rpe;   // 1 -> channels
    struct ResMLP {
      VNMLP mlp1;
      VNMLP rpe;
      VNMLP mlp2;
    };
    std::vector<ResMLP> res;
  };

  ModelConfig cfg_;
  VNEdgeConv input_embed_;
  std::vector<SAStage> stages_;
  VNMLP fuse_;
  // missing anchor position predictor
  VNMLP lift_;
  VNInv global_inv_;
  ScalarMLP coord_mlp_;
  // transformer
  VNEdgeConv query_embed_;
  VNMLP query_mlp_;
  std::vector<AttentionBlock> encoder_;
  std::vector<AttentionBlock> decoder_;
  // fine decoder
  VNInv fine_inv_;
  ScalarMLP coarse_mlp_;
  ScalarMLP refine_mlp_;
  int seeds_per_anchor_ = 1;
  int refine_per_seed_ = 1;
};

/// CD-l1 supervision of anchors and dense prediction against the ground
/// truth (1:1 weights).
Tensor revnet_loss(const Tensor& anchor_positions, const Tensor& fine_points,
                   const Tensor& gt_points);

}  // namespace revnet
