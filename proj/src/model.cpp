#include "revnet/model.hpp"

#include <cmath>
#include <numeric>
#include <unordered_map>

namespace revnet {

namespace ro = revnet::ops;

// ---- ModelConfig -------------------------------------------------------------

ModelConfig ModelConfig::paper_scale() {
  ModelConfig c;
  c.k0 = 16;
  c.c0 = 32;
  c.stages = {{512, 32, 1}, {256, 64, 1}, {128, 64, 1}};
  c.k_group = 16;
  c.n_observed = 128;
  c.m_missing = 128;
  c.anchor_channels = 64;
  c.global_channels = 128;
  c.n_enc = 4;
  c.n_dec = 6;
  c.heads = 4;
  c.k_attn = 8;
  c.points_per_anchor = 32;
  c.predictor_hidden = 256;
  c.fine_hidden = 256;
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.k0 = 16;
  c.c0 = 16;
  c.stages = {{128, 16, 1}, {64, 32, 1}, {32, 32, 1}};
  c.k_group = 16;
  c.n_observed = 32;
  c.m_missing = 32;
  c.anchor_channels = 32;
  c.global_channels = 64;
  c.n_enc = 2;
  c.n_dec = 2;
  c.heads = 4;
  c.k_attn = 8;
  c.points_per_anchor = 32;
  c.predictor_hidden = 64;
  c.fine_hidden = 64;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.k0 = 4;
  c.c0 = 8;
  c.stages = {{24, 8, 1}, {16, 8, 1}, {8, 8, 1}};
  c.k_group = 4;
  c.n_observed = 8;
  c.m_missing = 8;
  c.anchor_channels = 8;
  c.global_channels = 16;
  c.n_enc = 1;
  c.n_dec = 1;
  c.heads = 2;
  c.k_attn = 4;
  c.points_per_anchor = 4;
  c.predictor_hidden = 16;
  c.fine_hidden = 16;
  return c;
}

void ModelConfig::validate() const {
  REVNET_CHECK(!stages.empty(), "config: at least one backbone stage required");
  for (const Stage& s : stages)
    REVNET_CHECK(s.size >= 1 && s.channels >= 1 && s.resmlps >= 0,
                 "config: invalid stage");
  REVNET_CHECK(stages.back().size == n_observed,
               "config: final stage size must equal n_observed");
  REVNET_CHECK(n_observed >= 1 && m_missing >= 1,
               "config: anchor counts must be positive");
  REVNET_CHECK(n_enc >= 0 && n_dec >= 1, "config: need n_enc >= 0, n_dec >= 1");
  REVNET_CHECK(heads >= 1 && anchor_channels % heads == 0,
               "config: heads must divide anchor_channels");
  REVNET_CHECK(k0 >= 1 && k_group >= 1 && k_attn >= 1,
               "config: neighbor counts must be positive");
  REVNET_CHECK(c0 >= 1 && anchor_channels >= 1 && global_channels >= 1,
               "config: channel widths must be positive");
  REVNET_CHECK(points_per_anchor >= 1,
               "config: points_per_anchor must be positive");
}

int ModelConfig::output_size() const {
  return (n_observed + m_missing) * points_per_anchor;
}

// ---- scalar layers -------------------------------------------------------------

DenseLayer::DenseLayer(int in, int out, Rng& rng) {
  weight = Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)),
                         true);
  bias = Tensor::zeros({out}, true);
}

Tensor DenseLayer::forward(const Tensor& x) const {
  return ro::add_rowvec(ro::matmul(x, weight), bias);
}

void DenseLayer::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".W", weight);
  out.emplace_back(prefix + ".b", bias);
}

ScalarMLP::ScalarMLP(int in, const std::vector<int>& widths, Rng& rng) {
  int c = in;
  for (int w : widths) {
    layers.emplace_back(c, w, rng);
    c = w;
  }
}

Tensor ScalarMLP::forward(const Tensor& x) const {
  Tensor h = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h);
    if (i + 1 < layers.size()) h = ro::relu(h);
  }
  return h;
}

void ScalarMLP::collect(ParamList& out, const std::string& prefix) const {
  for (size_t i = 0; i < layers.size(); ++i)
    layers[i].collect(out, prefix + ".l" + std::to_string(i));
}

// ---- channel-wise subtraction attention ----------------------------------------

CWSAHead::CWSAHead(int channels, Rng& rng)
    : inv(channels, 0, /*orthonormalize=*/false, rng),
      score(3 * channels, {3 * channels, channels}, rng) {}

Tensor CWSAHead::raw_scores(const Tensor& q, const Tensor& k) const {
  const int m = q.dim(0), n = k.dim(0), ch = q.dim(1);
  Tensor d = ro::pairwise_sub(q, k);  // {m*n, ch, 3}
  auto [dinv, t] = inv.forward_set(d);
  Tensor s = score.forward(ro::reshape(dinv, {m * n, 3 * ch}));
  return ro::reshape(s, {m, n, ch});
}

void CWSAHead::collect(ParamList& out, const std::string& prefix) const {
  inv.collect(out, prefix + ".inv");
  score.collect(out, prefix + ".score");
}

MultiHeadCWSA::MultiHeadCWSA(int channels, int heads_, Rng& rng)
    : heads(heads_) {
  REVNET_CHECK(heads >= 1 && channels % heads == 0,
               "cwsa: heads must divide channels");
  for (int h = 0; h < heads; ++h) head.emplace_back(channels / heads, rng);
}

Tensor MultiHeadCWSA::scores(const Tensor& q_single, const Tensor& k) const {
  REVNET_CHECK(q_single.ndim() == 2, "cwsa_scores: single query {C,3} expected");
  const int c = q_single.dim(0);
  const int n = k.dim(0);
  const int ch = c / heads;
  Tensor q = ro::reshape(q_single, {1, c, 3});
  Tensor out;
  for (int h = 0; h < heads; ++h) {
    Tensor raw = head[h].raw_scores(ro::slice_dim1(q, h * ch, ch),
                                    ro::slice_dim1(k, h * ch, ch));
    Tensor s = ro::reshape(ro::softmax_dim1(raw), {n, ch, 1});
    out = out.defined() ? ro::concat_dim1(out, s) : s;
  }
  return ro::reshape(out, {n, c});
}

Tensor MultiHeadCWSA::attend(const Tensor& q, const Tensor& k,
                             const Tensor& v) const {
  REVNET_CHECK(k.dim(0) == v.dim(0), "cwsa_attend: |K| must equal |V|");
  const int c = q.dim(1);
  const int ch = c / heads;
  Tensor out;
  for (int h = 0; h < heads; ++h) {
    Tensor raw = head[h].raw_scores(ro::slice_dim1(q, h * ch, ch),
                                    ro::slice_dim1(k, h * ch, ch));
    Tensor s = ro::softmax_dim1(raw);
    Tensor oh = ro::cwsa_aggregate(s, ro::slice_dim1(v, h * ch, ch));
    out = out.defined() ? ro::concat_dim1(out, oh) : oh;
  }
  return out;
}

void MultiHeadCWSA::collect(ParamList& out, const std::string& prefix) const {
  for (int h = 0; h < heads; ++h)
    head[h].collect(out, prefix + ".h" + std::to_string(h));
}

AttentionBlock::AttentionBlock(int channels, int heads, int ff, Rng& rng)
    : attn(channels, heads, rng),
      out_proj(channels, channels, true, rng),
      mlp(channels,
          {{ff, true, true, true}, {channels, false, false, false}}, rng) {}

Tensor AttentionBlock::forward_self(const Tensor& x) const {
  Tensor h = ro::add(x, out_proj.forward(attn.attend(x, x, x)));
  return ro::add(h, mlp.forward(h));
}

Tensor AttentionBlock::forward_cross(const Tensor& q, const Tensor& kv) const {
  Tensor h = ro::add(q, out_proj.forward(attn.attend(q, kv, kv)));
  return ro::add(h, mlp.forward(h));
}

void AttentionBlock::set_whitening_mode(WhiteningMode m) const {
  mlp.set_whitening_mode(m);
}

void AttentionBlock::collect(ParamList& out, const std::string& prefix) const {
  attn.collect(out, prefix + ".attn");
  out_proj.collect(out, prefix + ".proj");
  mlp.collect(out, prefix + ".mlp");
}

// ---- REVNet ----------------------------------------------------------------------

namespace {

std::vector<int> repeat_each(int n, int k) {
  std::vector<int> idx(static_cast<size_t>(n) * k);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) idx[static_cast<size_t>(i) * k + j] = i;
  return idx;
}

// Grouping with relative position encoding and mean pooling: for each query,
// gather k nearest source features, add RPE(center - neighbor), pool.
Tensor group_rpe_pool(const VNMLP& rpe, const Tensor& feats,
                      const Tensor& src_pts, const Tensor& query_pts, int k) {
  PointCloud qc = PointCloud::from_tensor(query_pts);
  PointCloud sc = PointCloud::from_tensor(src_pts);
  const int k_eff = std::min(k, sc.valid_count);
  const std::vector<int> nbr = knn(qc, sc, k_eff).indices;
  const int m = query_pts.dim(0);
  Tensor grouped = ro::gather_dim0(feats, nbr);
  Tensor centers = ro::gather_dim0(ro::reshape(query_pts, {m, 1, 3}),
                                   repeat_each(m, k_eff));
  Tensor nbr_pts =
      ro::gather_dim0(ro::reshape(src_pts, {src_pts.dim(0), 1, 3}), nbr);
  Tensor rels = ro::sub(centers, nbr_pts);
  return ro::group_mean(ro::add(grouped, rpe.forward(rels)), k_eff);
}

int refine_split(int ppa) {
  for (int d = std::min(4, ppa); d >= 1; --d)
    if (ppa % d == 0) return d;
  return 1;
}

}  // namespace

REVNet::REVNet(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int ca = cfg_.anchor_channels;
  const int cg = cfg_.global_channels;
  const int ff = cfg_.ff_channels > 0 ? cfg_.ff_channels : ca;

  input_embed_ = VNEdgeConv(0, cfg_.c0, cfg_.k0, rng);
  int cprev = cfg_.c0;
  int csum = 0;
  for (const ModelConfig::Stage& s : cfg_.stages) {
    SAStage st;
    st.pre = VNMLP(cprev, {{s.channels, true, true, true}}, rng);
    st.rpe = VNMLP(1, {{s.channels, true, false, false}}, rng);
    for (int r = 0; r < s.resmlps; ++r) {
      SAStage::ResMLP res;
      res.mlp1 = VNMLP(s.channels, {{s.channels, true, true, true}}, rng);
      res.rpe = VNMLP(1, {{s.channels, true, false, false}}, rng);
      res.mlp2 = VNMLP(s.channels, {{s.channels, true, true, true}}, rng);
      st.res.push_back(std::move(res));
    }
    stages_.push_back(std::move(st));
    cprev = s.channels;
    csum += s.channels;
  }
  fuse_ = VNMLP(csum, {{ca, true, true, true}, {ca, false, false, false}}, rng);

  lift_ = VNMLP(ca, {{cg, true, true, true}}, rng);
  const int inv_h_g = cfg_.inv_hidden > 0 ? cfg_.inv_hidden : cg;
  global_inv_ = VNInv(cg, inv_h_g, /*orthonormalize=*/true, rng);
  coord_mlp_ = ScalarMLP(
      3 * cg, {cfg_.predictor_hidden, cfg_.predictor_hidden, 3 * cfg_.m_missing},
      rng);

  query_embed_ = VNEdgeConv(0, ca, cfg_.k_attn, rng);
  query_mlp_ = VNMLP(cg + ca,
                     {{ca, true, true, true}, {ca, false, false, false}}, rng);
  for (int i = 0; i < cfg_.n_enc; ++i)
    encoder_.emplace_back(ca, cfg_.heads, ff, rng);
  for (int i = 0; i < cfg_.n_dec; ++i)
    decoder_.emplace_back(ca, cfg_.heads, ff, rng);

  const int inv_h_f = cfg_.inv_hidden > 0 ? cfg_.inv_hidden : ca;
  fine_inv_ = VNInv(ca, inv_h_f, /*orthonormalize=*/true, rng);
  refine_per_seed_ = refine_split(cfg_.points_per_anchor);
  seeds_per_anchor_ = cfg_.points_per_anchor / refine_per_seed_;
  coarse_mlp_ =
      ScalarMLP(3 * ca, {cfg_.fine_hidden, 3 * seeds_per_anchor_}, rng);
  refine_mlp_ = ScalarMLP(3 * ca + 3,
                          {cfg_.fine_hidden, 3 * refine_per_seed_}, rng);
}

REVNet::REVNet(const ModelConfig& cfg, std::uint64_t seed)
    : REVNet(cfg, *std::make_unique<Rng>(seed)) {}

AnchorSet REVNet::backbone(const PointCloud& cloud) const {
  REVNET_CHECK(cloud.valid_count >= cfg_.n_observed,
               "backbone: cloud has fewer valid points than anchors");
  Tensor cur_pts = cloud.valid_points();
  Tensor cur_feats = input_embed_.forward_points(cur_pts, cur_pts);

  std::vector<Tensor> stage_feats;
  std::vector<Tensor> stage_pts;
  std::vector<std::vector<int>> sel;
  for (const SAStage& st : stages_) {
    const size_t s = stage_feats.size();
    const int target = std::min(cfg_.stages[s].size, cur_pts.dim(0));
    Tensor h = st.pre.forward(cur_feats);
    const std::vector<int> fps_idx =
        farthest_point_sample(PointCloud::from_tensor(cur_pts), target);
    Tensor down_pts = ro::gather_dim0(cur_pts, fps_idx);
    Tensor x = group_rpe_pool(st.rpe, h, cur_pts, down_pts, cfg_.k_group);
    for (const SAStage::ResMLP& res : st.res) {
      Tensor h1 = res.mlp1.forward(x);
      Tensor pooled =
          group_rpe_pool(res.rpe, h1, down_pts, down_pts, cfg_.k_group);
      x = ro::add(res.mlp2.forward(pooled), x);
    }
    sel.push_back(fps_idx);
    stage_feats.push_back(x);
    stage_pts.push_back(down_pts);
    cur_pts = down_pts;
    cur_feats = x;
  }
  REVNET_CHECK(cur_pts.dim(0) == cfg_.n_observed,
               "backbone: downsampling did not reach n_observed anchors");

  // Every anchor exists in all stage lists (FPS nesting); gather its feature
  // from each stage and fuse.
  const int n_anchor = cfg_.n_observed;
  const int n_stage = static_cast<int>(stages_.size());
  std::vector<int> idx(static_cast<size_t>(n_anchor));
  std::iota(idx.begin(), idx.end(), 0);
  Tensor fused_in = stage_feats[static_cast<size_t>(n_stage - 1)];
  for (int s = n_stage - 2; s >= 0; --s) {
    for (int j = 0; j < n_anchor; ++j)
      idx[static_cast<size_t>(j)] =
          sel[static_cast<size_t>(s + 1)][static_cast<size_t>(idx[j])];
    fused_in = ro::concat_dim1(
        ro::gather_dim0(stage_feats[static_cast<size_t>(s)], idx), fused_in);
  }
  AnchorSet out;
  out.positions = cur_pts;
  out.features = fuse_.forward(fused_in);
  return out;
}

std::tuple<Tensor, Tensor, Tensor> REVNet::predict_missing_positions(
    const AnchorSet& observed) const {
  REVNET_CHECK(observed.count() >= 1,
               "predict_missing_positions: empty anchor set");
  Tensor lifted = lift_.forward(observed.features);
  Tensor xg = vn_mean_pool(lifted);
  auto [xg_inv, frame] = global_inv_.forward(xg);
  Tensor flat = ro::reshape(xg_inv, {1, 3 * cfg_.global_channels});
  Tensor canonical =
      ro::reshape(coord_mlp_.forward(flat), {cfg_.m_missing, 3});
  Tensor positions = ro::matmul(canonical, frame);
  return {positions, xg, frame};
}

Tensor REVNet::matr(const AnchorSet& observed, const Tensor& predicted_positions,
                    const Tensor& global_feature) const {
  const int m = predicted_positions.dim(0);
  Tensor union_pos =
      ro::concat_dim0({observed.positions, predicted_positions});
  Tensor emb = query_embed_.forward_points(predicted_positions, union_pos);
  Tensor xg_rep =
      ro::gather_dim0(ro::reshape(global_feature, {1, cfg_.global_channels, 3}),
                      std::vector<int>(static_cast<size_t>(m), 0));
  Tensor q = query_mlp_.forward(ro::concat_dim1(xg_rep, emb));
  Tensor kv = observed.features;
  for (const AttentionBlock& blk : encoder_) kv = blk.forward_self(kv);
  Tensor h = q;
  for (const AttentionBlock& blk : decoder_) h = blk.forward_cross(h, kv);
  return h;
}

Tensor REVNet::fine_decode(const AnchorSet& all_anchors) const {
  const int k_anchor = all_anchors.count();
  const int ca = all_anchors.channels();
  const int ppa = cfg_.points_per_anchor;
  auto [xinv, frames] = fine_inv_.forward_set(all_anchors.features);
  Tensor flat = ro::reshape(xinv, {k_anchor, 3 * ca});
  Tensor seeds = coarse_mlp_.forward(flat);  // {K, seeds*3}
  const int ns = k_anchor * seeds_per_anchor_;
  Tensor seed_rows = ro::reshape(seeds, {ns, 3});
  Tensor flat_rep = ro::gather_dim0(flat, repeat_each(k_anchor, seeds_per_anchor_));
  Tensor rin = ro::reshape(
      ro::concat_dim1(ro::reshape(flat_rep, {ns, 3 * ca, 1}),
                      ro::reshape(seed_rows, {ns, 3, 1})),
      {ns, 3 * ca + 3});
  Tensor delta = ro::reshape(refine_mlp_.forward(rin),
                             {ns * refine_per_seed_, 3});
  Tensor seed_rep = ro::gather_dim0(seed_rows, repeat_each(ns, refine_per_seed_));
  Tensor offsets = ro::reshape(ro::add(seed_rep, delta), {k_anchor, ppa, 3});
  Tensor world = ro::point_right_matmul(offsets, frames, /*transpose_t=*/false);
  Tensor pos_rep =
      ro::gather_dim0(all_anchors.positions, repeat_each(k_anchor, ppa));
  return ro::add(ro::reshape(world, {k_anchor * ppa, 3}), pos_rep);
}

std::pair<AnchorSet, PointCloud> REVNet::forward(const PointCloud& cloud) const {
  AnchorSet observed = backbone(cloud);
  auto [pred_pos, xg, frame] = predict_missing_positions(observed);
  Tensor pred_feats = matr(observed, pred_pos, xg);
  AnchorSet all;
  all.positions = ro::concat_dim0({observed.positions, pred_pos});
  all.features = ro::concat_dim0({observed.features, pred_feats});
  PointCloud fine = PointCloud::from_tensor(fine_decode(all));
  return {all, fine};
}

Tensor REVNet::rpe_single(int stage, const Tensor& pi, const Tensor& pj) const {
  REVNET_CHECK(stage >= 0 && stage < static_cast<int>(stages_.size()),
               "rpe_single: stage out of range");
  Tensor rel = ro::reshape(ro::sub(pi, pj), {1, 1, 3});
  Tensor out = stages_[static_cast<size_t>(stage)].rpe.forward(rel);
  return ro::reshape(out, {out.dim(1), 3});
}

ParamList REVNet::parameters() const {
  ParamList out;
  input_embed_.collect(out, "embed");
  for (size_t s = 0; s < stages_.size(); ++s) {
    const std::string p = "stage" + std::to_string(s);
    stages_[s].pre.collect(out, p + ".pre");
    stages_[s].rpe.collect(out, p + ".rpe");
    for (size_t r = 0; r < stages_[s].res.size(); ++r) {
      const std::string q = p + ".res" + std::to_string(r);
      stages_[s].res[r].mlp1.collect(out, q + ".mlp1");
      stages_[s].res[r].rpe.collect(out, q + ".rpe");
      stages_[s].res[r].mlp2.collect(out, q + ".mlp2");
    }
  }
  fuse_.collect(out, "fuse");
  lift_.collect(out, "lift");
  global_inv_.collect(out, "global_inv");
  coord_mlp_.collect(out, "coord");
  query_embed_.collect(out, "query_embed");
  query_mlp_.collect(out, "query_mlp");
  for (size_t i = 0; i < encoder_.size(); ++i)
    encoder_[i].collect(out, "enc" + std::to_string(i));
  for (size_t i = 0; i < decoder_.size(); ++i)
    decoder_[i].collect(out, "dec" + std::to_string(i));
  fine_inv_.collect(out, "fine_inv");
  coarse_mlp_.collect(out, "coarse");
  refine_mlp_.collect(out, "refine");
  return out;
}

void REVNet::set_whitening_mode(WhiteningMode m) const {
  input_embed_.mlp.set_whitening_mode(m);
  for (const SAStage& st : stages_) {
    st.pre.set_whitening_mode(m);
    st.rpe.set_whitening_mode(m);
    for (const SAStage::ResMLP& res : st.res) {
      res.mlp1.set_whitening_mode(m);
      res.rpe.set_whitening_mode(m);
      res.mlp2.set_whitening_mode(m);
    }
  }
  fuse_.set_whitening_mode(m);
  lift_.set_whitening_mode(m);
  global_inv_.mlp.set_whitening_mode(m);
  query_embed_.mlp.set_whitening_mode(m);
  query_mlp_.set_whitening_mode(m);
  for (const AttentionBlock& blk : encoder_) blk.set_whitening_mode(m);
  for (const AttentionBlock& blk : decoder_) blk.set_whitening_mode(m);
  fine_inv_.mlp.set_whitening_mode(m);
}

void REVNet::load_parameters(const ParamList& named) {
  ParamList mine = parameters();
  std::unordered_map<std::string, Tensor*> by_name;
  for (auto& [name, tensor] : mine) by_name[name] = &tensor;
  for (const auto& [name, tensor] : named) {
    auto it = by_name.find(name);
    REVNET_CHECK(it != by_name.end(), "load_parameters: unknown name " + name);
    REVNET_CHECK(it->second->shape() == tensor.shape(),
                 "load_parameters: shape mismatch for " + name);
    it->second->leaf_values() = tensor.values();
  }
}

Tensor revnet_loss(const Tensor& anchor_positions, const Tensor& fine_points,
                   const Tensor& gt_points) {
  return ro::add(ro::chamfer_l1_op(anchor_positions, gt_points),
                 ro::chamfer_l1_op(fine_points, gt_points));
}

}  // namespace revnet
