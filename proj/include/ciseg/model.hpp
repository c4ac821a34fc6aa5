#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ciseg/graph.hpp"
#include "ciseg/nn.hpp"
#include "ciseg/query_queue.hpp"

namespace ciseg {

struct ModelConfig {
  int d_q = 64;
  int decoder_layers = 3;
  std::vector<int> backbone_channels = {16, 32, 64};
  int image_h = 64;
  int image_w = 64;
  int attention_heads = 4;
  int ffn_hidden = 0;  // 0 -> 2 * d_q

  int downsample_factor() const { return 1 << int(backbone_channels.size()); }

  void validate() const {
    if (d_q <= 0 || decoder_layers < 1 || attention_heads <= 0 || backbone_channels.empty())
      throw std::invalid_argument("ModelConfig: non-positive dimension");
    if (d_q % attention_heads != 0)
      throw std::invalid_argument("ModelConfig: d_q must be divisible by attention_heads");
    int f = downsample_factor();
    if (image_h % f != 0 || image_w % f != 0)
      throw std::invalid_argument("ModelConfig: image size must be divisible by " +
                                  std::to_string(f));
  }
};

// Everything a training iteration or an evaluation needs from one forward
// pass. Vars reference the Graph the forward ran on.
template <typename T>
struct PredictionSet {
  int total_queries = 0;
  int num_classes = 0;  // K: real classes, the no-object column is index K
  Var class_logits;                // [M, K+1]
  Var mask_logits;                 // [M, H, W] at full input resolution
  std::vector<Var> layer_states;   // L entries, each [M, d_q]
  std::vector<Var> pod_features;   // backbone stages then pixel-decoder map
  std::map<std::string, Var> param_leaves;   // model parameters bound this pass
  std::map<std::string, Var> query_leaves;   // queue embeddings bound this pass
};

// Miniature query-based mask classifier: strided conv backbone, top-down
// pixel decoder, transformer decoder over a growing query queue, a shared
// growing class head, and dot-product mask logits.
//
// Mask logits stay bilinear in (final query state, pixel embedding): the
// mask path is query_state . pixel_embedding with no nonlinearity between,
// and the factor-2 bilinear upsample to input resolution is linear.
template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.ffn_hidden == 0) cfg_.ffn_hidden = 2 * cfg_.d_q;
    SplitMix64 rng(seed);
    init_params(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  int num_classes() const { return num_classes_; }

  // Checkpoint restore: the head tensors were replaced wholesale, this just
  // records the class count they imply.
  void force_class_count(int k) {
    if (params_.get("head.class.weight").dim(0) != k + 1)
      throw std::invalid_argument("force_class_count: head shape disagrees with k");
    num_classes_ = k;
  }

  // Class-head output grows by n_new real classes; the no-object row stays
  // last and previously learned rows are bit-identical after the call.
  void grow_class_head(int n_new, uint64_t seed) {
    if (n_new <= 0) throw std::invalid_argument("grow_class_head: n_new must be positive");
    SplitMix64 rng(mix_seed(seed, 0xC1A55ull));
    const int d = cfg_.d_q;
    Tensor<T>& w = params_.get("head.class.weight");
    Tensor<T>& b = params_.get("head.class.bias");
    int old_rows = w.dim(0);  // K_old + 1
    Tensor<T> nw({old_rows + n_new, d});
    Tensor<T> nb({old_rows + n_new});
    // old real-class rows
    for (int r = 0; r < old_rows - 1; ++r)
      for (int c = 0; c < d; ++c) nw.at(r, c) = w.at(r, c);
    for (int r = 0; r < old_rows - 1; ++r) nb[r] = b[r];
    // fresh rows for the new classes
    Tensor<T> fresh = xavier_uniform<T>({n_new, d}, d, old_rows + n_new, rng);
    for (int r = 0; r < n_new; ++r)
      for (int c = 0; c < d; ++c) nw.at(old_rows - 1 + r, c) = fresh.at(r, c);
    for (int r = 0; r < n_new; ++r) nb[old_rows - 1 + r] = T(0);
    // no-object row moves to the end unchanged
    for (int c = 0; c < d; ++c) nw.at(old_rows - 1 + n_new, c) = w.at(old_rows - 1, c);
    nb[old_rows - 1 + n_new] = b[old_rows - 1];
    w = std::move(nw);
    b = std::move(nb);
    num_classes_ += n_new;
  }

  // train_queries gates whether any queue embedding requires grad;
  // respect_freeze=false additionally unfreezes old groups (ablation only).
  PredictionSet<T> forward(Graph<T>& g, const Tensor<T>& image, const QueryQueue<T>& queue,
                           bool train_queries = true, bool respect_freeze = true) const {
    if (queue.empty()) throw std::invalid_argument("forward: empty query queue");
    if (queue.d_q() != cfg_.d_q) throw std::invalid_argument("forward: queue d_q mismatch");
    if (image.ndim() != 3 || image.dim(0) != 3)
      throw std::invalid_argument("forward: image must be [3,H,W], got " + image.shape_str());
    if (image.dim(1) != cfg_.image_h)
      throw std::invalid_argument("forward: image height " + std::to_string(image.dim(1)) +
                                  " != configured " + std::to_string(cfg_.image_h));
    if (image.dim(2) != cfg_.image_w)
      throw std::invalid_argument("forward: image width " + std::to_string(image.dim(2)) +
                                  " != configured " + std::to_string(cfg_.image_w));

    PredictionSet<T> out;
    std::map<std::string, Var> L;  // bound parameter leaves
    bool rec = g.recording;
    for (const auto& name : params_.names()) L[name] = g.leaf(params_.get(name), rec);

    Var img = g.constant(image);

    // Backbone: stride-2 conv + relu per stage.
    std::vector<Var> stages;
    Var x = img;
    for (size_t s = 0; s < cfg_.backbone_channels.size(); ++s) {
      std::string p = "backbone.s" + std::to_string(s);
      x = g.relu(g.conv2d(x, L[p + ".weight"], L[p + ".bias"], 2, 1));
      stages.push_back(x);
    }

    // Pixel decoder: 1x1 laterals to d_q, top-down nearest upsampling.
    std::vector<Var> lat(stages.size());
    for (size_t s = 0; s < stages.size(); ++s) {
      std::string p = "pixdec.lat" + std::to_string(s);
      lat[s] = g.conv2d(stages[s], L[p + ".weight"], L[p + ".bias"], 1, 0);
    }
    // deepest level gets one 3x3 context conv
    Var top = g.relu(g.conv2d(lat.back(), L["pixdec.ctx.weight"], L["pixdec.ctx.bias"], 1, 1));
    std::vector<Var> pyramid(stages.size());
    pyramid[stages.size() - 1] = top;
    for (int s = int(stages.size()) - 2; s >= 0; --s) {
      Var up = g.upsample_nearest2x(pyramid[size_t(s) + 1]);
      Var fused = g.add(lat[size_t(s)], up);
      if (s > 0) {
        std::string p = "pixdec.fuse" + std::to_string(s);
        fused = g.relu(g.conv2d(fused, L[p + ".weight"], L[p + ".bias"], 1, 0));
      }
      pyramid[size_t(s)] = fused;
    }
    Var pixel_embed = pyramid[0];  // [d_q, H/2, W/2], the mask embedding map
    Var attn_feat = pyramid.back();  // coarsest level feeds cross-attention

    out.pod_features = stages;
    out.pod_features.push_back(pixel_embed);

    // Cross-attention memory: [N, d_q] + fixed sinusoidal positions.
    int fh = cfg_.image_h / cfg_.downsample_factor();
    int fw = cfg_.image_w / cfg_.downsample_factor();
    int n_keys = fh * fw;
    Var mem = g.transpose(g.reshape(attn_feat, {cfg_.d_q, n_keys}));  // [N, d_q]
    Var key_pos = g.constant(sinusoidal_positions(fh, fw));

    // Queue embeddings become leaves; frozen groups never require grad.
    std::vector<Var> contents, positions;
    for (size_t gi = 0; gi < queue.groups().size(); ++gi) {
      const auto& grp = queue.groups()[gi];
      bool rg = rec && train_queries && (!grp.frozen || !respect_freeze);
      Var c = g.leaf(grp.content, rg);
      Var p = g.leaf(grp.position, rg);
      std::string base = "queue.g" + std::to_string(gi);
      out.query_leaves[base + ".content"] = c;
      out.query_leaves[base + ".position"] = p;
      contents.push_back(c);
      positions.push_back(p);
    }
    Var q = concat_groups(g, contents);
    Var q_pos = concat_groups(g, positions);
    int m_total = queue.total_queries();

    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      std::string p = "decoder.l" + std::to_string(l);
      // cross-attention: queries attend to the full memory
      Var attn = attention(g, L, p + ".cross", g.add(q, q_pos), g.add(mem, key_pos), mem);
      q = g.layer_norm(g.add(q, attn), L[p + ".ln1.gamma"], L[p + ".ln1.beta"]);
      // self-attention among queries
      Var self_in = g.add(q, q_pos);
      Var sattn = attention(g, L, p + ".self", self_in, self_in, q);
      q = g.layer_norm(g.add(q, sattn), L[p + ".ln2.gamma"], L[p + ".ln2.beta"]);
      // feed-forward
      Var h = g.relu(g.linear(q, L[p + ".ffn.w1"], L[p + ".ffn.b1"]));
      Var ff = g.linear(h, L[p + ".ffn.w2"], L[p + ".ffn.b2"]);
      q = g.layer_norm(g.add(q, ff), L[p + ".ln3.gamma"], L[p + ".ln3.beta"]);
      out.layer_states.push_back(q);
    }

    out.class_logits = g.linear(q, L["head.class.weight"], L["head.class.bias"]);

    // masks: dot product against the pixel embedding map, then x2 bilinear
    int eh = cfg_.image_h / 2, ew = cfg_.image_w / 2;
    Var emb_flat = g.reshape(pixel_embed, {cfg_.d_q, eh * ew});
    Var mask_lo = g.reshape(g.matmul(q, emb_flat), {m_total, eh, ew});
    out.mask_logits = g.upsample_bilinear2x(mask_lo);

    out.total_queries = m_total;
    out.num_classes = num_classes_;
    out.param_leaves = std::move(L);
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  int num_classes_ = 0;

  static Var concat_groups(Graph<T>& g, const std::vector<Var>& parts) {
    if (parts.size() == 1) return parts[0];
    // groups are row blocks; concat via transpose-free row stacking
    std::vector<Var> cols;
    cols.reserve(parts.size());
    for (Var p : parts) cols.push_back(g.transpose(p));
    return g.transpose(g.concat_cols(cols));
  }

  Var attention(Graph<T>& g, std::map<std::string, Var>& L, const std::string& p, Var query_in,
                Var key_in, Var value_in) const {
    const int d = cfg_.d_q;
    const int nh = cfg_.attention_heads;
    const int dh = d / nh;
    Var qp = g.linear(query_in, L[p + ".wq"], L[p + ".bq"]);
    Var kp = g.linear(key_in, L[p + ".wk"], L[p + ".bk"]);
    Var vp = g.linear(value_in, L[p + ".wv"], L[p + ".bv"]);
    std::vector<Var> heads;
    heads.reserve(size_t(nh));
    T inv_sqrt = T(1.0 / std::sqrt(double(dh)));
    for (int h = 0; h < nh; ++h) {
      Var qh = g.slice_cols(qp, h * dh, (h + 1) * dh);
      Var kh = g.slice_cols(kp, h * dh, (h + 1) * dh);
      Var vh = g.slice_cols(vp, h * dh, (h + 1) * dh);
      Var scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt);
      Var attn = g.softmax_rows(scores);
      heads.push_back(g.matmul(attn, vh));
    }
    Var cat = nh == 1 ? heads[0] : g.concat_cols(heads);
    return g.linear(cat, L[p + ".wo"], L[p + ".bo"]);
  }

  Tensor<T> sinusoidal_positions(int h, int w) const {
    const int d = cfg_.d_q;
    const int half = d / 2;
    Tensor<T> pe({h * w, d});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int row = y * w + x;
        for (int i = 0; i < half; ++i) {
          double omega = std::pow(10000.0, -2.0 * double(i / 2) / double(half));
          double vy = double(y) * omega;
          double vx = double(x) * omega;
          pe.at(row, i) = T(i % 2 == 0 ? std::sin(vy) : std::cos(vy));
          pe.at(row, half + i) = T(i % 2 == 0 ? std::sin(vx) : std::cos(vx));
        }
      }
    return pe;
  }

  void init_params(SplitMix64& rng) {
    const int d = cfg_.d_q;
    int prev = 3;
    for (size_t s = 0; s < cfg_.backbone_channels.size(); ++s) {
      int ch = cfg_.backbone_channels[s];
      std::string p = "backbone.s" + std::to_string(s);
      params_.add(p + ".weight", kaiming_uniform<T>({ch, prev, 3, 3}, prev * 9, rng));
      params_.add(p + ".bias", Tensor<T>({ch}));
      prev = ch;
    }
    for (size_t s = 0; s < cfg_.backbone_channels.size(); ++s) {
      int ch = cfg_.backbone_channels[s];
      std::string p = "pixdec.lat" + std::to_string(s);
      params_.add(p + ".weight", kaiming_uniform<T>({d, ch, 1, 1}, ch, rng));
      params_.add(p + ".bias", Tensor<T>({d}));
    }
    params_.add("pixdec.ctx.weight", kaiming_uniform<T>({d, d, 3, 3}, d * 9, rng));
    params_.add("pixdec.ctx.bias", Tensor<T>({d}));
    for (size_t s = 1; s + 1 < cfg_.backbone_channels.size(); ++s) {
      std::string p = "pixdec.fuse" + std::to_string(s);
      params_.add(p + ".weight", kaiming_uniform<T>({d, d, 1, 1}, d, rng));
      params_.add(p + ".bias", Tensor<T>({d}));
    }
    int hidden = cfg_.ffn_hidden;
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      std::string p = "decoder.l" + std::to_string(l);
      for (const char* blk : {".cross", ".self"}) {
        for (const char* mat : {".wq", ".wk", ".wv", ".wo"}) {
          params_.add(p + blk + mat, xavier_uniform<T>({d, d}, d, d, rng));
          params_.add(p + blk + (std::string(mat).replace(1, 1, "b")), Tensor<T>({d}));
        }
      }
      params_.add(p + ".ffn.w1", xavier_uniform<T>({hidden, d}, d, hidden, rng));
      params_.add(p + ".ffn.b1", Tensor<T>({hidden}));
      params_.add(p + ".ffn.w2", xavier_uniform<T>({d, hidden}, hidden, d, rng));
      params_.add(p + ".ffn.b2", Tensor<T>({d}));
      for (const char* ln : {".ln1", ".ln2", ".ln3"}) {
        params_.add(p + ln + ".gamma", Tensor<T>::full({d}, T(1)));
        params_.add(p + ln + ".beta", Tensor<T>({d}));
      }
    }
    // class head starts with just the no-object row; grow_class_head adds
    // real classes as the queue extends
    params_.add("head.class.weight", xavier_uniform<T>({1, d}, d, 1, rng));
    params_.add("head.class.bias", Tensor<T>({1}));
  }
};

}  // namespace ciseg
