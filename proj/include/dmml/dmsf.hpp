#pragma once

// Disentangled multi-modal selective fusion.
//
// Per subspace and magnification: gene tokens generate sampling offsets,
// slide features are bilinearly resampled at the deformed reference points and
// attended to by the gene queries; a selection layer then attends from the
// fused tokens back onto the gene tokens.

#include <string>
#include <vector>

#include "dmml/error.hpp"
#include "dmml/nn.hpp"
#include "dmml/tensor.hpp"

namespace dmml {

struct DmsfConfig {
  std::size_t query_h = 4;
  std::size_t query_w = 4;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t offset_hidden = 8;
  std::size_t rep_dim = 128;
  double offset_scale = 0.5;

  std::size_t queries() const { return query_h * query_w; }
};

// Two 3x3 convolutions and a bounded scale: scale * tanh(conv2(tanh(conv1(x)))).
struct OffsetNetwork {
  Tensor w1, b1, w2, b2;
  double scale = 0.5;

  static OffsetNetwork create(ParamStore& store, const std::string& name, std::size_t in_ch, std::size_t hidden,
                              double scale, ParamGroup group, Rng& rng) {
    OffsetNetwork n;
    n.w1 = store.add(name + ".conv1.weight", 9 * in_ch, hidden, group, glorot(rng, 9 * in_ch, hidden, 9 * in_ch * hidden));
    n.b1 = store.add(name + ".conv1.bias", 1, hidden, group, std::vector<double>(hidden, 0.0));
    auto w2 = glorot(rng, 9 * hidden, 2, 9 * hidden * 2);
    for (auto& x : w2) x *= 0.1;
    n.w2 = store.add(name + ".conv2.weight", 9 * hidden, 2, group, std::move(w2));
    n.b2 = store.add(name + ".conv2.bias", 1, 2, group, std::vector<double>(2, 0.0));
    n.scale = scale;
    return n;
  }
};

// grid [h*w, c] -> offsets [h*w, 2], each bounded by `scale`.
inline Tensor offset_network(const Tensor& grid, std::size_t h, std::size_t w, const OffsetNetwork& p) {
  require(grid.rows() == h * w, "shape_mismatch", "offset_network: grid is not h x w");
  require(p.w1.rows() == 9 * grid.cols(), "shape_mismatch",
          "offset_network: expects " + std::to_string(p.w1.rows() / 9) + " channels, got " + std::to_string(grid.cols()));
  Tensor hidden = tanh(conv3x3(grid, p.w1, p.b1, h, w));
  return scale(tanh(conv3x3(hidden, p.w2, p.b2, h, w)), p.scale);
}

// Uniform h x w grid of (x, y) points spanning [-1,1]^2 corner to corner.
inline Tensor reference_points(std::size_t h, std::size_t w) {
  std::vector<double> v(h * w * 2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      v[(y * w + x) * 2] = w == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(x) / static_cast<double>(w - 1);
      v[(y * w + x) * 2 + 1] = h == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(y) / static_cast<double>(h - 1);
    }
  return Tensor::from(h * w, 2, std::move(v));
}

// norm(p + dp): reference plus offsets, clamped to the field.
inline Tensor deformed_points(const Tensor& offsets, std::size_t h, std::size_t w) {
  return clamp(add(reference_points(h, w), offsets), -1.0, 1.0);
}

struct ProjectionSet {
  Linear q, k, v, out;
  std::size_t heads = 1;

  static ProjectionSet create(ParamStore& store, const std::string& name, std::size_t q_in, std::size_t kv_in,
                              std::size_t width, std::size_t out_dim, std::size_t heads, ParamGroup group, Rng& rng) {
    require(heads >= 1 && width % heads == 0, "head_mismatch", "head count must divide the model width");
    return {Linear::create(store, name + ".q", q_in, width, group, rng),
            Linear::create(store, name + ".k", kv_in, width, group, rng),
            Linear::create(store, name + ".v", kv_in, width, group, rng),
            Linear::create(store, name + ".out", width, out_dim, group, rng), heads};
  }
};

struct CrossAttentionOutput {
  Tensor z_m;   // [nq, width]
  Tensor attn;  // [nq, nq] head-averaged gene -> resampled-slide weights
};

// Gene queries attend to slide features resampled at the deformed reference
// grid (one key per query-grid point).
inline CrossAttentionOutput deformable_cross_attention(const Tensor& gene_tokens, std::size_t gh, std::size_t gw,
                                                       const Tensor& slide, std::size_t sh, std::size_t sw,
                                                       const OffsetNetwork& offsets, const ProjectionSet& p) {
  require(gene_tokens.rows() == gh * gw, "shape_mismatch", "deformable_cross_attention: gene grid is not gh x gw");
  require(gene_tokens.cols() == p.q.in(), "width_mismatch", "deformable_cross_attention: gene token width mismatch");
  require(slide.cols() == p.k.in(), "width_mismatch", "deformable_cross_attention: slide embedding width mismatch");
  Tensor pts = deformed_points(offset_network(gene_tokens, gh, gw, offsets), gh, gw);
  Tensor sampled = bilinear_sample(slide, pts, sh, sw);
  auto att = multi_head_attention(p.q(gene_tokens), p.k(sampled), p.v(sampled), p.heads);
  return {p.out(att.heads_concat), att.attn_mean};
}

// Fused tokens query the gene tokens; output projected to the representation width.
inline Tensor selection_attention(const Tensor& z_m, const Tensor& gene_tokens, const ProjectionSet& p) {
  require(z_m.cols() == p.q.in() && gene_tokens.cols() == p.k.in(), "width_mismatch",
          "selection_attention: width mismatch");
  auto att = multi_head_attention(p.q(z_m), p.k(gene_tokens), p.v(gene_tokens), p.heads);
  return p.out(att.heads_concat);
}

// One subspace branch; shared by both magnifications.
struct DmsfBranch {
  Linear tokenizer;  // gene subvector -> queries * width
  OffsetNetwork offsets;
  ProjectionSet cross;
  ProjectionSet select;

  static DmsfBranch create(ParamStore& store, const std::string& name, std::size_t gene_in, std::size_t slide_c,
                           const DmsfConfig& cfg, ParamGroup group, Rng& rng) {
    DmsfBranch b;
    b.tokenizer = Linear::create(store, name + ".tokenizer", gene_in, cfg.queries() * cfg.width, group, rng);
    b.offsets = OffsetNetwork::create(store, name + ".offsets", cfg.width, cfg.offset_hidden, cfg.offset_scale, group, rng);
    b.cross = ProjectionSet::create(store, name + ".cross", cfg.width, slide_c, cfg.width, cfg.width, cfg.heads, group, rng);
    b.select = ProjectionSet::create(store, name + ".select", cfg.width, cfg.width, cfg.width, cfg.rep_dim, cfg.heads,
                                     group, rng);
    return b;
  }
};

// [1, n_genes] -> [queries, width]
inline Tensor tokenize_genes(const Tensor& genes, const DmsfBranch& b, const DmsfConfig& cfg) {
  require(genes.rows() == 1 && genes.cols() == b.tokenizer.in(), "width_mismatch",
          "tokenize_genes: expected " + std::to_string(b.tokenizer.in()) + " genes, got " + std::to_string(genes.cols()));
  return reshape(b.tokenizer(genes), cfg.queries(), cfg.width);
}

struct BranchOutput {
  Tensor rep;   // [1, rep_dim], mean-pooled selected tokens
  Tensor attn;  // [1, queries^2], flattened head-averaged attention
  Tensor z_o;   // [queries, rep_dim]
};

inline BranchOutput dmsf_branch(const Tensor& gene_tokens, const Tensor& slide, std::size_t sh, std::size_t sw,
                                const DmsfBranch& b, const DmsfConfig& cfg) {
  auto cross = deformable_cross_attention(gene_tokens, cfg.query_h, cfg.query_w, slide, sh, sw, b.offsets, b.cross);
  Tensor z_o = selection_attention(cross.z_m, gene_tokens, b.select);
  return {mean_rows(z_o), reshape(cross.attn, 1, cross.attn.size()), z_o};
}

struct SlideInput {
  Tensor grid;  // [h*w, c]
  std::size_t h = 0;
  std::size_t w = 0;
};

struct DmsfOutput {
  Tensor rep_t10, rep_t20, rep_e10, rep_e20;  // [1, rep_dim] each
  Tensor x_r_t, x_r_e;                        // magnification means
  Tensor attn_t10, attn_t20, attn_e10, attn_e20;
};

// Runs both subspace branches at both magnifications for one case.
inline DmsfOutput dmsf_forward(const Tensor& genes_t, const Tensor& genes_e, const SlideInput& s10,
                               const SlideInput& s20, const DmsfBranch& tumor, const DmsfBranch& tme,
                               const DmsfConfig& cfg) {
  Tensor tok_t = tokenize_genes(genes_t, tumor, cfg);
  Tensor tok_e = tokenize_genes(genes_e, tme, cfg);
  auto t10 = dmsf_branch(tok_t, s10.grid, s10.h, s10.w, tumor, cfg);
  auto t20 = dmsf_branch(tok_t, s20.grid, s20.h, s20.w, tumor, cfg);
  auto e10 = dmsf_branch(tok_e, s10.grid, s10.h, s10.w, tme, cfg);
  auto e20 = dmsf_branch(tok_e, s20.grid, s20.h, s20.w, tme, cfg);
  DmsfOutput out;
  out.rep_t10 = t10.rep;
  out.rep_t20 = t20.rep;
  out.rep_e10 = e10.rep;
  out.rep_e20 = e20.rep;
  out.x_r_t = scale(add(t10.rep, t20.rep), 0.5);
  out.x_r_e = scale(add(e10.rep, e20.rep), 0.5);
  out.attn_t10 = t10.attn;
  out.attn_t20 = t20.attn;
  out.attn_e10 = e10.attn;
  out.attn_e20 = e20.attn;
  return out;
}

}  // namespace dmml
