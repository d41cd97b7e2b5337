#pragma once

// Parameter registry, layer building blocks and the AdamW optimizer shared by
// the teacher and student models.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dmml/error.hpp"
#include "dmml/rng.hpp"
#include "dmml/tensor.hpp"

namespace dmml {

// Which gradient-coordination subspace a parameter belongs to.
enum class ParamGroup { kTumor, kTme, kShared };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kTumor: return "T";
    case ParamGroup::kTme: return "E";
    case ParamGroup::kShared: return "shared";
  }
  return "?";
}

struct ParamEntry {
  std::string name;
  ParamGroup group;
  Tensor tensor;
};

// Ordered registry of trainable tensors. Registration order is the canonical
// flattening order used by checkpoints and gradient bundles.
class ParamStore {
 public:
  Tensor add(const std::string& name, std::size_t rows, std::size_t cols, ParamGroup group,
             std::vector<double> init) {
    require(!index_.contains(name), "duplicate_param", "parameter registered twice: " + name);
    Tensor t = Tensor::parameter(rows, cols, std::move(init));
    index_[name] = entries_.size();
    entries_.push_back({name, group, t});
    return t;
  }

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }

  const ParamEntry& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown_param", "no parameter named " + name);
    return entries_[it->second];
  }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) {
      e.tensor.mutable_grad();
      e.tensor.zero_grad();
    }
  }

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Glorot-uniform initializer.
inline std::vector<double> glorot(Rng& rng, std::size_t fan_in, std::size_t fan_out, std::size_t count) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(count);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return v;
}

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [1, out]

  static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                       ParamGroup group, Rng& rng, double gain = 1.0) {
    auto w = glorot(rng, in, out, in * out);
    for (auto& x : w) x *= gain;
    Linear l;
    l.weight = store.add(name + ".weight", in, out, group, std::move(w));
    l.bias = store.add(name + ".bias", 1, out, group, std::vector<double>(out, 0.0));
    return l;
  }

  Tensor operator()(const Tensor& x) const {
    require(x.cols() == weight.rows(), "width_mismatch",
            "linear layer expects width " + std::to_string(weight.rows()) + ", got " + std::to_string(x.cols()));
    return affine(x, weight, bias);
  }

  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }
};

struct AttentionResult {
  Tensor heads_concat;  // [nq, width] before the output projection
  Tensor attn_mean;     // [nq, nk] head-averaged attention weights
};

// softmax(Q_h K_h^T / sqrt(d_h)) V_h per head, heads concatenated column-wise.
inline AttentionResult multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                            std::size_t heads) {
  require(heads >= 1 && q.cols() % heads == 0, "head_mismatch",
          "head count " + std::to_string(heads) + " does not divide width " + std::to_string(q.cols()));
  require(k.cols() == q.cols() && v.cols() == q.cols(), "width_mismatch", "attention: Q/K/V widths differ");
  require(k.rows() == v.rows(), "shape_mismatch", "attention: K and V token counts differ");
  const std::size_t dh = q.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  Tensor attn_sum;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
    Tensor kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
    Tensor vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
    Tensor p = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
    outs.push_back(matmul(p, vh));
    attn_sum = h == 0 ? p : add(attn_sum, p);
  }
  return {heads == 1 ? outs[0] : concat_cols(outs),
          heads == 1 ? attn_sum : scale(attn_sum, 1.0 / static_cast<double>(heads))};
}

// Gated attention pooling of a token set into one row.
struct AttentionPool {
  Linear hidden;
  Linear score;

  static AttentionPool create(ParamStore& store, const std::string& name, std::size_t width,
                              std::size_t hidden_width, ParamGroup group, Rng& rng) {
    return {Linear::create(store, name + ".hidden", width, hidden_width, group, rng),
            Linear::create(store, name + ".score", hidden_width, 1, group, rng)};
  }

  // tokens [n, width] -> [1, width]
  Tensor operator()(const Tensor& tokens) const {
    Tensor s = transpose(score(tanh(hidden(tokens))));  // [1, n]
    return matmul(softmax_rows(s), tokens);
  }
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// Adam with decoupled weight decay. Bias vectors are not decayed.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void step(ParamStore& store) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& e : store.entries()) {
      auto& st = state_[e.name];
      auto val = e.tensor.mutable_data();
      auto g = e.tensor.mutable_grad();
      if (st.m.size() != val.size()) {
        st.m.assign(val.size(), 0.0);
        st.v.assign(val.size(), 0.0);
      }
      const bool decay = e.tensor.rows() > 1;
      for (std::size_t i = 0; i < val.size(); ++i) {
        st.m[i] = cfg_.beta1 * st.m[i] + (1 - cfg_.beta1) * g[i];
        st.v[i] = cfg_.beta2 * st.v[i] + (1 - cfg_.beta2) * g[i] * g[i];
        if (decay) val[i] -= cfg_.lr * cfg_.weight_decay * val[i];
        val[i] -= cfg_.lr * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + cfg_.eps);
      }
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace dmml
