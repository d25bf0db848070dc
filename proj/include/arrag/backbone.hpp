#pragma once

// Toy autoregressive image-token decoder: prompt tokens followed by image
// tokens in raster order, pre-LN causal transformer blocks, softmax head over
// the codebook. Training uses hand-written reverse mode; inference uses an
// incremental per-slot session with a KV cache.
//
// Sequence layout for prompt length M and N = side^2 cells:
//   slots 0..M-1     prompt tokens
//   slots M..M+N-2   image tokens v_0..v_{N-2}
// Slot M-1+n predicts v_n, so the sequence has M+N-1 slots.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "arrag/codebook.hpp"
#include "arrag/common.hpp"
#include "arrag/ddm.hpp"
#include "arrag/sfb.hpp"

namespace arrag {

struct ModelConfig {
  std::size_t text_vocab = 64;
  std::size_t image_vocab = 512;
  std::size_t dim = 32;
  std::size_t layers = 4;
  std::size_t heads = 2;
  std::size_t ffn = 128;
  std::size_t prompt_len = 6;
  std::size_t grid_side = 8;
  std::uint64_t seed = 0;

  std::size_t cells() const { return grid_side * grid_side; }
  std::size_t seq_len() const { return prompt_len + cells() - 1; }
  TokenId mask_token() const { return static_cast<TokenId>(image_vocab); }

  void validate() const {
    require(text_vocab >= 1 && image_vocab >= 2, "model: vocabularies too small");
    require(dim >= 1 && heads >= 1 && dim % heads == 0, "model: dim must be a positive multiple of heads");
    require(layers >= 1 && ffn >= 1, "model: need at least one layer and a non-empty feed-forward block");
    require(prompt_len >= 1, "model: prompt length must be >= 1");
    require(grid_side >= 2, "model: grid side must be >= 2");
  }
  bool operator==(const ModelConfig&) const = default;
};

/// Offsets of every tensor inside the flat parameter vector.
struct ModelLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::size_t text_emb, img_emb, pos_emb, lnf_g, lnf_b, head_w, head_b, total;
  std::vector<Layer> layer;

  explicit ModelLayout(const ModelConfig& c) {
    std::size_t off = 0;
    auto take = [&](std::size_t n) {
      const std::size_t o = off;
      off += n;
      return o;
    };
    const std::size_t d = c.dim, f = c.ffn;
    text_emb = take(c.text_vocab * d);
    img_emb = take((c.image_vocab + 1) * d);
    pos_emb = take(c.seq_len() * d);
    for (std::size_t l = 0; l < c.layers; ++l) {
      Layer L{};
      L.ln1_g = take(d);
      L.ln1_b = take(d);
      L.w_qkv = take(d * 3 * d);
      L.b_qkv = take(3 * d);
      L.w_o = take(d * d);
      L.b_o = take(d);
      L.ln2_g = take(d);
      L.ln2_b = take(d);
      L.w1 = take(d * f);
      L.b1 = take(f);
      L.w2 = take(f * d);
      L.b2 = take(d);
      layer.push_back(L);
    }
    lnf_g = take(d);
    lnf_b = take(d);
    head_w = take(d * c.image_vocab);
    head_b = take(c.image_vocab);
    total = off;
  }
};

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
class ToyModel {
 public:
  using Map = Eigen::Map<MatRM<T>>;
  using CMap = Eigen::Map<const MatRM<T>>;
  using VMap = Eigen::Map<RowVec<T>>;
  using CVMap = Eigen::Map<const RowVec<T>>;

  explicit ToyModel(const ModelConfig& cfg) : cfg_(cfg), layout_((cfg.validate(), cfg)), params_(layout_.total, T(0)) {
    Rng rng(cfg.seed);
    const std::size_t d = cfg.dim, f = cfg.ffn;
    auto normal = [&](std::size_t off, std::size_t n, double sd) {
      for (std::size_t k = 0; k < n; ++k) params_[off + k] = static_cast<T>(sd * rng.normal());
    };
    auto uniform = [&](std::size_t off, std::size_t n, std::size_t fan_in) {
      const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (std::size_t k = 0; k < n; ++k) params_[off + k] = static_cast<T>(rng.uniform(-b, b));
    };
    auto ones = [&](std::size_t off, std::size_t n) { std::fill_n(params_.begin() + off, n, T(1)); };
    normal(layout_.text_emb, cfg.text_vocab * d, 0.5);
    normal(layout_.img_emb, (cfg.image_vocab + 1) * d, 0.5);
    normal(layout_.pos_emb, cfg.seq_len() * d, 0.1);
    for (const auto& L : layout_.layer) {
      ones(L.ln1_g, d);
      uniform(L.w_qkv, d * 3 * d, d);
      uniform(L.w_o, d * d, d);
      ones(L.ln2_g, d);
      uniform(L.w1, d * f, d);
      uniform(L.w2, f * d, f);
    }
    ones(layout_.lnf_g, d);
    uniform(layout_.head_w, d * cfg.image_vocab, d);
  }

  ToyModel(const ModelConfig& cfg, std::vector<T> params) : cfg_(cfg), layout_((cfg.validate(), cfg)), params_(std::move(params)) {
    require(params_.size() == layout_.total, "model: parameter vector has wrong length");
  }

  const ModelConfig& config() const { return cfg_; }
  const ModelLayout& layout() const { return layout_; }
  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }

  CMap mat(std::size_t off, std::size_t rows, std::size_t cols) const { return CMap(params_.data() + off, rows, cols); }
  CVMap vec(std::size_t off, std::size_t n) const { return CVMap(params_.data() + off, n); }

  EmbeddingView<T> image_embedding() const {
    return {params_.data() + layout_.img_emb, cfg_.image_vocab + 1, cfg_.dim};
  }

  /// Input row for slot s given the token at that slot.
  RowVec<T> slot_input(std::size_t slot, std::uint32_t token) const {
    const std::size_t d = cfg_.dim;
    require(slot < cfg_.seq_len(), "model: slot beyond sequence length");
    RowVec<T> x(d);
    if (slot < cfg_.prompt_len) {
      require(token < cfg_.text_vocab, "model: prompt token outside text vocabulary");
      x = vec(layout_.text_emb + token * d, d);
    } else {
      require(token <= cfg_.image_vocab, "model: image token outside vocabulary");
      x = vec(layout_.img_emb + token * d, d);
    }
    x += vec(layout_.pos_emb + slot * d, d);
    return x;
  }

  bool operator==(const ToyModel& o) const { return cfg_ == o.cfg_ && params_ == o.params_; }

 private:
  ModelConfig cfg_;
  ModelLayout layout_;
  std::vector<T> params_;
};

namespace detail {

template <class T>
inline T gelu(T x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <class T>
inline T gelu_grad(T x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T t = std::tanh(c * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * x * x);
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer norm; returns normalised rows and per-row 1/std.
template <class T>
void layer_norm(const MatRM<T>& x, MatRM<T>& xhat, std::vector<T>& rstd) {
  const auto n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  rstd.resize(static_cast<std::size_t>(n));
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[static_cast<std::size_t>(r)] = rs;
    xhat.row(r) = (x.row(r).array() - mean) * rs;
  }
}

template <class T>
void layer_norm_backward(const MatRM<T>& xhat, const std::vector<T>& rstd, const MatRM<T>& dxhat, MatRM<T>& dx) {
  const auto n = xhat.rows(), d = xhat.cols();
  dx.resize(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T m1 = dxhat.row(r).mean();
    const T m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
    dx.row(r) = rstd[static_cast<std::size_t>(r)] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
  }
}

}  // namespace detail

/// One training sequence. `retrieved[n]` lists retrieved token ids for
/// target cell n (used only when SFB modules are present).
struct TrainExample {
  std::vector<std::uint32_t> prompt;
  std::vector<TokenId> tokens;
  std::vector<std::vector<TokenId>> retrieved;
};

template <class T>
struct ModelGradients {
  std::vector<T> model;
  std::vector<SfbParams<T>> sfb;
};

/// Full-sequence forward and (optionally) backward for one example. Returns
/// the mean next-token cross-entropy over the N targets; if `grads` is given
/// the gradients of that loss are added into it.
template <class T>
class SequencePass {
 public:
  SequencePass(const ToyModel<T>& model, const SfbStack<T>* sfb) : m_(model), sfb_(sfb) {}

  /// `inputs` holds the token at each image slot (N-1 entries, may contain
  /// the mask token). Fills per-target logits (N x |Z|).
  void forward(std::span<const std::uint32_t> prompt, std::span<const TokenId> inputs,
               const std::vector<std::vector<TokenId>>* retrieved) {
    const auto& c = m_.config();
    const auto& L = m_.layout();
    require(prompt.size() == c.prompt_len, "model: prompt has " + std::to_string(prompt.size()) +
                                               " tokens, expected " + std::to_string(c.prompt_len));
    require(inputs.size() + 1 == c.cells(), "model: image input length must be side^2 - 1");
    const std::size_t s_len = c.seq_len(), d = c.dim, n_cells = c.cells();
    retrieved_ = retrieved;
    if (sfb_ && !sfb_->modules.empty())
      require(retrieved && retrieved->size() == n_cells, "model: SFB needs retrieved tokens for every target");
    prompt_.assign(prompt.begin(), prompt.end());
    inputs_.assign(inputs.begin(), inputs.end());

    MatRM<T> x(s_len, d);
    for (std::size_t s = 0; s < s_len; ++s)
      x.row(static_cast<Eigen::Index>(s)) = m_.slot_input(s, s < c.prompt_len ? prompt[s] : inputs[s - c.prompt_len]);

    caches_.assign(c.layers, {});
    for (std::size_t l = 0; l < c.layers; ++l) {
      auto& C = caches_[l];
      const auto& P = L.layer[l];
      C.x_in = x;
      detail::layer_norm(C.x_in, C.xhat1, C.rstd1);
      MatRM<T> a = (C.xhat1.array().rowwise() * m_.vec(P.ln1_g, d).array()).rowwise() + m_.vec(P.ln1_b, d).array();
      C.a = a;
      C.qkv = a * m_.mat(P.w_qkv, d, 3 * d);
      C.qkv.rowwise() += m_.vec(P.b_qkv, 3 * d);
      attention_forward(C);
      MatRM<T> o = C.ctx * m_.mat(P.w_o, d, d);
      o.rowwise() += m_.vec(P.b_o, d);
      C.x1 = C.x_in + o;
      detail::layer_norm(C.x1, C.xhat2, C.rstd2);
      C.c = (C.xhat2.array().rowwise() * m_.vec(P.ln2_g, d).array()).rowwise() + m_.vec(P.ln2_b, d).array();
      C.h = C.c * m_.mat(P.w1, d, c.ffn);
      C.h.rowwise() += m_.vec(P.b1, c.ffn);
      C.g = C.h.unaryExpr([](T v) { return detail::gelu(v); });
      MatRM<T> f = C.g * m_.mat(P.w2, c.ffn, d);
      f.rowwise() += m_.vec(P.b2, d);
      x = C.x1 + f;
      if (const SfbParams<T>* mod = sfb_ ? sfb_->at_layer(l) : nullptr) sfb_forward_layer(C, *mod, x);
    }
    x_final_ = x.bottomRows(static_cast<Eigen::Index>(n_cells));  // predicting slots M-1 .. S-1
    detail::layer_norm(x_final_, xhatf_, rstdf_);
    MatRM<T> y = (xhatf_.array().rowwise() * m_.vec(L.lnf_g, d).array()).rowwise() + m_.vec(L.lnf_b, d).array();
    yf_ = y;
    logits_ = y * m_.mat(L.head_w, d, c.image_vocab);
    logits_.rowwise() += m_.vec(L.head_b, c.image_vocab);
  }

  const MatRM<T>& logits() const { return logits_; }

  /// Mean cross-entropy of `targets` (N entries) under the current logits.
  T loss(std::span<const TokenId> targets) {
    const auto& c = m_.config();
    require(targets.size() == c.cells(), "model: target length must be side^2");
    probs_ = logits_;
    T total = 0;
    for (Eigen::Index r = 0; r < probs_.rows(); ++r) {
      const T mx = probs_.row(r).maxCoeff();
      probs_.row(r) = (probs_.row(r).array() - mx).exp();
      const T z = probs_.row(r).sum();
      probs_.row(r) /= z;
      total += -(logits_(r, targets[static_cast<std::size_t>(r)]) - mx - std::log(z));
    }
    return total / static_cast<T>(probs_.rows());
  }

  /// Backward of loss(targets); must follow forward() and loss().
  void backward(std::span<const TokenId> targets, ModelGradients<T>& grads) {
    const auto& c = m_.config();
    const auto& L = m_.layout();
    const std::size_t d = c.dim, n_cells = c.cells(), s_len = c.seq_len();
    auto G = [&](std::size_t off, std::size_t rows, std::size_t cols) {
      return Eigen::Map<MatRM<T>>(grads.model.data() + off, rows, cols);
    };
    auto GV = [&](std::size_t off, std::size_t n) { return Eigen::Map<RowVec<T>>(grads.model.data() + off, n); };

    MatRM<T> dlogits = probs_;
    for (std::size_t r = 0; r < n_cells; ++r) dlogits(static_cast<Eigen::Index>(r), targets[r]) -= T(1);
    dlogits /= static_cast<T>(n_cells);
    G(L.head_w, d, c.image_vocab).noalias() += yf_.transpose() * dlogits;
    GV(L.head_b, c.image_vocab) += dlogits.colwise().sum();
    MatRM<T> dy = dlogits * m_.mat(L.head_w, d, c.image_vocab).transpose();
    GV(L.lnf_g, d) += (dy.array() * xhatf_.array()).colwise().sum().matrix();
    GV(L.lnf_b, d) += dy.colwise().sum();
    MatRM<T> dxhat = dy.array().rowwise() * m_.vec(L.lnf_g, d).array();
    MatRM<T> dfinal;
    detail::layer_norm_backward(xhatf_, rstdf_, dxhat, dfinal);
    MatRM<T> dx = MatRM<T>::Zero(s_len, d);
    dx.bottomRows(static_cast<Eigen::Index>(n_cells)) = dfinal;

    for (std::size_t l = c.layers; l-- > 0;) {
      auto& C = caches_[l];
      const auto& P = L.layer[l];
      MatRM<T> dx_in_extra = MatRM<T>::Zero(s_len, d);
      if (sfb_) {
        const std::ptrdiff_t mi = sfb_->index_at_layer(l);
        if (mi >= 0) sfb_backward_layer(C, sfb_->modules[static_cast<std::size_t>(mi)],
                                        grads.sfb[static_cast<std::size_t>(mi)], dx, dx_in_extra, grads);
      }
      // x_out = x1 + f (+ retrieval contribution, handled above)
      const MatRM<T>& dx2 = dx;
      G(P.w2, c.ffn, d).noalias() += C.g.transpose() * dx2;
      GV(P.b2, d) += dx2.colwise().sum();
      MatRM<T> dg = dx2 * m_.mat(P.w2, c.ffn, d).transpose();
      MatRM<T> dh = dg.array() * C.h.unaryExpr([](T v) { return detail::gelu_grad(v); }).array();
      G(P.w1, d, c.ffn).noalias() += C.c.transpose() * dh;
      GV(P.b1, c.ffn) += dh.colwise().sum();
      MatRM<T> dcn = dh * m_.mat(P.w1, d, c.ffn).transpose();
      GV(P.ln2_g, d) += (dcn.array() * C.xhat2.array()).colwise().sum().matrix();
      GV(P.ln2_b, d) += dcn.colwise().sum();
      MatRM<T> dxh2 = dcn.array().rowwise() * m_.vec(P.ln2_g, d).array();
      MatRM<T> dx1;
      detail::layer_norm_backward(C.xhat2, C.rstd2, dxh2, dx1);
      dx1 += dx2;
      // x1 = x_in + ctx W_o + b_o
      G(P.w_o, d, d).noalias() += C.ctx.transpose() * dx1;
      GV(P.b_o, d) += dx1.colwise().sum();
      MatRM<T> dctx = dx1 * m_.mat(P.w_o, d, d).transpose();
      MatRM<T> dqkv = attention_backward(C, dctx);
      G(P.w_qkv, d, 3 * d).noalias() += C.a.transpose() * dqkv;
      GV(P.b_qkv, 3 * d) += dqkv.colwise().sum();
      MatRM<T> da = dqkv * m_.mat(P.w_qkv, d, 3 * d).transpose();
      GV(P.ln1_g, d) += (da.array() * C.xhat1.array()).colwise().sum().matrix();
      GV(P.ln1_b, d) += da.colwise().sum();
      MatRM<T> dxh1 = da.array().rowwise() * m_.vec(P.ln1_g, d).array();
      MatRM<T> dxin;
      detail::layer_norm_backward(C.xhat1, C.rstd1, dxh1, dxin);
      dx = dxin + dx1 + dx_in_extra;
    }
    // embeddings
    for (std::size_t s = 0; s < s_len; ++s) {
      const auto row = dx.row(static_cast<Eigen::Index>(s));
      GV(L.pos_emb + s * d, d) += row;
      if (s < c.prompt_len)
        GV(L.text_emb + prompt_[s] * d, d) += row;
      else
        GV(L.img_emb + inputs_[s - c.prompt_len] * d, d) += row;
    }
  }

 private:
  struct LayerCache {
    MatRM<T> x_in, xhat1, a, qkv, ctx, x1, xhat2, c, h, g;
    std::vector<T> rstd1, rstd2;
    std::vector<MatRM<T>> probs;  // per head, S x S (lower triangular)
    std::vector<SfbTrace<T>> traces;
    std::vector<std::vector<T>> centers;
  };

  void attention_forward(LayerCache& C) {
    const auto& c = m_.config();
    const std::size_t d = c.dim, hd = d / c.heads;
    const auto s_len = static_cast<Eigen::Index>(c.seq_len());
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    C.ctx = MatRM<T>::Zero(s_len, static_cast<Eigen::Index>(d));
    C.probs.assign(c.heads, MatRM<T>());
    for (std::size_t h = 0; h < c.heads; ++h) {
      const auto q = C.qkv.middleCols(static_cast<Eigen::Index>(h * hd), static_cast<Eigen::Index>(hd));
      const auto k = C.qkv.middleCols(static_cast<Eigen::Index>(d + h * hd), static_cast<Eigen::Index>(hd));
      const auto v = C.qkv.middleCols(static_cast<Eigen::Index>(2 * d + h * hd), static_cast<Eigen::Index>(hd));
      MatRM<T> sc = (q * k.transpose()) * scale;
      for (Eigen::Index r = 0; r < s_len; ++r) {
        const T mx = sc.row(r).head(r + 1).maxCoeff();
        T z = 0;
        for (Eigen::Index col = 0; col <= r; ++col) z += (sc(r, col) = std::exp(sc(r, col) - mx));
        for (Eigen::Index col = 0; col <= r; ++col) sc(r, col) /= z;
        for (Eigen::Index col = r + 1; col < s_len; ++col) sc(r, col) = T(0);
      }
      C.ctx.middleCols(static_cast<Eigen::Index>(h * hd), static_cast<Eigen::Index>(hd)) = sc * v;
      C.probs[h] = std::move(sc);
    }
  }

  MatRM<T> attention_backward(const LayerCache& C, const MatRM<T>& dctx) {
    const auto& c = m_.config();
    const std::size_t d = c.dim, hd = d / c.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    MatRM<T> dqkv = MatRM<T>::Zero(C.qkv.rows(), C.qkv.cols());
    for (std::size_t h = 0; h < c.heads; ++h) {
      const auto hi = static_cast<Eigen::Index>(h * hd), hn = static_cast<Eigen::Index>(hd);
      const auto q = C.qkv.middleCols(hi, hn);
      const auto k = C.qkv.middleCols(static_cast<Eigen::Index>(d) + hi, hn);
      const auto v = C.qkv.middleCols(static_cast<Eigen::Index>(2 * d) + hi, hn);
      const MatRM<T>& p = C.probs[h];
      const auto dout = dctx.middleCols(hi, hn);
      MatRM<T> dp = dout * v.transpose();
      dqkv.middleCols(static_cast<Eigen::Index>(2 * d) + hi, hn) += p.transpose() * dout;
      MatRM<T> ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
      ds *= scale;
      dqkv.middleCols(hi, hn) += ds * k;
      dqkv.middleCols(static_cast<Eigen::Index>(d) + hi, hn) += ds.transpose() * q;
    }
    return dqkv;
  }

  // Cell m of the grid holds the layer input at slot M + m for m < n, where
  // n is the target cell of predicting slot M - 1 + n.
  void sfb_forward_layer(LayerCache& C, const SfbParams<T>& mod, MatRM<T>& x) {
    const auto& c = m_.config();
    const std::size_t d = c.dim, side = c.grid_side, M = c.prompt_len;
    const auto emb = m_.image_embedding();
    C.traces.assign(c.cells(), {});
    C.centers.assign(c.cells(), {});
    std::vector<T> contribution(d);
    for (std::size_t n = 0; n < c.cells(); ++n) {
      const auto& toks = (*retrieved_)[n];
      if (toks.empty()) continue;
      auto& centers = C.centers[n];
      centers.resize(toks.size() * d);
      for (std::size_t k = 0; k < toks.size(); ++k) {
        require(toks[k] < c.image_vocab, "model: retrieved token outside vocabulary");
        std::copy_n(emb.data + std::size_t{toks[k]} * d, d, centers.begin() + static_cast<std::ptrdiff_t>(k * d));
      }
      auto cell = [&](std::size_t r, std::size_t col) -> const T* {
        const std::size_t m = r * side + col;
        return m < n ? C.x_in.row(static_cast<Eigen::Index>(M + m)).data() : nullptr;
      };
      sfb_forward_core(mod, sfb_->cfg, cell, side, n / side, n % side, centers.data(), toks.size(), C.traces[n],
                       contribution.data());
      auto row = x.row(static_cast<Eigen::Index>(M - 1 + n));
      for (std::size_t e = 0; e < d; ++e) row(static_cast<Eigen::Index>(e)) += contribution[e];
    }
  }

  void sfb_backward_layer(const LayerCache& C, const SfbParams<T>& mod, SfbParams<T>& gmod, const MatRM<T>& dx_out,
                          MatRM<T>& dx_in_extra, ModelGradients<T>& grads) {
    const auto& c = m_.config();
    const std::size_t d = c.dim, side = c.grid_side, M = c.prompt_len;
    const auto& L = m_.layout();
    std::vector<T> dcenters;
    for (std::size_t n = 0; n < c.cells(); ++n) {
      const auto& toks = (*retrieved_)[n];
      if (toks.empty()) continue;
      auto cell = [&](std::size_t r, std::size_t col) -> const T* {
        const std::size_t m = r * side + col;
        return m < n ? C.x_in.row(static_cast<Eigen::Index>(M + m)).data() : nullptr;
      };
      auto gcell = [&](std::size_t r, std::size_t col) -> T* {
        const std::size_t m = r * side + col;
        return m < n ? dx_in_extra.row(static_cast<Eigen::Index>(M + m)).data() : nullptr;
      };
      dcenters.assign(toks.size() * d, T(0));
      const RowVec<T> up = dx_out.row(static_cast<Eigen::Index>(M - 1 + n));
      sfb_backward_core(mod, sfb_->cfg, cell, gcell, side, n / side, n % side, C.centers[n].data(), C.traces[n],
                        up.data(), gmod, dcenters.data());
      for (std::size_t k = 0; k < toks.size(); ++k)
        for (std::size_t e = 0; e < d; ++e) grads.model[L.img_emb + std::size_t{toks[k]} * d + e] += dcenters[k * d + e];
    }
  }

  const ToyModel<T>& m_;
  const SfbStack<T>* sfb_;
  const std::vector<std::vector<TokenId>>* retrieved_ = nullptr;
  std::vector<std::uint32_t> prompt_;
  std::vector<TokenId> inputs_;
  std::vector<LayerCache> caches_;
  MatRM<T> x_final_, xhatf_, yf_, logits_, probs_;
  std::vector<T> rstdf_;
};

template <class T>
ModelGradients<T> zero_gradients(const ToyModel<T>& m, const SfbStack<T>* sfb) {
  ModelGradients<T> g;
  g.model.assign(m.params().size(), T(0));
  if (sfb)
    for (const auto& mod : sfb->modules) g.sfb.emplace_back(mod.max_scale(), mod.dim());
  return g;
}

/// Loss of one example; gradients are accumulated into `grads` when given.
template <class T>
T example_loss(const ToyModel<T>& m, const TrainExample& ex, const SfbStack<T>* sfb, ModelGradients<T>* grads,
               std::span<const TokenId> inputs_override = {}) {
  const auto& c = m.config();
  require(ex.tokens.size() == c.cells(), "model: example grid has wrong size");
  SequencePass<T> pass(m, sfb);
  std::span<const TokenId> inputs = inputs_override.empty()
                                        ? std::span<const TokenId>(ex.tokens.data(), c.cells() - 1)
                                        : inputs_override;
  const bool use_sfb = sfb && !sfb->modules.empty();
  pass.forward(ex.prompt, inputs, use_sfb ? &ex.retrieved : nullptr);
  const T loss = pass.loss(ex.tokens);
  if (grads) pass.backward(ex.tokens, *grads);
  return loss;
}

// ---------------------------------------------------------------------------
// incremental inference

/// Per-slot decoder state with KV cache. Layer inputs are retained so that
/// hidden grids can be assembled for SFB modules and callers.
template <class T>
class Session {
 public:
  Session(const ToyModel<T>& model, const SfbStack<T>* sfb = nullptr) : m_(model), sfb_(sfb) {
    const auto& c = m_.config();
    const auto s = static_cast<Eigen::Index>(c.seq_len()), d = static_cast<Eigen::Index>(c.dim);
    k_.assign(c.layers, MatRM<T>::Zero(s, d));
    v_.assign(c.layers, MatRM<T>::Zero(s, d));
    h_in_.assign(c.layers, MatRM<T>::Zero(s, d));
  }

  std::size_t length() const { return len_; }

  /// Processes the next slot. `retrieved` (optional) holds token ids for SFB
  /// at a predicting slot. Returns the slot's final-layer residual stream.
  RowVec<T> push(std::uint32_t token, std::span<const TokenId> retrieved = {}) {
    const auto& c = m_.config();
    const auto& L = m_.layout();
    require(len_ < c.seq_len(), "session: sequence is full");
    const std::size_t s = len_, d = c.dim, hd = d / c.heads, M = c.prompt_len, side = c.grid_side;
    const auto si = static_cast<Eigen::Index>(s);
    RowVec<T> x = m_.slot_input(s, token);
    for (std::size_t l = 0; l < c.layers; ++l) {
      const auto& P = L.layer[l];
      h_in_[l].row(si) = x;
      RowVec<T> a = layer_norm_row(x, P.ln1_g, P.ln1_b);
      RowVec<T> qkv = a * m_.mat(P.w_qkv, d, 3 * d) + m_.vec(P.b_qkv, 3 * d);
      k_[l].row(si) = qkv.segment(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
      v_[l].row(si) = qkv.segment(static_cast<Eigen::Index>(2 * d), static_cast<Eigen::Index>(d));
      RowVec<T> ctx(d);
      const T scale = T(1) / std::sqrt(static_cast<T>(hd));
      for (std::size_t h = 0; h < c.heads; ++h) {
        const auto hi = static_cast<Eigen::Index>(h * hd), hn = static_cast<Eigen::Index>(hd);
        const auto q = qkv.segment(hi, hn);
        RowVec<T> sc = (k_[l].block(0, hi, si + 1, hn) * q.transpose()).transpose() * scale;
        const T mx = sc.maxCoeff();
        sc = (sc.array() - mx).exp();
        sc /= sc.sum();
        ctx.segment(hi, hn) = sc * v_[l].block(0, hi, si + 1, hn);
      }
      RowVec<T> x1 = x + ctx * m_.mat(P.w_o, d, d) + m_.vec(P.b_o, d);
      RowVec<T> cn = layer_norm_row(x1, P.ln2_g, P.ln2_b);
      RowVec<T> hpre = cn * m_.mat(P.w1, d, c.ffn) + m_.vec(P.b1, c.ffn);
      RowVec<T> g = hpre.unaryExpr([](T v) { return detail::gelu(v); });
      RowVec<T> out = x1 + g * m_.mat(P.w2, c.ffn, d) + m_.vec(P.b2, d);
      const SfbParams<T>* mod = sfb_ ? sfb_->at_layer(l) : nullptr;
      if (mod && !retrieved.empty() && s + 1 >= M) {
        const std::size_t n = s + 1 - M;  // target cell
        const auto emb = m_.image_embedding();
        std::vector<T> centers(retrieved.size() * d);
        for (std::size_t k = 0; k < retrieved.size(); ++k) {
          require(retrieved[k] < c.image_vocab, "session: retrieved token outside vocabulary");
          std::copy_n(emb.data + std::size_t{retrieved[k]} * d, d, centers.begin() + static_cast<std::ptrdiff_t>(k * d));
        }
        auto cell = [&](std::size_t r, std::size_t col) -> const T* {
          const std::size_t m = r * side + col;
          return m < n ? h_in_[l].row(static_cast<Eigen::Index>(M + m)).data() : nullptr;
        };
        SfbTrace<T> tr;
        std::vector<T> contribution(d);
        sfb_forward_core(*mod, sfb_->cfg, cell, side, n / side, n % side, centers.data(), retrieved.size(), tr,
                         contribution.data());
        for (std::size_t e = 0; e < d; ++e) out(static_cast<Eigen::Index>(e)) += contribution[e];
      }
      x = out;
    }
    ++len_;
    last_ = x;
    return x;
  }

  /// Logits of the head applied to the most recent slot.
  RowVec<T> logits() const {
    const auto& c = m_.config();
    const auto& L = m_.layout();
    RowVec<T> y = layer_norm_row(last_, L.lnf_g, L.lnf_b);
    return y * m_.mat(L.head_w, c.dim, c.image_vocab) + m_.vec(L.head_b, c.image_vocab);
  }

  /// Layer-l input grid: cells 0..n-1 from image slots, cell n (if given)
  /// from the predicting slot M-1+n.
  HiddenGrid<T> hidden_grid(std::size_t l, std::size_t generated, bool include_next) const {
    const auto& c = m_.config();
    const std::size_t d = c.dim, M = c.prompt_len;
    HiddenGrid<T> g(c.grid_side, d);
    for (std::size_t m = 0; m < generated && M + m < len_; ++m) {
      const RowVec<T> row = h_in_[l].row(static_cast<Eigen::Index>(M + m));
      g.set(m / c.grid_side, m % c.grid_side, std::span<const T>(row.data(), d));
    }
    if (include_next && generated < c.cells() && M - 1 + generated < len_) {
      const RowVec<T> row = h_in_[l].row(static_cast<Eigen::Index>(M - 1 + generated));
      g.set(generated / c.grid_side, generated % c.grid_side, std::span<const T>(row.data(), d));
    }
    return g;
  }

 private:
  RowVec<T> layer_norm_row(const RowVec<T>& x, std::size_t g_off, std::size_t b_off) const {
    const std::size_t d = m_.config().dim;
    const T mean = x.mean();
    const T var = (x.array() - mean).square().mean();
    const T rs = T(1) / std::sqrt(var + static_cast<T>(detail::kLayerNormEps));
    RowVec<T> y = ((x.array() - mean) * rs).matrix();
    return (y.array() * m_.vec(g_off, d).array() + m_.vec(b_off, d).array()).matrix();
  }

  const ToyModel<T>& m_;
  const SfbStack<T>* sfb_;
  std::vector<MatRM<T>> k_, v_, h_in_;
  RowVec<T> last_;
  std::size_t len_ = 0;
};

template <class T>
struct ForwardResult {
  TokenDistribution next;
  std::vector<HiddenGrid<T>> hidden;  // per layer, layer inputs
};

/// Next-token distribution after `prompt` and `generated` image tokens, plus
/// per-layer hidden grids (generated cells and the predicting slot mapped to
/// the next cell).
template <class T>
ForwardResult<T> model_forward(const ToyModel<T>& m, std::span<const std::uint32_t> prompt,
                               std::span<const TokenId> generated) {
  const auto& c = m.config();
  require(prompt.size() == c.prompt_len, "model_forward: prompt length must equal the configured prompt length");
  require(generated.size() < c.cells(), "model_forward: prefix longer than the image sequence");
  Session<T> s(m);
  for (auto t : prompt) s.push(t);
  for (auto t : generated) s.push(t);
  // The last pushed slot is M-1+generated.size(), which predicts the next cell.
  const RowVec<T> lg = s.logits();
  ForwardResult<T> r;
  r.next = softmax_distribution<T>(std::span<const T>(lg.data(), static_cast<std::size_t>(lg.size())));
  for (std::size_t l = 0; l < c.layers; ++l) r.hidden.push_back(s.hidden_grid(l, generated.size(), true));
  return r;
}

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
  std::size_t epochs = 2;
  double lr = 0.1;
  std::size_t batch = 8;
  double warmup_fraction = 0.1;  // linear warm-up over this share of steps, then constant
  double clip_norm = 0.0;        // 0 disables
  double mask_rate = 0.0;        // share of image inputs replaced by the mask token
  bool freeze_backbone = false;  // only SFB parameters move
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean per-token cross-entropy per epoch
  std::size_t steps = 0;
};

/// Plain mini-batch SGD on the next-token cross-entropy.
template <class T>
TrainReport train(ToyModel<T>& m, std::span<const TrainExample> corpus, const TrainConfig& cfg,
                  SfbStack<T>* sfb = nullptr) {
  require(!corpus.empty(), "train: empty corpus");
  require(cfg.batch >= 1, "train: batch size must be >= 1");
  require(cfg.lr > 0.0, "train: learning rate must be > 0");
  TrainReport rep;
  const std::size_t per_epoch = (corpus.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t total = per_epoch * cfg.epochs;
  const std::size_t warm = static_cast<std::size_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(total)));
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::vector<TokenId> masked;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch, hi = std::min(corpus.size(), lo + cfg.batch);
      auto grads = zero_gradients(m, sfb);
      double batch_loss = 0.0;
      for (std::size_t t = lo; t < hi; ++t) {
        const auto& ex = corpus[order[t]];
        std::span<const TokenId> inputs;
        if (cfg.mask_rate > 0.0) {
          masked.assign(ex.tokens.begin(), ex.tokens.end() - 1);
          for (auto& tok : masked)
            if (rng.uniform() < cfg.mask_rate) tok = m.config().mask_token();
          inputs = masked;
        }
        batch_loss += static_cast<double>(example_loss(m, ex, sfb, &grads, inputs));
      }
      if (!std::isfinite(batch_loss))
        throw Error(ErrorCode::kNumeric, "train: non-finite loss at epoch " + std::to_string(e) + " step " +
                                             std::to_string(b) + " (lr " + std::to_string(cfg.lr) + ")");
      epoch_loss += batch_loss;
      const double step_lr =
          cfg.lr * (warm > 0 ? std::min(1.0, static_cast<double>(rep.steps + 1) / static_cast<double>(warm)) : 1.0);
      const T scale = static_cast<T>(step_lr / static_cast<double>(hi - lo));
      double norm2 = 0.0;
      if (cfg.clip_norm > 0.0) {
        for (T g : grads.model) norm2 += double(g) * double(g);
        for (auto& gm : grads.sfb)
          for (T g : gm.data()) norm2 += double(g) * double(g);
      }
      const double norm = std::sqrt(norm2) / static_cast<double>(hi - lo);
      const T clip = static_cast<T>(cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0);
      if (!cfg.freeze_backbone)
        for (std::size_t k = 0; k < m.params().size(); ++k) m.params()[k] -= scale * clip * grads.model[k];
      if (sfb)
        for (std::size_t b2 = 0; b2 < sfb->modules.size(); ++b2) {
          auto& p = sfb->modules[b2].data();
          const auto& g = grads.sfb[b2].data();
          for (std::size_t k = 0; k < p.size(); ++k) p[k] -= scale * clip * g[k];
        }
      ++rep.steps;
    }
    rep.epoch_loss.push_back(epoch_loss / static_cast<double>(corpus.size()));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// persistence: "ARTM", u32 version, u32 x 8 hyperparameters, u64 seed,
// u64 parameter count, f32 parameters.

inline constexpr std::uint32_t kModelVersion = 1;

template <class T>
void save_model(const ToyModel<T>& m, const std::string& path) {
  const auto& c = m.config();
  BinaryWriter w(path);
  w.magic("ARTM");
  w.pod<std::uint32_t>(kModelVersion);
  for (std::size_t v : {c.text_vocab, c.image_vocab, c.dim, c.layers, c.heads, c.ffn, c.prompt_len, c.grid_side})
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.pod<std::uint64_t>(c.seed);
  w.pod<std::uint64_t>(m.params().size());
  std::vector<float> f(m.params().begin(), m.params().end());
  w.array<float>(f);
  w.close();
}

template <class T = float>
ToyModel<T> load_model(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("ARTM", "model checkpoint");
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kModelVersion)
    throw Error(ErrorCode::kFormat, "unsupported model checkpoint version " + std::to_string(version) + ": " + path);
  ModelConfig c;
  c.text_vocab = r.pod<std::uint32_t>("text vocabulary");
  c.image_vocab = r.pod<std::uint32_t>("image vocabulary");
  c.dim = r.pod<std::uint32_t>("width");
  c.layers = r.pod<std::uint32_t>("layer count");
  c.heads = r.pod<std::uint32_t>("head count");
  c.ffn = r.pod<std::uint32_t>("feed-forward width");
  c.prompt_len = r.pod<std::uint32_t>("prompt length");
  c.grid_side = r.pod<std::uint32_t>("grid side");
  c.seed = r.pod<std::uint64_t>("seed");
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::kFormat, std::string("invalid model hyperparameters: ") + e.what());
  }
  const auto count = r.pod<std::uint64_t>("parameter count");
  if (count != ModelLayout(c).total) throw Error(ErrorCode::kFormat, "parameter count does not match hyperparameters: " + path);
  std::vector<float> f(count);
  r.array<float>(f, "parameter tensors");
  return ToyModel<T>(c, std::vector<T>(f.begin(), f.end()));
}

}  // namespace arrag
