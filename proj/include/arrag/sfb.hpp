#pragma once

// Smoothed feature blending. Each retrieved patch embedding is dropped into
// a copy of the partial-image hidden grid at the cell being predicted, then
// refined by two-stage q x q convolutions (q = 2..Q) restricted to the window
// placements that cover that cell. Refined patches are scored against a
// projection W and added to the layer output weighted by their score.
//
// Window placement (m, n), 0 <= m, n < q, has its top-left corner at
// (i - m, j - n); the predicted cell therefore sits at tap (m, n) of that
// window, and the second-stage kernel reads the q x q grid of first-stage
// outputs indexed by placement.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "arrag/codebook.hpp"
#include "arrag/common.hpp"
#include "arrag/patchdb.hpp"

namespace arrag {

enum class ScaleWeighting {
  kSoftmax,  // softmax(Omega)-weighted sum over scales (default)
  kUniform,  // plain 1/(Q-1) average
};

enum class ScoreMode { kRaw, kSigmoid };

enum class SmoothingActivation { kNone, kTanh };

struct SfbConfig {
  ScaleWeighting weighting = ScaleWeighting::kSoftmax;
  ScoreMode score = ScoreMode::kRaw;
  SmoothingActivation activation = SmoothingActivation::kNone;
};

/// Parameters of one SFB module, stored flat. Per scale q = 2..Q the layout
/// is conv1 taps (q*q blocks of D x D, row = output channel), conv1 bias (D),
/// conv2 taps (q*q blocks of D x D), conv2 bias (D); then Omega (Q - 1) and
/// W (D).
template <class T>
class SfbParams {
 public:
  SfbParams() = default;

  SfbParams(std::size_t max_scale, std::size_t dim) : q_max_(max_scale), d_(dim) {
    require(max_scale >= 2, "sfb: Q must be >= 2");
    require(dim >= 1, "sfb: D must be >= 1");
    std::size_t off = 0;
    for (std::size_t q = 2; q <= q_max_; ++q) {
      scale_offset_.push_back(off);
      off += 2 * (q * q * d_ * d_ + d_);
    }
    omega_offset_ = off;
    off += q_max_ - 1;
    w_offset_ = off;
    off += d_;
    data_.assign(off, T(0));
  }

  /// Kernels ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases, Omega and W zero,
  /// so a fresh module contributes nothing.
  static SfbParams init(std::size_t max_scale, std::size_t dim, std::uint64_t seed) {
    SfbParams p(max_scale, dim);
    Rng rng(seed);
    for (std::size_t q = 2; q <= max_scale; ++q) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(q * q * dim));
      for (std::size_t t = 0; t < q * q; ++t) {
        T* k1 = p.conv1(q, t);
        for (std::size_t e = 0; e < dim * dim; ++e) k1[e] = static_cast<T>(rng.uniform(-bound, bound));
      }
      for (std::size_t t = 0; t < q * q; ++t) {
        T* k2 = p.conv2(q, t);
        for (std::size_t e = 0; e < dim * dim; ++e) k2[e] = static_cast<T>(rng.uniform(-bound, bound));
      }
    }
    return p;
  }

  std::size_t max_scale() const { return q_max_; }
  std::size_t dim() const { return d_; }
  std::size_t scale_count() const { return q_max_ - 1; }

  T* conv1(std::size_t q, std::size_t tap) { return data_.data() + scale_offset_[q - 2] + tap * d_ * d_; }
  const T* conv1(std::size_t q, std::size_t tap) const { return data_.data() + scale_offset_[q - 2] + tap * d_ * d_; }
  T* bias1(std::size_t q) { return conv1(q, 0) + q * q * d_ * d_; }
  const T* bias1(std::size_t q) const { return conv1(q, 0) + q * q * d_ * d_; }
  T* conv2(std::size_t q, std::size_t tap) { return bias1(q) + d_ + tap * d_ * d_; }
  const T* conv2(std::size_t q, std::size_t tap) const { return bias1(q) + d_ + tap * d_ * d_; }
  T* bias2(std::size_t q) { return conv2(q, 0) + q * q * d_ * d_; }
  const T* bias2(std::size_t q) const { return conv2(q, 0) + q * q * d_ * d_; }
  std::span<T> omega() { return {data_.data() + omega_offset_, q_max_ - 1}; }
  std::span<const T> omega() const { return {data_.data() + omega_offset_, q_max_ - 1}; }
  std::span<T> w() { return {data_.data() + w_offset_, d_}; }
  std::span<const T> w() const { return {data_.data() + w_offset_, d_}; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool operator==(const SfbParams& o) const { return q_max_ == o.q_max_ && d_ == o.d_ && data_ == o.data_; }

 private:
  std::size_t q_max_ = 0;
  std::size_t d_ = 0;
  std::vector<std::size_t> scale_offset_;
  std::size_t omega_offset_ = 0;
  std::size_t w_offset_ = 0;
  std::vector<T> data_;
};

template <class T>
std::vector<T> scale_weights(const SfbParams<T>& p, ScaleWeighting mode) {
  const std::size_t s = p.scale_count();
  std::vector<T> w(s);
  if (mode == ScaleWeighting::kUniform) {
    std::fill(w.begin(), w.end(), T(1) / static_cast<T>(s));
    return w;
  }
  const auto om = p.omega();
  const T mx = *std::max_element(om.begin(), om.end());
  T z = 0;
  for (std::size_t k = 0; k < s; ++k) z += (w[k] = std::exp(om[k] - mx));
  for (auto& x : w) x /= z;
  return w;
}

/// side x side x D hidden states; cells not marked generated are exactly zero.
template <class T>
struct HiddenGrid {
  std::size_t side = 0;
  std::size_t dim = 0;
  std::vector<T> data;
  std::vector<std::uint8_t> generated;

  HiddenGrid() = default;
  HiddenGrid(std::size_t s, std::size_t d) : side(s), dim(d), data(s * s * d, T(0)), generated(s * s, 0) {}

  void set(std::size_t i, std::size_t j, std::span<const T> h) {
    require(h.size() == dim, "hidden grid: vector has wrong length");
    std::copy(h.begin(), h.end(), data.begin() + static_cast<std::ptrdiff_t>((i * side + j) * dim));
    generated[i * side + j] = 1;
  }
  const T* cell(std::size_t i, std::size_t j) const {
    return generated[i * side + j] ? data.data() + (i * side + j) * dim : nullptr;
  }
  std::span<const T> at(std::size_t i, std::size_t j) const { return {data.data() + (i * side + j) * dim, dim}; }
};

/// Rows of the image embedding table.
template <class T>
struct EmbeddingView {
  const T* data = nullptr;
  std::size_t rows = 0;
  std::size_t dim = 0;
};

template <class T>
std::vector<std::vector<T>> lift_retrieved(std::span<const RetrievalHit> hits, EmbeddingView<T> emb) {
  std::vector<std::vector<T>> out;
  out.reserve(hits.size());
  for (const auto& h : hits) {
    require(h.token < emb.rows, "lift_retrieved: token id " + std::to_string(h.token) + " outside embedding table");
    out.emplace_back(emb.data + std::size_t{h.token} * emb.dim, emb.data + (std::size_t{h.token} + 1) * emb.dim);
  }
  return out;
}

namespace detail {

template <class T>
inline void matvec_add(const T* a, const T* x, T* y, std::size_t d) {
  for (std::size_t o = 0; o < d; ++o) {
    T acc = 0;
    const T* row = a + o * d;
    for (std::size_t i = 0; i < d; ++i) acc += row[i] * x[i];
    y[o] += acc;
  }
}

template <class T>
inline void mat_t_vec_add(const T* a, const T* x, T* y, std::size_t d) {
  for (std::size_t o = 0; o < d; ++o) {
    const T xo = x[o];
    const T* row = a + o * d;
    for (std::size_t i = 0; i < d; ++i) y[i] += row[i] * xo;
  }
}

template <class T>
inline void outer_add(T* a, const T* u, const T* v, std::size_t d) {
  for (std::size_t o = 0; o < d; ++o) {
    const T uo = u[o];
    T* row = a + o * d;
    for (std::size_t i = 0; i < d; ++i) row[i] += uo * v[i];
  }
}

template <class T>
inline T dot(const T* a, const T* b, std::size_t d) {
  T acc = 0;
  for (std::size_t i = 0; i < d; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace detail

/// Forward intermediates kept for the backward pass.
template <class T>
struct SfbTrace {
  std::size_t hits = 0;
  std::vector<T> weights;                // per scale
  std::vector<std::vector<T>> pre, act;  // per scale: hits * q*q * D
  std::vector<std::vector<T>> hq;        // per scale: hits * D
  std::vector<T> refined;                // hits * D
  std::vector<T> z, score;               // hits
};

/// Core forward. `cell(r, c)` returns the hidden vector at (r, c) or nullptr
/// for an ungenerated / zero cell; it is only called for in-grid cells other
/// than (i, j). `centers` holds `hits` lifted embeddings back to back.
/// Writes the retrieval contribution sum_k s_k * refined_k into `contribution`.
template <class T, class CellFn>
void sfb_forward_core(const SfbParams<T>& p, const SfbConfig& cfg, CellFn&& cell, std::size_t side, std::size_t i,
                      std::size_t j, const T* centers, std::size_t hits, SfbTrace<T>& tr, T* contribution) {
  const std::size_t d = p.dim(), qmax = p.max_scale();
  require(qmax <= side, "sfb: Q (" + std::to_string(qmax) + ") exceeds grid side (" + std::to_string(side) + ")");
  require(i < side && j < side, "sfb: position outside grid");
  tr.hits = hits;
  tr.weights = scale_weights(p, cfg.weighting);
  tr.pre.assign(p.scale_count(), {});
  tr.act.assign(p.scale_count(), {});
  tr.hq.assign(p.scale_count(), {});
  tr.refined.assign(hits * d, T(0));
  std::vector<T> ctx;
  for (std::size_t q = 2; q <= qmax; ++q) {
    const std::size_t s = q - 2, wins = q * q;
    // Context part of every first-stage window: bias plus all non-centre taps.
    ctx.assign(wins * d, T(0));
    for (std::size_t m = 0; m < q; ++m)
      for (std::size_t n = 0; n < q; ++n) {
        T* out = ctx.data() + (m * q + n) * d;
        std::copy(p.bias1(q), p.bias1(q) + d, out);
        for (std::size_t a = 0; a < q; ++a)
          for (std::size_t c = 0; c < q; ++c) {
            if (a == m && c == n) continue;
            const long r = static_cast<long>(i) - static_cast<long>(m) + static_cast<long>(a);
            const long cc = static_cast<long>(j) - static_cast<long>(n) + static_cast<long>(c);
            if (r < 0 || cc < 0 || r >= static_cast<long>(side) || cc >= static_cast<long>(side)) continue;
            const T* h = cell(static_cast<std::size_t>(r), static_cast<std::size_t>(cc));
            if (h) detail::matvec_add(p.conv1(q, a * q + c), h, out, d);
          }
      }
    auto& pre = tr.pre[s];
    auto& act = tr.act[s];
    auto& hq = tr.hq[s];
    pre.resize(hits * wins * d);
    act.resize(hits * wins * d);
    hq.assign(hits * d, T(0));
    for (std::size_t k = 0; k < hits; ++k) {
      const T* center = centers + k * d;
      T* hk = hq.data() + k * d;
      std::copy(p.bias2(q), p.bias2(q) + d, hk);
      for (std::size_t w = 0; w < wins; ++w) {
        T* pw = pre.data() + (k * wins + w) * d;
        T* aw = act.data() + (k * wins + w) * d;
        std::copy(ctx.data() + w * d, ctx.data() + (w + 1) * d, pw);
        detail::matvec_add(p.conv1(q, w), center, pw, d);  // centre sits at tap (m, n) == w
        for (std::size_t e = 0; e < d; ++e)
          aw[e] = cfg.activation == SmoothingActivation::kTanh ? std::tanh(pw[e]) : pw[e];
        detail::matvec_add(p.conv2(q, w), aw, hk, d);
      }
      for (std::size_t e = 0; e < d; ++e) tr.refined[k * d + e] += tr.weights[s] * hk[e];
    }
  }
  const auto wproj = p.w();
  tr.z.assign(hits, T(0));
  tr.score.assign(hits, T(0));
  std::fill(contribution, contribution + d, T(0));
  for (std::size_t k = 0; k < hits; ++k) {
    const T* rk = tr.refined.data() + k * d;
    tr.z[k] = detail::dot(rk, wproj.data(), d);
    tr.score[k] = cfg.score == ScoreMode::kSigmoid ? T(1) / (T(1) + std::exp(-tr.z[k])) : tr.z[k];
    for (std::size_t e = 0; e < d; ++e) contribution[e] += tr.score[k] * rk[e];
  }
}

/// Core backward for the contribution returned by sfb_forward_core. Adds
/// parameter gradients into `grad`, centre gradients into `d_centers`
/// (hits * D) and context gradients through `grad_cell(r, c)` (returns a
/// writable pointer or nullptr when that cell's gradient is not wanted).
template <class T, class CellFn, class GradCellFn>
void sfb_backward_core(const SfbParams<T>& p, const SfbConfig& cfg, CellFn&& cell, GradCellFn&& grad_cell,
                       std::size_t side, std::size_t i, std::size_t j, const T* centers, const SfbTrace<T>& tr,
                       const T* upstream, SfbParams<T>& grad, T* d_centers) {
  const std::size_t d = p.dim(), hits = tr.hits;
  require(grad.max_scale() == p.max_scale() && grad.dim() == d, "sfb_backward: gradient shape mismatch");
  // Blend and compatibility.
  std::vector<T> d_refined(hits * d, T(0));
  auto dw = grad.w();
  const auto wproj = p.w();
  for (std::size_t k = 0; k < hits; ++k) {
    const T* rk = tr.refined.data() + k * d;
    const T d_score = detail::dot(upstream, rk, d);
    T dz = d_score;
    if (cfg.score == ScoreMode::kSigmoid) dz = d_score * tr.score[k] * (T(1) - tr.score[k]);
    for (std::size_t e = 0; e < d; ++e) {
      dw[e] += dz * rk[e];
      d_refined[k * d + e] = tr.score[k] * upstream[e] + dz * wproj[e];
    }
  }
  // Scale mixing.
  const std::size_t scales = p.scale_count();
  if (cfg.weighting == ScaleWeighting::kSoftmax) {
    std::vector<T> dweight(scales, T(0));
    for (std::size_t s = 0; s < scales; ++s)
      for (std::size_t k = 0; k < hits; ++k)
        dweight[s] += detail::dot(d_refined.data() + k * d, tr.hq[s].data() + k * d, d);
    T mean = 0;
    for (std::size_t s = 0; s < scales; ++s) mean += tr.weights[s] * dweight[s];
    auto dom = grad.omega();
    for (std::size_t s = 0; s < scales; ++s) dom[s] += tr.weights[s] * (dweight[s] - mean);
  }
  std::vector<T> dhq(d), dact(d), dsum;
  for (std::size_t q = 2; q <= p.max_scale(); ++q) {
    const std::size_t s = q - 2, wins = q * q;
    dsum.assign(wins * d, T(0));
    for (std::size_t k = 0; k < hits; ++k) {
      for (std::size_t e = 0; e < d; ++e) dhq[e] = tr.weights[s] * d_refined[k * d + e];
      T* db2 = grad.bias2(q);
      for (std::size_t e = 0; e < d; ++e) db2[e] += dhq[e];
      for (std::size_t w = 0; w < wins; ++w) {
        const T* aw = tr.act[s].data() + (k * wins + w) * d;
        detail::outer_add(grad.conv2(q, w), dhq.data(), aw, d);
        std::fill(dact.begin(), dact.end(), T(0));
        detail::mat_t_vec_add(p.conv2(q, w), dhq.data(), dact.data(), d);
        if (cfg.activation == SmoothingActivation::kTanh)
          for (std::size_t e = 0; e < d; ++e) dact[e] *= T(1) - aw[e] * aw[e];
        // dact is now the gradient of the first-stage pre-activation.
        T* db1 = grad.bias1(q);
        for (std::size_t e = 0; e < d; ++e) db1[e] += dact[e];
        detail::outer_add(grad.conv1(q, w), dact.data(), centers + k * d, d);
        detail::mat_t_vec_add(p.conv1(q, w), dact.data(), d_centers + k * d, d);
        for (std::size_t e = 0; e < d; ++e) dsum[w * d + e] += dact[e];
      }
    }
    // Context taps share the summed window gradient across hits.
    for (std::size_t m = 0; m < q; ++m)
      for (std::size_t n = 0; n < q; ++n) {
        const T* g = dsum.data() + (m * q + n) * d;
        for (std::size_t a = 0; a < q; ++a)
          for (std::size_t c = 0; c < q; ++c) {
            if (a == m && c == n) continue;
            const long r = static_cast<long>(i) - static_cast<long>(m) + static_cast<long>(a);
            const long cc = static_cast<long>(j) - static_cast<long>(n) + static_cast<long>(c);
            if (r < 0 || cc < 0 || r >= static_cast<long>(side) || cc >= static_cast<long>(side)) continue;
            const auto ru = static_cast<std::size_t>(r), cu = static_cast<std::size_t>(cc);
            const T* h = cell(ru, cu);
            if (!h) continue;
            detail::outer_add(grad.conv1(q, a * q + c), g, h, d);
            if (T* gh = grad_cell(ru, cu)) detail::mat_t_vec_add(p.conv1(q, a * q + c), g, gh, d);
          }
      }
  }
}

// ---------------------------------------------------------------------------
// public operations over explicit hidden grids

template <class T>
void check_grid(const HiddenGrid<T>& h, const SfbParams<T>& p) {
  require(h.dim == p.dim(), "sfb: hidden grid width does not match module width");
  require(h.data.size() == h.side * h.side * h.dim, "sfb: hidden grid storage has wrong length");
}

/// Refined representation of one retrieved embedding at cell (i, j).
template <class T>
std::vector<T> smooth(const HiddenGrid<T>& h, std::span<const T> center, std::size_t i, std::size_t j,
                      const SfbParams<T>& p, const SfbConfig& cfg = {}) {
  check_grid(h, p);
  require(center.size() == p.dim(), "smooth: retrieved embedding has wrong length");
  SfbTrace<T> tr;
  std::vector<T> contribution(p.dim());
  sfb_forward_core(p, cfg, [&](std::size_t r, std::size_t c) { return h.cell(r, c); }, h.side, i, j, center.data(), 1,
                   tr, contribution.data());
  return tr.refined;
}

template <class T>
std::vector<T> compatibility(std::span<const std::vector<T>> refined, std::span<const T> w,
                             ScoreMode mode = ScoreMode::kRaw) {
  std::vector<T> s;
  s.reserve(refined.size());
  for (const auto& r : refined) {
    require(r.size() == w.size(), "compatibility: dimension mismatch");
    const T z = detail::dot(r.data(), w.data(), w.size());
    s.push_back(mode == ScoreMode::kSigmoid ? T(1) / (T(1) + std::exp(-z)) : z);
  }
  return s;
}

/// h_res + delta + sum_k scores[k] * refined[k].
template <class T>
std::vector<T> blend(std::span<const T> h_res, std::span<const T> delta, std::span<const std::vector<T>> refined,
                     std::span<const T> scores) {
  require(refined.size() == scores.size(), "blend: refined/score length mismatch");
  require(h_res.size() == delta.size(), "blend: residual/update length mismatch");
  std::vector<T> out(h_res.size());
  for (std::size_t e = 0; e < out.size(); ++e) out[e] = h_res[e] + delta[e];
  std::vector<T> acc(h_res.size(), T(0));
  for (std::size_t k = 0; k < refined.size(); ++k) {
    require(refined[k].size() == h_res.size(), "blend: refined vector has wrong length");
    for (std::size_t e = 0; e < out.size(); ++e) acc[e] += scores[k] * refined[k][e];
  }
  for (std::size_t e = 0; e < out.size(); ++e) out[e] += acc[e];
  return out;
}

template <class T>
struct SfbLayerInput {
  const HiddenGrid<T>* grid = nullptr;
  std::size_t i = 0, j = 0;
  std::vector<T> h_res;  // residual stream entering the layer at the predicting slot
  std::vector<T> delta;  // the layer's own update at that slot
};

template <class T>
struct SfbOutput {
  std::vector<T> out;
  std::vector<std::vector<T>> refined;
  std::vector<T> scores;
};

template <class T>
std::vector<T> flatten(std::span<const std::vector<T>> rows, std::size_t d) {
  std::vector<T> flat;
  flat.reserve(rows.size() * d);
  for (const auto& r : rows) {
    require(r.size() == d, "sfb: retrieved embedding has wrong length");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return flat;
}

template <class T>
SfbOutput<T> sfb_forward(const SfbLayerInput<T>& in, std::span<const std::vector<T>> centers, const SfbParams<T>& p,
                         const SfbConfig& cfg = {}) {
  require(in.grid != nullptr, "sfb_forward: missing hidden grid");
  check_grid(*in.grid, p);
  require(in.h_res.size() == p.dim() && in.delta.size() == p.dim(), "sfb_forward: residual has wrong length");
  const auto flat = flatten(centers, p.dim());
  SfbTrace<T> tr;
  std::vector<T> contribution(p.dim());
  sfb_forward_core(p, cfg, [&](std::size_t r, std::size_t c) { return in.grid->cell(r, c); }, in.grid->side, in.i,
                   in.j, flat.data(), centers.size(), tr, contribution.data());
  SfbOutput<T> out;
  out.out.resize(p.dim());
  for (std::size_t e = 0; e < p.dim(); ++e) out.out[e] = in.h_res[e] + in.delta[e] + contribution[e];
  for (std::size_t k = 0; k < centers.size(); ++k)
    out.refined.emplace_back(tr.refined.begin() + static_cast<std::ptrdiff_t>(k * p.dim()),
                             tr.refined.begin() + static_cast<std::ptrdiff_t>((k + 1) * p.dim()));
  out.scores = tr.score;
  return out;
}

template <class T>
struct SfbGradients {
  SfbParams<T> params;
  std::vector<std::vector<T>> centers;
  HiddenGrid<T> grid;  // gradient w.r.t. generated cells of the input grid
  std::vector<T> h_res;
  std::vector<T> delta;
};

/// Reverse-mode gradients of sfb_forward(...).out contracted with `upstream`.
template <class T>
SfbGradients<T> sfb_backward(const SfbLayerInput<T>& in, std::span<const std::vector<T>> centers,
                             const SfbParams<T>& p, std::span<const T> upstream, const SfbConfig& cfg = {}) {
  require(in.grid != nullptr, "sfb_backward: missing hidden grid");
  check_grid(*in.grid, p);
  require(upstream.size() == p.dim(), "sfb_backward: upstream gradient has wrong length");
  const auto flat = flatten(centers, p.dim());
  SfbTrace<T> tr;
  std::vector<T> contribution(p.dim());
  auto cell = [&](std::size_t r, std::size_t c) { return in.grid->cell(r, c); };
  sfb_forward_core(p, cfg, cell, in.grid->side, in.i, in.j, flat.data(), centers.size(), tr, contribution.data());
  SfbGradients<T> g;
  g.params = SfbParams<T>(p.max_scale(), p.dim());
  g.grid = HiddenGrid<T>(in.grid->side, p.dim());
  g.grid.generated = in.grid->generated;
  std::vector<T> dc(flat.size(), T(0));
  sfb_backward_core(
      p, cfg, cell,
      [&](std::size_t r, std::size_t c) -> T* {
        return in.grid->generated[r * in.grid->side + c] ? g.grid.data.data() + (r * in.grid->side + c) * p.dim()
                                                         : nullptr;
      },
      in.grid->side, in.i, in.j, flat.data(), tr, upstream.data(), g.params, dc.data());
  for (std::size_t k = 0; k < centers.size(); ++k)
    g.centers.emplace_back(dc.begin() + static_cast<std::ptrdiff_t>(k * p.dim()),
                           dc.begin() + static_cast<std::ptrdiff_t>((k + 1) * p.dim()));
  g.h_res.assign(upstream.begin(), upstream.end());
  g.delta.assign(upstream.begin(), upstream.end());
  return g;
}

/// 1-indexed decoder layers after which modules are applied: floor(L/b) * t.
inline std::vector<std::size_t> placement(std::size_t layers, std::size_t blenders) {
  require(blenders >= 1, "placement: blender count must be >= 1");
  require(blenders <= layers, "placement: blender count " + std::to_string(blenders) + " exceeds layer count " +
                                  std::to_string(layers));
  std::vector<std::size_t> out;
  for (std::size_t t = 1; t <= blenders; ++t) out.push_back(layers / blenders * t);
  return out;
}

/// Modules inserted into a backbone, one per placed layer.
template <class T>
struct SfbStack {
  std::vector<SfbParams<T>> modules;
  std::vector<std::size_t> layers;  // 1-indexed, parallel to modules
  SfbConfig cfg;

  static SfbStack init(std::size_t layer_count, std::size_t blenders, std::size_t max_scale, std::size_t dim,
                       std::uint64_t seed, SfbConfig cfg = {}) {
    SfbStack s;
    s.cfg = cfg;
    s.layers = placement(layer_count, blenders);
    for (std::size_t b = 0; b < blenders; ++b) s.modules.push_back(SfbParams<T>::init(max_scale, dim, derive_seed(seed, b)));
    return s;
  }

  /// Module applied after 0-indexed layer `l`, or nullptr.
  const SfbParams<T>* at_layer(std::size_t l) const {
    for (std::size_t b = 0; b < layers.size(); ++b)
      if (layers[b] == l + 1) return &modules[b];
    return nullptr;
  }
  std::ptrdiff_t index_at_layer(std::size_t l) const {
    for (std::size_t b = 0; b < layers.size(); ++b)
      if (layers[b] == l + 1) return static_cast<std::ptrdiff_t>(b);
    return -1;
  }
};

// ---------------------------------------------------------------------------
// persistence: one "ARSF" record per module, records concatenated.
//   "ARSF", u32 version, u32 Q, u32 D, f32 parameters in layout order.

inline constexpr std::uint32_t kSfbVersion = 1;

template <class T>
void write_sfb_record(BinaryWriter& w, const SfbParams<T>& p) {
  w.magic("ARSF");
  w.pod<std::uint32_t>(kSfbVersion);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(p.max_scale()));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(p.dim()));
  std::vector<float> f(p.data().begin(), p.data().end());
  w.array<float>(f);
}

template <class T>
SfbParams<T> read_sfb_record(BinaryReader& r) {
  r.expect_magic("ARSF", "SFB parameter");
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kSfbVersion)
    throw Error(ErrorCode::kFormat, "unsupported SFB parameter version " + std::to_string(version) + ": " + r.path());
  const auto q = r.pod<std::uint32_t>("Q");
  const auto d = r.pod<std::uint32_t>("D");
  if (q < 2 || d < 1) throw Error(ErrorCode::kFormat, "invalid SFB shape: " + r.path());
  SfbParams<T> p(q, d);
  std::vector<float> f(p.data().size());
  r.array<float>(f, "SFB parameter tensors");
  std::copy(f.begin(), f.end(), p.data().begin());
  return p;
}

template <class T>
void save_sfb(const SfbParams<T>& p, const std::string& path) {
  BinaryWriter w(path);
  write_sfb_record(w, p);
  w.close();
}

template <class T = float>
SfbParams<T> load_sfb(const std::string& path) {
  BinaryReader r(path);
  return read_sfb_record<T>(r);
}

template <class T>
void save_sfb_stack(const SfbStack<T>& s, const std::string& path) {
  BinaryWriter w(path);
  for (const auto& m : s.modules) write_sfb_record(w, m);
  w.close();
}

/// Placement is recomputed from the record count and the backbone depth.
template <class T = float>
SfbStack<T> load_sfb_stack(const std::string& path, std::size_t layer_count, SfbConfig cfg = {}) {
  BinaryReader r(path);
  SfbStack<T> s;
  s.cfg = cfg;
  while (!r.at_end()) s.modules.push_back(read_sfb_record<T>(r));
  require(!s.modules.empty(), "SFB file contains no modules: " + path, ErrorCode::kFormat);
  s.layers = placement(layer_count, s.modules.size());
  return s;
}

}  // namespace arrag
