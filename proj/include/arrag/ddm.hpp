#pragma once

// Distribution-direct merging: a sparse distribution over the codebook built
// from retrieval distances, mixed into the model's next-token distribution.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "arrag/codebook.hpp"
#include "arrag/common.hpp"
#include "arrag/patchdb.hpp"

namespace arrag {

/// Probability vector over the codebook vocabulary. The all-zero vector is
/// the "empty" distribution produced by an empty hit list.
struct TokenDistribution {
  std::vector<double> probs;

  TokenDistribution() = default;
  explicit TokenDistribution(std::size_t vocab) : probs(vocab, 0.0) {}
  explicit TokenDistribution(std::vector<double> p) : probs(std::move(p)) {}

  std::size_t size() const { return probs.size(); }
  bool empty() const {
    return std::all_of(probs.begin(), probs.end(), [](double p) { return p == 0.0; });
  }
  double sum() const {
    double s = 0.0;
    for (double p : probs) s += p;
    return s;
  }
  double operator[](std::size_t i) const { return probs[i]; }
  bool operator==(const TokenDistribution&) const = default;
};

/// Softmax over logits in double precision with the max shift.
template <class T>
TokenDistribution softmax_distribution(std::span<const T> logits) {
  TokenDistribution out(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (T x : logits) mx = std::max(mx, static_cast<double>(x));
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.probs[i] = std::exp(static_cast<double>(logits[i]) - mx);
    z += out.probs[i];
  }
  for (double& p : out.probs) p /= z;
  return out;
}

struct DdmConfig {
  double lambda = 0.05;  // merge weight
  double tau = 0.6;      // retrieval temperature
  std::size_t k = 10;    // retrieved patches per query
  NeighborSpec hops = NeighborSpec({1, 2});

  void validate() const {
    require(lambda >= 0.0 && lambda <= 1.0, "ddm: lambda must be in [0, 1]");
    require(tau > 0.0 && std::isfinite(tau), "ddm: tau must be > 0");
    require(k >= 1, "ddm: K must be >= 1");
  }
};

/// p(token_k) = exp(-s_k / tau) / sum_m exp(-s_m / tau). Hits sharing a token
/// accumulate onto it.
inline TokenDistribution retrieval_distribution(std::span<const RetrievalHit> hits, double tau, std::size_t vocab) {
  require(tau > 0.0 && std::isfinite(tau), "retrieval_distribution: tau must be > 0");
  TokenDistribution out(vocab);
  if (hits.empty()) return out;
  double smin = std::numeric_limits<double>::infinity();
  for (const auto& h : hits) {
    require(std::isfinite(h.distance), "retrieval_distribution: non-finite distance");
    require(h.token < vocab, "retrieval_distribution: token id outside vocabulary");
    smin = std::min(smin, h.distance);
  }
  std::vector<double> w(hits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    w[k] = std::exp(-(hits[k].distance - smin) / tau);
    z += w[k];
  }
  for (std::size_t k = 0; k < hits.size(); ++k) out.probs[hits[k].token] += w[k] / z;
  return out;
}

/// (1 - lambda) * model + lambda * retrieval. An empty retrieval distribution
/// leaves the model distribution unchanged.
inline TokenDistribution merge(const TokenDistribution& model, const TokenDistribution& retrieval, double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, "merge: lambda must be in [0, 1]");
  require(model.size() == retrieval.size(), "merge: distributions have different sizes");
  if (retrieval.empty()) return model;
  TokenDistribution out(model.size());
  for (std::size_t i = 0; i < model.size(); ++i)
    out.probs[i] = (1.0 - lambda) * model.probs[i] + lambda * retrieval.probs[i];
  return out;
}

enum class SamplingMode { kGreedy, kCategorical };

struct SamplingConfig {
  SamplingMode mode = SamplingMode::kCategorical;
  double temperature = 1.0;
};

/// Greedy: argmax with ties to the smallest id. Categorical: one uniform draw
/// from `rng`, inverted through the CDF in id order.
inline TokenId sample(const TokenDistribution& dist, Rng& rng, const SamplingConfig& cfg = {}) {
  require(!dist.probs.empty() && !dist.empty(), "sample: empty distribution");
  if (cfg.mode == SamplingMode::kGreedy) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < dist.size(); ++i)
      if (dist.probs[i] > dist.probs[best]) best = i;
    return static_cast<TokenId>(best);
  }
  require(cfg.temperature > 0.0, "sample: temperature must be > 0");
  const std::vector<double>* p = &dist.probs;
  std::vector<double> tempered;
  if (cfg.temperature != 1.0) {
    tempered.resize(dist.size());
    for (std::size_t i = 0; i < dist.size(); ++i)
      tempered[i] = dist.probs[i] > 0.0 ? std::pow(dist.probs[i], 1.0 / cfg.temperature) : 0.0;
    p = &tempered;
  }
  double total = 0.0;
  for (double x : *p) total += x;
  const double u = rng.uniform() * total;
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < p->size(); ++i) {
    if ((*p)[i] <= 0.0) continue;
    acc += (*p)[i];
    last = i;
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last);
}

}  // namespace arrag
