#pragma once

// Decoding loops over the toy backbone: raster order with optional DDM
// merging and SFB blending, and a confidence-scheduled masked-parallel mode.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "arrag/backbone.hpp"
#include "arrag/codebook.hpp"
#include "arrag/common.hpp"
#include "arrag/ddm.hpp"
#include "arrag/patchdb.hpp"
#include "arrag/sfb.hpp"

namespace arrag {

enum class DecodeMode { kBase, kDdm, kSfb, kDdmSfb };

inline std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::kBase: return "base";
    case DecodeMode::kDdm: return "ddm";
    case DecodeMode::kSfb: return "sfb";
    case DecodeMode::kDdmSfb: return "ddm+sfb";
  }
  return "?";
}

inline DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "base") return DecodeMode::kBase;
  if (s == "ddm") return DecodeMode::kDdm;
  if (s == "sfb") return DecodeMode::kSfb;
  if (s == "ddm+sfb") return DecodeMode::kDdmSfb;
  throw Error(ErrorCode::kInvalidArgument, "unknown decode mode '" + s + "'");
}

inline bool uses_ddm(DecodeMode m) { return m == DecodeMode::kDdm || m == DecodeMode::kDdmSfb; }
inline bool uses_sfb(DecodeMode m) { return m == DecodeMode::kSfb || m == DecodeMode::kDdmSfb; }

/// Read-only retrieval resources shared by every decoding step.
struct RetrievalContext {
  const PatchDb* db = nullptr;
  const Codebook* cb = nullptr;
  DistanceMode distance = DistanceMode::kL2;
  std::optional<std::uint32_t> exclude_image;
  const ScreenedIndex* index = nullptr;  // optional accelerator for plain L2, same hits

  void validate() const {
    require(db && cb, "retrieval: database and codebook are required");
    check_codebook(*db, *cb);
    require(db->d == cb->dim(), "retrieval: database dimension does not match codebook");
  }

  /// Top-K for cell (i, j) of a feature grid, using only cells where
  /// available(r, c) holds.
  template <class Available>
  std::vector<RetrievalHit> query(std::span<const float> features, std::size_t side, std::size_t i, std::size_t j,
                                  std::size_t k, Available&& available) const {
    std::vector<float> key(db->key_dim);
    SearchOptions opt;
    opt.mode = distance;
    opt.exclude_image = exclude_image;
    opt.active_blocks = build_key_into(features, side, db->d, i, j, db->spec, available, key);
    if (index && distance == DistanceMode::kL2) return index->search(*db, key, k, opt);
    return search(*db, key, k, opt);
  }
};

struct GenerationConfig {
  DecodeMode mode = DecodeMode::kBase;
  DdmConfig ddm;
  SamplingConfig sampling;
  std::uint64_t seed = 0;
  bool keep_hidden = false;
};

struct GenerationState {
  std::vector<std::uint32_t> prompt;
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> generated;
  std::size_t next = 0;
  std::vector<HiddenGrid<float>> hidden;  // per layer, filled when keep_hidden
};

struct GenerationResult {
  GenerationState state;
  std::vector<double> model_logprob;  // log p_model(v_n) per cell
  std::vector<double> top1_distance;  // nearest retrieved key distance, NaN without retrieval
  std::vector<std::size_t> commit_step;  // masked-parallel only
};

/// Raster decoding. `ctx` is required for ddm / sfb modes and `sfb` for sfb
/// modes.
inline GenerationResult generate_raster(const ToyModel<float>& model, std::span<const std::uint32_t> prompt,
                                        const GenerationConfig& cfg, const RetrievalContext* ctx = nullptr,
                                        const SfbStack<float>* sfb = nullptr) {
  const auto& mc = model.config();
  require(prompt.size() == mc.prompt_len, "generate: prompt must have " + std::to_string(mc.prompt_len) + " tokens");
  const bool want_ddm = uses_ddm(cfg.mode), want_sfb = uses_sfb(cfg.mode);
  const bool retrieve = want_ddm || want_sfb;
  if (retrieve) {
    require(ctx != nullptr, "generate: mode " + to_string(cfg.mode) + " needs a database and codebook");
    ctx->validate();
    cfg.ddm.validate();
    require(ctx->cb->size() == mc.image_vocab, "generate: codebook size does not match model vocabulary");
  }
  if (want_sfb) {
    require(sfb != nullptr, "generate: mode " + to_string(cfg.mode) + " needs SFB parameters");
    for (const auto& m : sfb->modules)
      require(m.dim() == mc.dim, "generate: SFB width does not match model width");
  }
  const std::size_t n_cells = mc.cells(), side = mc.grid_side, M = mc.prompt_len;
  const std::size_t d = retrieve ? ctx->cb->dim() : 0;

  GenerationResult res;
  auto& st = res.state;
  st.prompt.assign(prompt.begin(), prompt.end());
  st.tokens.assign(n_cells, 0);
  st.generated.assign(n_cells, 0);
  res.model_logprob.assign(n_cells, 0.0);
  res.top1_distance.assign(n_cells, std::nan(""));

  Rng rng(cfg.seed);
  Session<float> session(model, want_sfb ? sfb : nullptr);
  for (std::size_t s = 0; s + 1 < M; ++s) session.push(prompt[s]);
  std::vector<float> features(n_cells * d, 0.0f);
  std::vector<TokenId> retrieved;
  for (std::size_t n = 0; n < n_cells; ++n) {
    const std::size_t i = n / side, j = n % side;
    std::vector<RetrievalHit> hits;
    if (retrieve) {
      hits = ctx->query(features, side, i, j, cfg.ddm.k,
                        [&](std::size_t r, std::size_t c) { return st.generated[r * side + c] != 0; });
      if (!hits.empty()) res.top1_distance[n] = hits.front().distance;
    }
    retrieved.clear();
    if (want_sfb)
      for (const auto& h : hits) retrieved.push_back(h.token);
    session.push(n == 0 ? prompt[M - 1] : st.tokens[n - 1], retrieved);
    const RowVec<float> lg = session.logits();
    TokenDistribution dist = softmax_distribution<float>(std::span<const float>(lg.data(), static_cast<std::size_t>(lg.size())));
    const TokenDistribution model_dist = dist;
    if (want_ddm) dist = merge(dist, retrieval_distribution(hits, cfg.ddm.tau, dist.size()), cfg.ddm.lambda);
    const TokenId tok = sample(dist, rng, cfg.sampling);
    st.tokens[n] = tok;
    st.generated[n] = 1;
    st.next = n + 1;
    res.model_logprob[n] = std::log(std::max(model_dist[tok], 1e-300));
    if (retrieve) {
      const auto v = dequantize(tok, *ctx->cb);
      std::copy(v.begin(), v.end(), features.begin() + static_cast<std::ptrdiff_t>(n * d));
    }
  }
  if (cfg.keep_hidden)
    for (std::size_t l = 0; l < mc.layers; ++l) st.hidden.push_back(session.hidden_grid(l, n_cells - 1, true));
  return res;
}

/// One DDM step on a partially decoded raster state: next-token distribution
/// from the model, merged with the retrieval distribution of the causal
/// query, then sampled and appended.
inline TokenId ddm_step(GenerationState& st, const ToyModel<float>& model, const RetrievalContext& ctx,
                        const DdmConfig& cfg, Rng& rng, const SamplingConfig& sampling = {}) {
  const auto& mc = model.config();
  ctx.validate();
  cfg.validate();
  require(st.next < mc.cells(), "ddm_step: grid already complete");
  const std::size_t side = mc.grid_side, n = st.next, d = ctx.cb->dim();
  std::vector<float> features(mc.cells() * d, 0.0f);
  for (std::size_t m = 0; m < n; ++m) {
    const auto v = dequantize(st.tokens[m], *ctx.cb);
    std::copy(v.begin(), v.end(), features.begin() + static_cast<std::ptrdiff_t>(m * d));
  }
  const auto hits = ctx.query(features, side, n / side, n % side, cfg.k,
                              [&](std::size_t r, std::size_t c) { return r * side + c < n; });
  const auto fwd = model_forward(model, st.prompt, std::span<const TokenId>(st.tokens.data(), n));
  const auto dist = merge(fwd.next, retrieval_distribution(hits, cfg.tau, fwd.next.size()), cfg.lambda);
  const TokenId tok = sample(dist, rng, sampling);
  st.tokens.resize(mc.cells(), 0);
  st.generated.resize(mc.cells(), 0);
  st.tokens[n] = tok;
  st.generated[n] = 1;
  st.next = n + 1;
  return tok;
}

struct MaskedConfig {
  std::size_t steps = 8;      // T
  bool retrieval = false;     // merge retrieval in the final half
  DdmConfig ddm;
  SamplingConfig sampling;
  std::uint64_t seed = 0;
};

/// Positions still masked after step t of T under the cosine schedule.
inline std::size_t masked_remaining(std::size_t cells, std::size_t t, std::size_t steps) {
  const double frac = std::cos(std::numbers::pi / 2.0 * static_cast<double>(t) / static_cast<double>(steps));
  return t >= steps ? 0 : static_cast<std::size_t>(std::floor(static_cast<double>(cells) * std::max(frac, 0.0)));
}

/// Marks an open cell in the optional initial grid of masked decoding.
inline constexpr TokenId kMaskedCell = 0xffffffffu;

/// Confidence-scheduled parallel decoding. Every step predicts all masked
/// positions from one causal pass with mask tokens at uncommitted inputs,
/// samples a candidate per position, and commits the most confident
/// candidates. Retrieval (steps t > T/2) queries the neighbourhood over
/// committed cells. `initial` optionally pre-commits cells.
inline GenerationResult generate_masked_parallel(const ToyModel<float>& model, std::span<const std::uint32_t> prompt,
                                                 const MaskedConfig& cfg, const RetrievalContext* ctx = nullptr,
                                                 std::span<const TokenId> initial = {}) {
  const auto& mc = model.config();
  require(cfg.steps >= 2, "masked decoding: T must be >= 2");
  require(prompt.size() == mc.prompt_len, "generate: prompt must have " + std::to_string(mc.prompt_len) + " tokens");
  if (cfg.retrieval) {
    require(ctx != nullptr, "masked decoding: retrieval needs a database and codebook");
    ctx->validate();
    cfg.ddm.validate();
  }
  const std::size_t n_cells = mc.cells(), side = mc.grid_side;
  GenerationResult res;
  auto& st = res.state;
  st.prompt.assign(prompt.begin(), prompt.end());
  st.tokens.assign(n_cells, 0);
  st.generated.assign(n_cells, 0);
  res.model_logprob.assign(n_cells, 0.0);
  res.top1_distance.assign(n_cells, std::nan(""));
  res.commit_step.assign(n_cells, 0);
  if (!initial.empty()) {
    require(initial.size() == n_cells, "masked decoding: initial grid must have side^2 cells");
    for (std::size_t n = 0; n < n_cells; ++n)
      if (initial[n] != kMaskedCell) {
        require(initial[n] < mc.image_vocab, "masked decoding: initial token outside vocabulary");
        st.tokens[n] = initial[n];
        st.generated[n] = 1;
      }
  }
  const std::size_t d = cfg.retrieval ? ctx->cb->dim() : 0;
  std::vector<float> features(n_cells * d, 0.0f);
  auto refresh_features = [&] {
    for (std::size_t n = 0; n < n_cells; ++n)
      if (st.generated[n]) {
        const auto v = dequantize(st.tokens[n], *ctx->cb);
        std::copy(v.begin(), v.end(), features.begin() + static_cast<std::ptrdiff_t>(n * d));
      }
  };

  Rng rng(cfg.seed);
  std::vector<TokenId> inputs(n_cells - 1);
  std::vector<TokenId> cand(n_cells);
  std::vector<double> conf(n_cells), cand_logprob(n_cells), cand_top1(n_cells);
  for (std::size_t t = 1; t <= cfg.steps; ++t) {
    std::size_t open = 0;
    for (auto g : st.generated) open += g ? 0 : 1;
    if (open == 0) break;
    for (std::size_t n = 0; n + 1 < n_cells; ++n) inputs[n] = st.generated[n] ? st.tokens[n] : mc.mask_token();
    SequencePass<float> pass(model, nullptr);
    pass.forward(prompt, inputs, nullptr);
    const auto& logits = pass.logits();
    const bool retrieve_now = cfg.retrieval && 2 * t > cfg.steps;
    if (retrieve_now) refresh_features();
    for (std::size_t n = 0; n < n_cells; ++n) {
      if (st.generated[n]) continue;
      const auto row = logits.row(static_cast<Eigen::Index>(n));
      TokenDistribution dist = softmax_distribution<float>(std::span<const float>(row.data(), mc.image_vocab));
      const TokenDistribution model_dist = dist;
      cand_top1[n] = std::nan("");
      if (retrieve_now) {
        const auto hits = ctx->query(features, side, n / side, n % side, cfg.ddm.k,
                                     [&](std::size_t r, std::size_t c) { return st.generated[r * side + c] != 0; });
        if (!hits.empty()) cand_top1[n] = hits.front().distance;
        dist = merge(dist, retrieval_distribution(hits, cfg.ddm.tau, dist.size()), cfg.ddm.lambda);
      }
      cand[n] = sample(dist, rng, cfg.sampling);
      conf[n] = dist[cand[n]];
      cand_logprob[n] = std::log(std::max(model_dist[cand[n]], 1e-300));
    }
    const std::size_t target = std::min(open, masked_remaining(n_cells, t, cfg.steps));
    const std::size_t commit = std::max<std::size_t>(1, open - target);
    std::vector<std::size_t> order;
    for (std::size_t n = 0; n < n_cells; ++n)
      if (!st.generated[n]) order.push_back(n);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
    for (std::size_t k = 0; k < std::min(commit, order.size()); ++k) {
      const std::size_t n = order[k];
      st.tokens[n] = cand[n];
      st.generated[n] = 1;
      res.commit_step[n] = t;
      res.model_logprob[n] = cand_logprob[n];
      res.top1_distance[n] = cand_top1[n];
    }
  }
  for (auto g : st.generated) require(g != 0, "masked decoding: positions left uncommitted", ErrorCode::kNumeric);
  st.next = n_cells;
  return res;
}

/// Precomputes causal retrieval hits (token ids) for every target cell of
/// every example, as used for SFB training. With `exclude_own`, records from
/// the example's own image (`image_ids[e]`) are skipped.
inline void attach_retrieval(std::span<TrainExample> examples, const RetrievalContext& ctx, std::size_t k,
                             std::size_t side, std::size_t threads = 1,
                             std::span<const std::uint32_t> image_ids = {}) {
  ctx.validate();
  require(image_ids.empty() || image_ids.size() == examples.size(), "attach_retrieval: one image id per example");
  const std::size_t n_cells = side * side;
  parallel_for(examples.size(), resolve_threads(threads), [&](std::size_t e) {
    auto& ex = examples[e];
    require(ex.tokens.size() == n_cells, "attach_retrieval: example grid has wrong size");
    RetrievalContext local = ctx;
    if (!image_ids.empty()) local.exclude_image = image_ids[e];
    const PatchGrid g = grid_from_tokens(ex.tokens, side, *ctx.cb);
    ex.retrieved.assign(n_cells, {});
    for (std::size_t n = 0; n < n_cells; ++n) {
      const auto hits = local.query(g.features, side, n / side, n % side, k,
                                    [&](std::size_t r, std::size_t c) { return r * side + c < n; });
      for (const auto& h : hits) ex.retrieved[n].push_back(h.token);
    }
  });
}

}  // namespace arrag
