#pragma once

// Evaluation harnesses: retrieval accuracy per rank, Fréchet distance on
// token-window features, decoding sweeps and the overhead benchmark, with
// CSV and SVG writers.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "arrag/backbone.hpp"
#include "arrag/codebook.hpp"
#include "arrag/common.hpp"
#include "arrag/generate.hpp"
#include "arrag/patchdb.hpp"

namespace arrag {

// ---------------------------------------------------------------------------
// retrieval accuracy

struct RetrievalAccuracyReport {
  std::vector<double> rank_mean;  // k = 1..K
  double random_mean = 0.0;
  double random_stderr = 0.0;
  std::size_t samples = 0;

  double mean_over_ranks() const {
    double s = 0.0;
    for (double v : rank_mean) s += v;
    return rank_mean.empty() ? 0.0 : s / static_cast<double>(rank_mean.size());
  }
};

struct RetrievalAccuracyOptions {
  std::size_t k = 10;
  std::size_t images = 50;               // sampled images (all if larger than the corpus)
  std::size_t positions_per_image = 0;   // 0 = every cell
  bool exclude_same_image = false;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// `grids[e]` must be the encoded grid of image `image_ids[e]` in the db.
/// Queries use full-availability keys; for each rank k the L2 distance
/// between the ground-truth feature and the k-th retrieved value is
/// averaged. The random baseline draws one uniform codebook id per sample.
inline RetrievalAccuracyReport retrieval_accuracy(const PatchDb& db, const Codebook& cb,
                                                  std::span<const PatchGrid> grids,
                                                  std::span<const std::uint32_t> image_ids,
                                                  const RetrievalAccuracyOptions& opt) {
  check_codebook(db, cb);
  require(!grids.empty(), "retrieval_accuracy: empty sample", ErrorCode::kInvalidArgument);
  require(grids.size() == image_ids.size(), "retrieval_accuracy: one image id per grid");
  require(opt.k >= 1, "retrieval_accuracy: K must be >= 1");
  require(db.size() >= opt.k + (opt.exclude_same_image ? grids.front().cells() : 0),
          "retrieval_accuracy: database smaller than K");

  Rng rng(opt.seed);
  std::vector<std::size_t> pick(grids.size());
  std::iota(pick.begin(), pick.end(), 0);
  rng.shuffle(pick);
  pick.resize(std::min(opt.images, pick.size()));

  struct Query {
    std::size_t grid, cell;
    TokenId random_token;
  };
  std::vector<Query> queries;
  for (std::size_t g : pick) {
    const std::size_t cells = grids[g].cells();
    require(grids[g].dim == db.d, "retrieval_accuracy: grid dimension does not match database");
    std::vector<std::size_t> pos(cells);
    std::iota(pos.begin(), pos.end(), 0);
    if (opt.positions_per_image > 0 && opt.positions_per_image < cells) {
      rng.shuffle(pos);
      pos.resize(opt.positions_per_image);
      std::sort(pos.begin(), pos.end());
    }
    for (std::size_t c : pos) queries.push_back({g, c, static_cast<TokenId>(rng.below(cb.size()))});
  }
  require(!queries.empty(), "retrieval_accuracy: empty sample", ErrorCode::kInvalidArgument);

  // Identical keys from the same exclusion group share one search.
  const std::size_t kd = db.key_dim;
  std::vector<float> keys(queries.size() * kd);
  std::vector<std::optional<std::uint32_t>> owner(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const PatchGrid& g = grids[queries[q].grid];
    build_key_into(g.features, g.side, g.dim, queries[q].cell / g.side, queries[q].cell % g.side, db.spec,
                   always_available, std::span<float>(keys.data() + q * kd, kd));
    if (opt.exclude_same_image) owner[q] = image_ids[queries[q].grid];
  }
  auto compare = [&](std::size_t a, std::size_t b) {
    if (owner[a] != owner[b]) return owner[a] < owner[b] ? -1 : 1;
    return std::memcmp(keys.data() + a * kd, keys.data() + b * kd, kd * sizeof(float));
  };
  std::vector<std::size_t> order(queries.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const int c = compare(a, b);
    return c != 0 ? c < 0 : a < b;
  });
  std::vector<std::size_t> group(queries.size()), reps;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t q = order[i];
    if (reps.empty() || compare(reps.back(), q) != 0) reps.push_back(q);
    group[q] = reps.size() - 1;
  }

  const bool screened = reps.size() >= 64;
  const ScreenedIndex index = screened ? ScreenedIndex(db) : ScreenedIndex();
  std::vector<std::vector<RetrievalHit>> hits(reps.size());
  parallel_for(reps.size(), resolve_threads(opt.threads), [&](std::size_t u) {
    SearchOptions so;
    so.exclude_image = owner[reps[u]];
    const std::span<const float> key(keys.data() + reps[u] * kd, kd);
    hits[u] = screened ? index.search(db, key, opt.k, so) : search(db, key, opt.k, so);
  });

  std::vector<std::vector<double>> per_query(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const PatchGrid& g = grids[queries[q].grid];
    const auto truth = g.feature(queries[q].cell / g.side, queries[q].cell % g.side);
    for (const auto& h : hits[group[q]]) per_query[q].push_back(std::sqrt(detail::squared_l2(truth, h.value)));
  }

  RetrievalAccuracyReport rep;
  rep.samples = queries.size();
  rep.rank_mean.assign(opt.k, 0.0);
  for (std::size_t r = 0; r < opt.k; ++r) {
    double s = 0.0;
    for (const auto& v : per_query) s += v.at(r);
    rep.rank_mean[r] = s / static_cast<double>(queries.size());
  }
  double s = 0.0, s2 = 0.0;
  for (const auto& Q : queries) {
    const PatchGrid& g = grids[Q.grid];
    const double dist = std::sqrt(detail::squared_l2(g.feature(Q.cell / g.side, Q.cell % g.side),
                                                     dequantize(Q.random_token, cb)));
    s += dist;
    s2 += dist * dist;
  }
  const double n = static_cast<double>(queries.size());
  rep.random_mean = s / n;
  rep.random_stderr = n > 1 ? std::sqrt(std::max(0.0, (s2 - s * s / n) / (n - 1)) / n) : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// Fréchet distance

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline constexpr double kFrechetRidge = 1e-6;

/// Sample mean and unbiased covariance of `n` row vectors of length `dim`.
inline GaussianStats gaussian_stats(std::span<const double> rows, std::size_t dim) {
  require(dim >= 1 && rows.size() % dim == 0, "frechet: feature block is not a multiple of the dimension");
  const std::size_t n = rows.size() / dim;
  require(n > dim, "frechet: need more than " + std::to_string(dim) + " samples, got " + std::to_string(n),
          ErrorCode::kInvalidArgument);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(
      rows.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  GaussianStats st;
  st.mean = X.colwise().mean().transpose();
  const Eigen::MatrixXd C = X.rowwise() - st.mean.transpose();
  st.cov = (C.transpose() * C) / static_cast<double>(n - 1);
  return st;
}

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with a 1e-6 ridge
/// on both covariances and the square-root trace taken from the eigenvalues
/// of S_a^(1/2) S_b S_a^(1/2).
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  require(a.mean.size() == b.mean.size() && a.cov.rows() == a.mean.size() && b.cov.rows() == b.mean.size(),
          "frechet: dimension mismatch");
  const auto d = a.mean.size();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd sa = 0.5 * (a.cov + a.cov.transpose()) + kFrechetRidge * I;
  const Eigen::MatrixXd sb = 0.5 * (b.cov + b.cov.transpose()) + kFrechetRidge * I;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(sa);
  const double tol = 1e-12 * std::max(1.0, sa.diagonal().cwiseAbs().maxCoeff());
  if (ea.eigenvalues().minCoeff() < -tol) throw Error(ErrorCode::kNumeric, "frechet: covariance not PSD after ridge");
  const Eigen::VectorXd ra = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sa_half = ea.eigenvectors() * ra.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = sa_half * sb * sa_half;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
  const double tolm = 1e-10 * std::max(1.0, m.diagonal().cwiseAbs().maxCoeff());
  if (em.eigenvalues().minCoeff() < -tolm) throw Error(ErrorCode::kNumeric, "frechet: covariance product not PSD");
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fd = (a.mean - b.mean).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, fd);
}

inline double frechet_distance(std::span<const double> features_a, std::span<const double> features_b,
                               std::size_t dim) {
  return frechet_distance(gaussian_stats(features_a, dim), gaussian_stats(features_b, dim));
}

/// Feature rows for one token grid: every 2x2 window of code vectors,
/// concatenated in raster order (4d values per window).
inline void append_window_features(std::span<const TokenId> tokens, std::size_t side, const Codebook& cb,
                                   std::vector<double>& out) {
  require(tokens.size() == side * side && side >= 2, "features: token grid must be side^2 with side >= 2");
  for (std::size_t i = 0; i + 1 < side; ++i)
    for (std::size_t j = 0; j + 1 < side; ++j)
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 2; ++c) {
          const auto v = dequantize(tokens[(i + r) * side + j + c], cb);
          out.insert(out.end(), v.begin(), v.end());
        }
}

inline std::size_t window_feature_dim(const Codebook& cb) { return 4 * cb.dim(); }

/// Mean over cells of the L2 distance between the generated code vector and
/// the top-1 database value for the cell's full-neighbourhood key.
inline double corpus_value_distance(std::span<const TokenId> tokens, std::size_t side, const RetrievalContext& ctx) {
  ctx.validate();
  const PatchGrid g = grid_from_tokens(tokens, side, *ctx.cb);
  double s = 0.0;
  for (std::size_t n = 0; n < g.cells(); ++n) {
    const auto hits = ctx.query(g.features, side, n / side, n % side, 1, always_available);
    require(!hits.empty(), "corpus_value_distance: empty database");
    s += std::sqrt(detail::squared_l2(dequantize(tokens[n], *ctx.cb), hits.front().value));
  }
  return s / static_cast<double>(g.cells());
}

// ---------------------------------------------------------------------------
// image-set scoring shared by the sweeps

struct EvalSet {
  std::vector<std::vector<std::uint32_t>> prompts;  // cycled over generated images
  std::vector<double> reference_features;           // window features of held-out grids
  std::size_t images = 20;
  std::uint64_t seed = 0;
  SamplingConfig sampling;
  std::size_t threads = 1;
};

struct SetScore {
  double frechet = 0.0;
  double nll = 0.0;             // mean -log p_model of generated tokens
  double value_distance = 0.0;  // mean corpus_value_distance
};

/// Generates `set.images` grids (image k uses prompt k mod P and sampling
/// seed derive_seed(set.seed, k)) and scores them.
inline SetScore score_generation(const ToyModel<float>& model, const GenerationConfig& base_cfg,
                                 const RetrievalContext& ctx, const SfbStack<float>* sfb, const EvalSet& set) {
  require(!set.prompts.empty() && set.images >= 1, "score: need prompts and at least one image");
  const auto& mc = model.config();
  std::vector<GenerationResult> res(set.images);
  parallel_for(set.images, resolve_threads(set.threads), [&](std::size_t k) {
    GenerationConfig cfg = base_cfg;
    cfg.seed = derive_seed(set.seed, k);
    cfg.sampling = set.sampling;
    res[k] = generate_raster(model, set.prompts[k % set.prompts.size()], cfg, &ctx, sfb);
  });
  std::vector<double> feats;
  SetScore sc;
  double lp = 0.0;
  std::vector<double> vd(set.images);
  parallel_for(set.images, resolve_threads(set.threads),
               [&](std::size_t k) { vd[k] = corpus_value_distance(res[k].state.tokens, mc.grid_side, ctx); });
  for (std::size_t k = 0; k < set.images; ++k) {
    append_window_features(res[k].state.tokens, mc.grid_side, *ctx.cb, feats);
    for (double v : res[k].model_logprob) lp += v;
    sc.value_distance += vd[k];
  }
  sc.nll = -lp / static_cast<double>(set.images * mc.cells());
  sc.value_distance /= static_cast<double>(set.images);
  sc.frechet = frechet_distance(feats, set.reference_features, window_feature_dim(*ctx.cb));
  return sc;
}

// ---------------------------------------------------------------------------
// sweeps

struct SweepResult {
  std::vector<std::pair<std::string, std::string>> config;  // ordered (name, value)
  SetScore score;
  double runtime_s = 0.0;
};

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// DDM sweep over lambda x tau. Every grid point shares sampling seeds, so
/// the lambda = 0 rows reproduce base decoding exactly.
inline std::vector<SweepResult> sweep_ddm(const ToyModel<float>& model, const RetrievalContext& ctx,
                                          const EvalSet& set, std::span<const double> lambdas,
                                          std::span<const double> taus, const DdmConfig& base = {}) {
  require(!lambdas.empty() && !taus.empty(), "sweep: grids must be non-empty", ErrorCode::kInvalidArgument);
  std::vector<SweepResult> out;
  for (double lam : lambdas)
    for (double tau : taus) {
      GenerationConfig cfg;
      cfg.mode = DecodeMode::kDdm;
      cfg.ddm = base;
      cfg.ddm.lambda = lam;
      cfg.ddm.tau = tau;
      cfg.ddm.validate();
      const auto t0 = std::chrono::steady_clock::now();
      SweepResult r;
      r.score = score_generation(model, cfg, ctx, nullptr, set);
      r.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      r.config = {{"lambda", format_number(lam)}, {"tau", format_number(tau)}};
      out.push_back(std::move(r));
    }
  return out;
}

/// One trained configuration of the SFB sweep. `sfb == nullptr` or an empty
/// stack (b = 0) decodes in base mode.
struct SfbVariant {
  std::string hops;
  std::size_t blenders = 0;
  const ToyModel<float>* model = nullptr;
  const SfbStack<float>* sfb = nullptr;
  RetrievalContext ctx;
};

inline std::vector<SweepResult> sweep_sfb(std::span<const SfbVariant> variants, const EvalSet& set,
                                          const DdmConfig& ddm = {}) {
  require(!variants.empty(), "sweep: no SFB variants", ErrorCode::kInvalidArgument);
  std::vector<SweepResult> out;
  for (const auto& v : variants) {
    require(v.model != nullptr, "sweep: variant without a model");
    GenerationConfig cfg;
    cfg.ddm = ddm;
    const bool has_modules = v.sfb && !v.sfb->modules.empty();
    cfg.mode = has_modules ? DecodeMode::kSfb : DecodeMode::kBase;
    const auto t0 = std::chrono::steady_clock::now();
    SweepResult r;
    r.score = score_generation(*v.model, cfg, v.ctx, has_modules ? v.sfb : nullptr, set);
    r.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.config = {{"hops", v.hops}, {"b", std::to_string(v.blenders)}};
    out.push_back(std::move(r));
  }
  return out;
}

inline constexpr const char* kMetricColumns = "frechet,nll,value_distance";

/// Deterministic sweep table: config columns then metric columns.
inline std::string sweep_csv(std::span<const SweepResult> rows) {
  std::ostringstream os;
  if (rows.empty()) return os.str();
  for (const auto& [name, _] : rows.front().config) os << name << ',';
  os << kMetricColumns << '\n';
  for (const auto& r : rows) {
    for (const auto& [_, value] : r.config) os << value << ',';
    os << format_number(r.score.frechet) << ',' << format_number(r.score.nll) << ','
       << format_number(r.score.value_distance) << '\n';
  }
  return os.str();
}

/// Wall-clock table: config columns then runtime_s.
inline std::string sweep_timing_csv(std::span<const SweepResult> rows) {
  std::ostringstream os;
  if (rows.empty()) return os.str();
  for (const auto& [name, _] : rows.front().config) os << name << ',';
  os << "runtime_s\n";
  for (const auto& r : rows) {
    for (const auto& [_, value] : r.config) os << value << ',';
    os << format_number(r.runtime_s) << '\n';
  }
  return os.str();
}

inline std::string retrieval_accuracy_csv(const RetrievalAccuracyReport& rep) {
  std::ostringstream os;
  os << "rank,mean_distance,random_mean,samples\n";
  for (std::size_t k = 0; k < rep.rank_mean.size(); ++k)
    os << k + 1 << ',' << format_number(rep.rank_mean[k]) << ',' << format_number(rep.random_mean) << ','
       << rep.samples << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// overhead benchmark

struct OverheadRow {
  std::string mode;
  double total_s = 0.0;
  double per_image_s = 0.0;
  double overhead_pct = 0.0;
};

struct BenchmarkOptions {
  std::size_t images = 20;
  std::size_t warmup = 3;
  std::size_t repetitions = 5;
  std::uint64_t seed = 0;
};

inline double median(std::vector<double> v) {
  require(!v.empty(), "median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Single-threaded wall clock for generating `images` images per mode;
/// median over repetitions after warm-up generations. Overhead is relative
/// to the first mode.
inline std::vector<OverheadRow> overhead_benchmark(const ToyModel<float>& model, const RetrievalContext& ctx,
                                                   const SfbStack<float>* sfb,
                                                   std::span<const std::pair<std::string, GenerationConfig>> modes,
                                                   std::span<const std::vector<std::uint32_t>> prompts,
                                                   const BenchmarkOptions& opt) {
  require(!modes.empty() && !prompts.empty() && opt.images >= 1 && opt.repetitions >= 1,
          "bench: need modes, prompts, images and repetitions");
  // Modes alternate image by image so slow drift in machine load hits all of them alike.
  auto generate_one = [&](const GenerationConfig& base, std::size_t k) {
    GenerationConfig cfg = base;
    cfg.seed = derive_seed(opt.seed, k);
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = generate_raster(model, prompts[k % prompts.size()], cfg, &ctx, sfb);
    if (r.state.tokens.empty()) throw Error(ErrorCode::kNumeric, "bench: empty generation");
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  for (std::size_t k = 0; k < opt.warmup; ++k)
    for (const auto& [_, cfg] : modes) generate_one(cfg, k);
  std::vector<std::vector<double>> times(modes.size(), std::vector<double>(opt.repetitions, 0.0));
  for (std::size_t rep = 0; rep < opt.repetitions; ++rep)
    for (std::size_t k = 0; k < opt.images; ++k)
      for (std::size_t m = 0; m < modes.size(); ++m) times[m][rep] += generate_one(modes[m].second, k);
  std::vector<OverheadRow> out;
  for (std::size_t m = 0; m < modes.size(); ++m) {
    OverheadRow r;
    r.mode = modes[m].first;
    r.total_s = median(times[m]);
    r.per_image_s = r.total_s / static_cast<double>(opt.images);
    out.push_back(r);
  }
  for (auto& r : out) r.overhead_pct = 100.0 * (r.total_s - out.front().total_s) / out.front().total_s;
  return out;
}

inline std::string overhead_csv(std::span<const OverheadRow> rows) {
  std::ostringstream os;
  os << "mode,total_s,per_image_s,overhead_pct\n";
  for (const auto& r : rows)
    os << r.mode << ',' << format_number(r.total_s) << ',' << format_number(r.per_image_s) << ','
       << format_number(r.overhead_pct) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// SVG line chart

struct Series {
  std::string name;
  std::vector<double> x, y;
};

inline std::string svg_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string svg_line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                  std::span<const Series> series) {
  const double W = 640, H = 420, L = 70, R = 160, T = 40, B = 60;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      x0 = std::min(x0, s.x[k]);
      x1 = std::max(x1, s.x[k]);
      y0 = std::min(y0, s.y[k]);
      y1 = std::max(y1, s.y[k]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  y0 = std::min(y0, 0.0);
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << svg_escape(title) << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << format_number(xv) << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << format_number(yv) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << svg_escape(xlabel) << "</text>\n";
  os << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " << (T + H - B) / 2
     << ")\">" << svg_escape(ylabel) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* col = colors[s % 6];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < series[s].x.size(); ++k) os << (k ? " " : "") << px(series[s].x[k]) << ',' << py(series[s].y[k]);
    os << "\"/>\n";
    for (std::size_t k = 0; k < series[s].x.size(); ++k)
      os << "<circle cx=\"" << px(series[s].x[k]) << "\" cy=\"" << py(series[s].y[k]) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (s + 1) << "\" fill=\"" << col << "\">" << svg_escape(series[s].name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path);
}

}  // namespace arrag
