#pragma once

// JSON run configuration for the command-line tool. Unknown keys and
// out-of-range values are rejected before any command does work.

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "arrag/backbone.hpp"
#include "arrag/codebook.hpp"
#include "arrag/common.hpp"
#include "arrag/ddm.hpp"
#include "arrag/patchdb.hpp"
#include "arrag/sfb.hpp"
#include "arrag/synth.hpp"

namespace arrag {

using Json = nlohmann::ordered_json;

struct RunConfig {
  struct Paths {
    std::string output_dir = "runs";
    std::string corpus_dir = "runs/corpus";
    std::string codebook = "runs/codebook.arcb";
    std::string db = "runs/patches.arrg";
    std::string model = "runs/model.artm";
    std::string sfb = "runs/sfb.arsf";
  } paths;

  struct Corpus {
    std::size_t count = 2050;
    std::size_t held_out = 50;
    std::size_t side_px = 96;
    std::size_t palette_size = 8;
    std::vector<std::string> families = {"stripes", "checker", "disk", "gradient", "bicolor-field"};
    std::uint64_t seed = 0;
  } corpus;

  struct CodebookCfg {
    std::size_t size = 512;
    std::size_t dim = 16;
    std::size_t patch_px = 4;
    std::uint64_t proj_seed = 0;
    std::uint64_t seed = 0;
    std::size_t max_iterations = 50;
  } codebook;

  struct Db {
    std::vector<int> hops = {1, 2};
  } db;

  struct Ddm {
    double lambda = 0.05;
    double tau = 0.6;
    std::size_t k = 10;
    std::string distance = "l2";
  } ddm;

  struct Sfb {
    std::size_t max_scale = 3;
    std::size_t blenders = 2;
    std::string mode = "eq6";
    std::string score = "raw";
    std::string activation = "none";
    std::uint64_t seed = 0;
  } sfb;

  struct Model {
    std::size_t dim = 32;
    std::size_t layers = 4;
    std::size_t heads = 2;
    std::size_t ffn = 128;
    std::uint64_t seed = 0;
  } model;

  struct Train {
    std::size_t epochs = 2;
    double lr = 0.1;
    std::size_t batch = 8;
    double warmup_fraction = 0.1;
    double clip_norm = 0.0;
    double mask_rate = 0.0;
    bool sfb = false;
    bool freeze_backbone = false;
    bool exclude_own_image = true;
    std::uint64_t seed = 0;
  } train;

  struct Generate {
    std::string sampling = "categorical";
    double temperature = 1.0;
    std::size_t masked_steps = 8;
    std::size_t count = 1;
  } generate;

  struct Eval {
    std::size_t images = 50;
    std::size_t positions_per_image = 0;
    std::size_t k = 10;
    bool exclude_same_image = false;
    std::uint64_t seed = 0;
  } eval;

  struct Sweep {
    std::vector<double> lambdas = {0.0, 0.05, 0.2, 0.5, 0.9};
    std::vector<double> taus = {0.2, 0.6, 1.0};
    std::vector<std::vector<int>> hop_sets = {{1}, {2}, {1, 2}};
    std::vector<std::size_t> blenders = {0, 1, 2};
    std::size_t images = 20;
    std::size_t sfb_epochs = 1;
    std::uint64_t seed = 0;
  } sweep;

  struct Bench {
    std::size_t images = 20;
    std::size_t warmup = 3;
    std::size_t repetitions = 5;
    std::uint64_t seed = 0;
  } bench;

  std::size_t threads = 0;

  std::size_t grid_side() const { return corpus.side_px / codebook.patch_px; }

  CorpusSpec corpus_spec() const {
    CorpusSpec s;
    s.count = corpus.count;
    s.side_px = corpus.side_px;
    s.patch_px = codebook.patch_px;
    s.palette_size = corpus.palette_size;
    s.seed = corpus.seed;
    s.families.clear();
    for (const auto& f : corpus.families) s.families.push_back(parse_family(f));
    return s;
  }
  EncoderConfig encoder() const { return {codebook.patch_px, codebook.dim, codebook.proj_seed}; }
  NeighborSpec hops() const { return NeighborSpec(db.hops); }
  DdmConfig ddm_config() const {
    DdmConfig c;
    c.lambda = ddm.lambda;
    c.tau = ddm.tau;
    c.k = ddm.k;
    c.hops = hops();
    return c;
  }
  DistanceMode distance_mode() const {
    return ddm.distance == "masked-l2" ? DistanceMode::kMaskedL2 : DistanceMode::kL2;
  }
  SfbConfig sfb_config() const {
    SfbConfig c;
    c.weighting = sfb.mode == "alg1" ? ScaleWeighting::kUniform : ScaleWeighting::kSoftmax;
    c.score = sfb.score == "sigmoid" ? ScoreMode::kSigmoid : ScoreMode::kRaw;
    c.activation = sfb.activation == "tanh" ? SmoothingActivation::kTanh : SmoothingActivation::kNone;
    return c;
  }
  ModelConfig model_config() const {
    ModelConfig m;
    m.text_vocab = kTextVocab;
    m.image_vocab = codebook.size;
    m.dim = model.dim;
    m.layers = model.layers;
    m.heads = model.heads;
    m.ffn = model.ffn;
    m.prompt_len = kPromptLength;
    m.grid_side = grid_side();
    m.seed = model.seed;
    return m;
  }
  SamplingConfig sampling() const {
    return {generate.sampling == "greedy" ? SamplingMode::kGreedy : SamplingMode::kCategorical,
            generate.temperature};
  }

  /// Range checks for every field; throws Error(kConfig).
  void validate() const {
    auto check = [](bool ok, const std::string& what) {
      if (!ok) throw Error(ErrorCode::kConfig, "config: " + what);
    };
    check(!paths.output_dir.empty(), "paths.output_dir must be set");
    check(corpus.count >= 1, "corpus.count must be >= 1");
    check(corpus.held_out < corpus.count, "corpus.held_out must be smaller than corpus.count");
    check(codebook.patch_px >= 1, "codebook.patch_px must be >= 1");
    check(corpus.side_px % codebook.patch_px == 0, "corpus.side_px must be divisible by codebook.patch_px");
    check(grid_side() >= 2, "image must span at least 2x2 patches");
    check(corpus.palette_size >= 2 && corpus.palette_size <= kMaxPalette, "corpus.palette_size must be in [2, 16]");
    check(!corpus.families.empty(), "corpus.families must be non-empty");
    for (const auto& f : corpus.families) {
      try {
        parse_family(f);
      } catch (const Error&) {
        check(false, "unknown family '" + f + "'");
      }
    }
    check(codebook.size >= 2, "codebook.size must be >= 2");
    check(codebook.dim >= 3 && codebook.dim <= codebook.patch_px * codebook.patch_px * 3,
          "codebook.dim must be in [3, 3 * patch_px^2]");
    check(codebook.max_iterations >= 1, "codebook.max_iterations must be >= 1");
    check(!db.hops.empty(), "db.hops must be non-empty");
    for (auto h : db.hops) check(h >= 1 && h <= 8, "db.hops entries must be in [1, 8]");
    check(ddm.lambda >= 0.0 && ddm.lambda <= 1.0, "ddm.lambda must be in [0, 1]");
    check(ddm.tau > 0.0, "ddm.tau must be > 0");
    check(ddm.k >= 1, "ddm.k must be >= 1");
    check(ddm.distance == "l2" || ddm.distance == "masked-l2", "ddm.distance must be 'l2' or 'masked-l2'");
    check(sfb.max_scale >= 2 && sfb.max_scale <= grid_side(), "sfb.max_scale must be in [2, grid side]");
    check(sfb.blenders <= model.layers, "sfb.blenders must not exceed model.layers");
    check(sfb.mode == "eq6" || sfb.mode == "alg1", "sfb.mode must be 'eq6' or 'alg1'");
    check(sfb.score == "raw" || sfb.score == "sigmoid", "sfb.score must be 'raw' or 'sigmoid'");
    check(sfb.activation == "none" || sfb.activation == "tanh", "sfb.activation must be 'none' or 'tanh'");
    check(model.dim >= 1 && model.heads >= 1 && model.dim % model.heads == 0,
          "model.dim must be a positive multiple of model.heads");
    check(model.layers >= 1 && model.ffn >= 1, "model.layers and model.ffn must be >= 1");
    check(train.lr > 0.0, "train.lr must be > 0");
    check(train.batch >= 1, "train.batch must be >= 1");
    check(train.warmup_fraction >= 0.0 && train.warmup_fraction <= 1.0, "train.warmup_fraction must be in [0, 1]");
    check(train.clip_norm >= 0.0, "train.clip_norm must be >= 0");
    check(train.mask_rate >= 0.0 && train.mask_rate < 1.0, "train.mask_rate must be in [0, 1)");
    check(generate.sampling == "greedy" || generate.sampling == "categorical",
          "generate.sampling must be 'greedy' or 'categorical'");
    check(generate.temperature > 0.0, "generate.temperature must be > 0");
    check(generate.masked_steps >= 2, "generate.masked_steps must be >= 2");
    check(generate.count >= 1, "generate.count must be >= 1");
    check(eval.images >= 1 && eval.k >= 1, "eval.images and eval.k must be >= 1");
    check(!sweep.lambdas.empty() && !sweep.taus.empty(), "sweep.lambdas and sweep.taus must be non-empty");
    for (double l : sweep.lambdas) check(l >= 0.0 && l <= 1.0, "sweep.lambdas entries must be in [0, 1]");
    for (double t : sweep.taus) check(t > 0.0, "sweep.taus entries must be > 0");
    check(!sweep.hop_sets.empty() && !sweep.blenders.empty(), "sweep.hop_sets and sweep.blenders must be non-empty");
    for (const auto& hs : sweep.hop_sets) {
      check(!hs.empty(), "sweep.hop_sets entries must be non-empty");
      for (auto h : hs) check(h >= 1 && h <= 8, "sweep.hop_sets values must be in [1, 8]");
    }
    for (auto b : sweep.blenders) check(b <= model.layers, "sweep.blenders entries must not exceed model.layers");
    check(sweep.images >= 1, "sweep.images must be >= 1");
    check(bench.images >= 1 && bench.repetitions >= 1, "bench.images and bench.repetitions must be >= 1");
  }
};

namespace detail {

template <class T>
void read_field(const Json& obj, const char* key, T& out, const std::string& section, std::set<std::string>& seen) {
  seen.insert(key);
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kConfig, "config: " + section + "." + key + " has the wrong type");
  }
}

inline void reject_unknown(const Json& obj, const std::set<std::string>& seen, const std::string& section) {
  if (!obj.is_object()) throw Error(ErrorCode::kConfig, "config: " + section + " must be an object");
  for (const auto& [k, _] : obj.items())
    if (!seen.count(k)) throw Error(ErrorCode::kConfig, "config: unknown key " + section + "." + k);
}

}  // namespace detail

#define ARRAG_FIELDS(X)                                                                                        \
  X(paths, output_dir) X(paths, corpus_dir) X(paths, codebook) X(paths, db) X(paths, model) X(paths, sfb)       \
  X(corpus, count) X(corpus, held_out) X(corpus, side_px) X(corpus, palette_size) X(corpus, families)           \
  X(corpus, seed) X(codebook, size) X(codebook, dim) X(codebook, patch_px) X(codebook, proj_seed)               \
  X(codebook, seed) X(codebook, max_iterations) X(db, hops) X(ddm, lambda) X(ddm, tau) X(ddm, k)                \
  X(ddm, distance) X(sfb, max_scale) X(sfb, blenders) X(sfb, mode) X(sfb, score) X(sfb, activation)             \
  X(sfb, seed) X(model, dim) X(model, layers) X(model, heads) X(model, ffn) X(model, seed) X(train, epochs)     \
  X(train, lr) X(train, batch) X(train, warmup_fraction) X(train, clip_norm) X(train, mask_rate) X(train, sfb)  \
  X(train, freeze_backbone) X(train, exclude_own_image) X(train, seed) X(generate, sampling)                    \
  X(generate, temperature) X(generate, masked_steps) X(generate, count) X(eval, images)                        \
  X(eval, positions_per_image) X(eval, k) X(eval, exclude_same_image) X(eval, seed) X(sweep, lambdas)           \
  X(sweep, taus) X(sweep, hop_sets) X(sweep, blenders) X(sweep, images) X(sweep, sfb_epochs) X(sweep, seed)     \
  X(bench, images) X(bench, warmup) X(bench, repetitions) X(bench, seed)

inline Json to_json(const RunConfig& c) {
  Json j;
#define ARRAG_TO(section, field) j[#section][#field] = c.section.field;
  ARRAG_FIELDS(ARRAG_TO)
#undef ARRAG_TO
  j["threads"] = c.threads;
  return j;
}

/// Overlays `j` onto the defaults. Unknown sections or keys are errors.
inline RunConfig config_from_json(const Json& j) {
  RunConfig c;
  if (!j.is_object()) throw Error(ErrorCode::kConfig, "config: top level must be an object");
  const std::set<std::string> sections = {"paths", "corpus", "codebook", "db",    "ddm",   "sfb",    "model",
                                          "train", "generate", "eval",   "sweep", "bench", "threads"};
  for (const auto& [k, _] : j.items())
    if (!sections.count(k)) throw Error(ErrorCode::kConfig, "config: unknown section " + k);
  std::map<std::string, std::set<std::string>> seen;
  static const Json empty = Json::object();
#define ARRAG_FROM(section, field)                                                                   \
  detail::read_field(j.contains(#section) ? j.at(#section) : empty, #field, c.section.field, #section, \
                     seen[#section]);
  ARRAG_FIELDS(ARRAG_FROM)
#undef ARRAG_FROM
  for (const auto& [section, keys] : seen)
    if (j.contains(section)) detail::reject_unknown(j.at(section), keys, section);
  std::set<std::string> top_seen;
  detail::read_field(j, "threads", c.threads, "", top_seen);
  return c;
}

#undef ARRAG_FIELDS

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config " + path);
  Json j;
  try {
    j = Json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kConfig, std::string("config: parse error: ") + e.what());
  }
  return config_from_json(j);
}

/// Stable 16-hex-digit identifier of a resolved config plus command label.
inline std::string config_digest(const RunConfig& c, const std::string& label) {
  const std::string text = to_json(c).dump() + "|" + label;
  const std::uint64_t h = fnv1a(std::as_bytes(std::span<const char>(text.data(), text.size())));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace arrag
