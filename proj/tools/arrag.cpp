// arrag: command-line entry point.
//
// Exit codes
//   0  success
//   1  unexpected internal failure
//   2  usage error (unknown flag, missing option)
//   3  invalid argument
//   4  invalid configuration
//   5  I/O failure (missing or unwritable file)
//   6  malformed input file
//   7  codebook hash mismatch
//   8  numerical failure (non-finite loss, non-PSD covariance)

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "arrag/arrag.hpp"

namespace fs = std::filesystem;
using namespace arrag;

namespace {

const char* error_kind(ErrorCode c) {
  switch (c) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kHashMismatch: return "hash-mismatch";
    case ErrorCode::kNumeric: return "numeric";
  }
  return "internal";
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

void report_error(const std::string& kind, int code, const std::string& msg) {
  std::cerr << "arrag: error kind=" << kind << " code=" << code << ": " << one_line(msg) << '\n';
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw Error(ErrorCode::kIo, what + " not found: " + path);
}

struct Run {
  RunConfig cfg;
  fs::path dir;
  std::size_t threads = 1;
};

/// Validates the config, then creates the run directory holding a copy of
/// the resolved config. `inputs` are checked before anything is written.
Run start_run(const RunConfig& cfg, const std::string& label, const std::vector<std::pair<std::string, std::string>>& inputs,
              std::size_t threads_flag) {
  cfg.validate();
  for (const auto& [path, what] : inputs) require_file(path, what);
  Run r;
  r.cfg = cfg;
  r.threads = resolve_threads(threads_flag ? threads_flag : cfg.threads);
  const std::string name = label + "-" + config_digest(cfg, label);
  r.dir = fs::path(cfg.paths.output_dir) / name;
  std::error_code ec;
  fs::create_directories(r.dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create run directory " + r.dir.string() + ": " + ec.message());
  write_text((r.dir / "config.json").string(), to_json(cfg).dump(2) + "\n");
  return r;
}

void ensure_parent(const std::string& path) {
  const fs::path p = fs::path(path).parent_path();
  if (!p.empty()) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw Error(ErrorCode::kIo, "cannot create directory " + p.string());
  }
}

struct Split {
  std::vector<CorpusItem> train, held;
};

Split load_split(const RunConfig& cfg) {
  auto items = read_corpus(cfg.paths.corpus_dir);
  require(items.size() > cfg.corpus.held_out, "corpus has " + std::to_string(items.size()) +
                                                  " images, not more than corpus.held_out",
          ErrorCode::kConfig);
  Split s;
  const std::size_t n_train = items.size() - cfg.corpus.held_out;
  for (std::size_t k = 0; k < items.size(); ++k) (k < n_train ? s.train : s.held).push_back(std::move(items[k]));
  for (const auto& it : s.train)
    require(it.image.width == cfg.corpus.side_px, "corpus image size does not match corpus.side_px", ErrorCode::kConfig);
  return s;
}

std::vector<PatchGrid> encode_all(const std::vector<CorpusItem>& items, const RunConfig& cfg, const Codebook* cb,
                                  std::size_t threads) {
  const Projection proj(cfg.codebook.patch_px, cfg.codebook.dim, cfg.codebook.proj_seed);
  std::vector<PatchGrid> grids(items.size());
  parallel_for(items.size(), threads, [&](std::size_t k) {
    grids[k] = encode_image(items[k].image, proj);
    if (cb) tokenize(grids[k], *cb);
  });
  return grids;
}

std::vector<std::uint32_t> ids_of(const std::vector<CorpusItem>& items) {
  std::vector<std::uint32_t> ids;
  for (const auto& it : items) ids.push_back(it.id);
  return ids;
}

void use_screened_index(RetrievalContext& ctx, std::optional<ScreenedIndex>& index) {
  if (!ctx.db || ctx.distance != DistanceMode::kL2) return;
  index.emplace(*ctx.db);
  ctx.index = &*index;
}

PatchDb build_db_for(const std::vector<CorpusItem>& items, const std::vector<PatchGrid>& grids, const Codebook& cb,
                     const NeighborSpec& spec) {
  PatchDb db = empty_db(spec, cb.dim(), cb.hash());
  for (std::size_t k = 0; k < grids.size(); ++k) append_grid(db, grids[k], cb, items[k].id);
  return db;
}

std::vector<TrainExample> examples_of(const std::vector<CorpusItem>& items, const std::vector<PatchGrid>& grids) {
  std::vector<TrainExample> ex(items.size());
  for (std::size_t k = 0; k < items.size(); ++k) ex[k] = {items[k].prompt, grids[k].tokens, {}};
  return ex;
}

std::string tokens_text(std::span<const TokenId> tokens, std::size_t side) {
  std::ostringstream os;
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) os << (j ? " " : "") << tokens[i * side + j];
    os << '\n';
  }
  return os.str();
}

TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.train.epochs;
  t.lr = cfg.train.lr;
  t.batch = cfg.train.batch;
  t.warmup_fraction = cfg.train.warmup_fraction;
  t.clip_norm = cfg.train.clip_norm;
  t.mask_rate = cfg.train.mask_rate;
  t.freeze_backbone = cfg.train.freeze_backbone;
  t.seed = cfg.train.seed;
  return t;
}

EvalSet eval_set(const RunConfig& cfg, const Split& split, const Codebook& cb, std::size_t images, std::uint64_t seed,
                 std::size_t threads) {
  const auto& ref_items = split.held.empty() ? split.train : split.held;
  EvalSet set;
  for (const auto& it : ref_items) set.prompts.push_back(it.prompt);
  const auto grids = encode_all(ref_items, cfg, &cb, threads);
  for (const auto& g : grids) append_window_features(g.tokens, g.side, cb, set.reference_features);
  set.images = images;
  set.seed = seed;
  set.sampling = cfg.sampling();
  set.threads = threads;
  return set;
}

// ---------------------------------------------------------------------------
// commands

void cmd_synth(const RunConfig& cfg, std::size_t threads) {
  Run run = start_run(cfg, "synth", {}, threads);
  const auto items = generate_corpus(cfg.corpus_spec(), run.threads);
  write_corpus(items, cfg.paths.corpus_dir);
  write_text((run.dir / "summary.txt").string(),
             "images " + std::to_string(items.size()) + "\ncorpus_dir " + cfg.paths.corpus_dir + "\n");
  std::cout << "wrote " << items.size() << " images to " << cfg.paths.corpus_dir << '\n';
}

void cmd_build_codebook(const RunConfig& cfg, std::size_t threads) {
  Run run = start_run(cfg, "build-codebook", {{cfg.paths.corpus_dir + "/manifest.csv", "corpus manifest"}}, threads);
  const Split split = load_split(cfg);
  const auto grids = encode_all(split.train, cfg, nullptr, run.threads);
  std::vector<float> feats;
  for (const auto& g : grids) feats.insert(feats.end(), g.features.begin(), g.features.end());
  const Codebook cb =
      train_codebook(feats, cfg.codebook.dim, cfg.codebook.size, cfg.codebook.seed, {cfg.codebook.max_iterations, 1e-6});
  double se = 0.0;
  const std::size_t n = feats.size() / cfg.codebook.dim;
  for (std::size_t k = 0; k < n; ++k) {
    std::span<const float> v(feats.data() + k * cfg.codebook.dim, cfg.codebook.dim);
    se += detail::squared_l2(v, dequantize(quantize(v, cb), cb));
  }
  ensure_parent(cfg.paths.codebook);
  save_codebook(cb, cfg.paths.codebook);
  char buf[160];
  std::snprintf(buf, sizeof buf, "vectors %zu\ncodebook_size %zu\nquantization_rms %.10g\nhash %016llx\n", n, cb.size(),
                std::sqrt(se / static_cast<double>(n)), static_cast<unsigned long long>(cb.hash()));
  write_text((run.dir / "summary.txt").string(), buf);
  std::cout << buf;
}

void cmd_build_db(const RunConfig& cfg, std::size_t threads) {
  Run run = start_run(cfg, "build-db",
                      {{cfg.paths.corpus_dir + "/manifest.csv", "corpus manifest"}, {cfg.paths.codebook, "codebook"}},
                      threads);
  const Codebook cb = load_codebook(cfg.paths.codebook);
  require(cb.dim() == cfg.codebook.dim, "codebook dimension does not match codebook.dim", ErrorCode::kConfig);
  const Split split = load_split(cfg);
  const auto grids = encode_all(split.train, cfg, &cb, run.threads);
  const PatchDb db = build_db_for(split.train, grids, cb, cfg.hops());
  ensure_parent(cfg.paths.db);
  save_db(db, cfg.paths.db);
  const std::string s = "records " + std::to_string(db.size()) + "\nkey_dim " + std::to_string(db.key_dim) +
                        "\nhops " + db.spec.label() + "\n";
  write_text((run.dir / "summary.txt").string(), s);
  std::cout << s;
}

void cmd_train(const RunConfig& cfg, std::size_t threads, bool resume) {
  std::vector<std::pair<std::string, std::string>> inputs = {
      {cfg.paths.corpus_dir + "/manifest.csv", "corpus manifest"}, {cfg.paths.codebook, "codebook"}};
  if (cfg.train.sfb) inputs.push_back({cfg.paths.db, "patch database"});
  if (resume) inputs.push_back({cfg.paths.model, "model checkpoint"});
  Run run = start_run(cfg, resume ? "train-resume" : "train", inputs, threads);
  const Codebook cb = load_codebook(cfg.paths.codebook);
  const Split split = load_split(cfg);
  const auto grids = encode_all(split.train, cfg, &cb, run.threads);
  auto examples = examples_of(split.train, grids);
  ToyModel<float> model = resume ? load_model<float>(cfg.paths.model) : ToyModel<float>(cfg.model_config());
  require(model.config().image_vocab == cb.size() && model.config().grid_side == cfg.grid_side(),
          "model checkpoint does not match codebook size or grid side", ErrorCode::kConfig);
  std::optional<SfbStack<float>> stack;
  if (cfg.train.sfb) {
    const PatchDb db = load_db(cfg.paths.db);
    RetrievalContext ctx{&db, &cb, cfg.distance_mode(), std::nullopt};
    std::optional<ScreenedIndex> index;
    use_screened_index(ctx, index);
    const auto ids = ids_of(split.train);
    attach_retrieval(examples, ctx, cfg.ddm.k, cfg.grid_side(), run.threads,
                     cfg.train.exclude_own_image ? std::span<const std::uint32_t>(ids) : std::span<const std::uint32_t>());
    stack = SfbStack<float>::init(cfg.model.layers, cfg.sfb.blenders, cfg.sfb.max_scale, cfg.model.dim, cfg.sfb.seed,
                                  cfg.sfb_config());
  }
  const TrainReport rep = train(model, std::span<const TrainExample>(examples), train_config(cfg),
                                stack ? &*stack : nullptr);
  std::ostringstream log;
  log << "epoch,loss\n";
  for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e) log << e + 1 << ',' << format_number(rep.epoch_loss[e]) << '\n';
  write_text((run.dir / "train_log.csv").string(), log.str());
  ensure_parent(cfg.paths.model);
  save_model(model, cfg.paths.model);
  if (stack) {
    ensure_parent(cfg.paths.sfb);
    save_sfb_stack(*stack, cfg.paths.sfb);
  }
  std::cout << log.str();
}

void cmd_generate(const RunConfig& cfg, std::size_t threads, const std::string& mode, std::size_t prompt_id,
                  std::uint64_t seed, bool no_retrieval) {
  const bool masked = mode == "masked";
  const DecodeMode dm = masked ? DecodeMode::kBase : parse_decode_mode(mode);
  const bool need_db = masked ? !no_retrieval : dm != DecodeMode::kBase;
  std::vector<std::pair<std::string, std::string>> inputs = {{cfg.paths.corpus_dir + "/manifest.csv", "corpus manifest"},
                                                             {cfg.paths.codebook, "codebook"},
                                                             {cfg.paths.model, "model checkpoint"}};
  if (need_db) inputs.push_back({cfg.paths.db, "patch database"});
  if (!masked && uses_sfb(dm)) inputs.push_back({cfg.paths.sfb, "SFB parameters"});
  const std::string label = "generate-" + mode + "-p" + std::to_string(prompt_id) + "-s" + std::to_string(seed) +
                            (no_retrieval ? "-noret" : "");
  cfg.validate();
  const auto items = read_corpus(cfg.paths.corpus_dir);
  require(prompt_id < items.size(), "--prompt-id " + std::to_string(prompt_id) + " outside corpus of " +
                                        std::to_string(items.size()) + " images");
  Run run = start_run(cfg, label, inputs, threads);
  const Codebook cb = load_codebook(cfg.paths.codebook);
  const ToyModel<float> model = load_model<float>(cfg.paths.model);
  require(model.config().image_vocab == cb.size(), "model vocabulary does not match codebook", ErrorCode::kConfig);
  std::optional<PatchDb> db;
  if (need_db) db = load_db(cfg.paths.db);
  RetrievalContext ctx{db ? &*db : nullptr, &cb, cfg.distance_mode(), std::nullopt};
  std::optional<ScreenedIndex> index;
  use_screened_index(ctx, index);
  std::optional<SfbStack<float>> stack;
  if (!masked && uses_sfb(dm)) stack = load_sfb_stack<float>(cfg.paths.sfb, model.config().layers, cfg.sfb_config());
  const auto& prompt = items[prompt_id].prompt;
  const EncoderConfig enc = cfg.encoder();
  const std::size_t side = model.config().grid_side;
  for (std::size_t k = 0; k < cfg.generate.count; ++k) {
    const std::uint64_t s = derive_seed(seed, k);
    GenerationResult res;
    if (masked) {
      MaskedConfig mc;
      mc.steps = cfg.generate.masked_steps;
      mc.retrieval = need_db;
      mc.ddm = cfg.ddm_config();
      mc.sampling = cfg.sampling();
      mc.seed = s;
      res = generate_masked_parallel(model, prompt, mc, need_db ? &ctx : nullptr);
    } else {
      GenerationConfig gc;
      gc.mode = dm;
      gc.ddm = cfg.ddm_config();
      gc.sampling = cfg.sampling();
      gc.seed = s;
      res = generate_raster(model, prompt, gc, need_db ? &ctx : nullptr, stack ? &*stack : nullptr);
    }
    char name[32];
    std::snprintf(name, sizeof name, "image_%03zu", k);
    write_ppm((run.dir / (std::string(name) + ".ppm")).string(), decode_image(res.state.tokens, side, cb, enc));
    write_text((run.dir / (std::string(name) + ".tokens.txt")).string(), tokens_text(res.state.tokens, side));
  }
  std::cout << "wrote " << cfg.generate.count << " image(s) to " << run.dir.string() << '\n';
}

void cmd_eval_retrieval(const RunConfig& cfg, std::size_t threads) {
  Run run = start_run(cfg, "eval-retrieval",
                      {{cfg.paths.corpus_dir + "/manifest.csv", "corpus manifest"},
                       {cfg.paths.codebook, "codebook"},
                       {cfg.paths.db, "patch database"}},
                      threads);
  const Codebook cb = load_codebook(cfg.paths.codebook);
  const PatchDb db = load_db(cfg.paths.db);
  const Split split = load_split(cfg);
  const auto grids = encode_all(split.train, cfg, nullptr, run.threads);
  RetrievalAccuracyOptions opt;
  opt.k = cfg.eval.k;
  opt.images = cfg.eval.images;
  opt.positions_per_image = cfg.eval.positions_per_image;
  opt.exclude_same_image = cfg.eval.exclude_same_image;
  opt.seed = cfg.eval.seed;
  opt.threads = run.threads;
  const auto ids = ids_of(split.train);
  const auto rep = retrieval_accuracy(db, cb, grids, ids, opt);
  write_text((run.dir / "retrieval_accuracy.csv").string(), retrieval_accuracy_csv(rep));
  Series ranks{"top-k retrieved", {}, rep.rank_mean}, rnd{"random code", {}, {}};
  for (std::size_t k = 0; k < rep.rank_mean.size(); ++k) {
    ranks.x.push_back(static_cast<double>(k + 1));
    rnd.x.push_back(static_cast<double>(k + 1));
    rnd.y.push_back(rep.random_mean);
  }
  const std::vector<Series> series = {ranks, rnd};
  write_text((run.dir / "retrieval_accuracy.svg").string(),
             svg_line_chart("Retrieved value distance by rank", "rank k", "mean L2 distance", series));
  std::cout << retrieval_accuracy_csv(rep);
}

void cmd_sweep_ddm(const RunConfig& cfg, std::size_t threads) {
  Run run = start_run(cfg, "sweep-ddm",
                      {{cfg.paths.corpus_dir + "/manifest.csv", "corpus manifest"},
                       {cfg.paths.codebook, "codebook"},
                       {cfg.paths.db, "patch database"},
                       {cfg.paths.model, "model checkpoint"}},
                      threads);
  const Codebook cb = load_codebook(cfg.paths.codebook);
  const PatchDb db = load_db(cfg.paths.db);
  const ToyModel<float> model = load_model<float>(cfg.paths.model);
  const Split split = load_split(cfg);
  const EvalSet set = eval_set(cfg, split, cb, cfg.sweep.images, cfg.sweep.seed, run.threads);
  RetrievalContext ctx{&db, &cb, cfg.distance_mode(), std::nullopt};
  std::optional<ScreenedIndex> index;
  use_screened_index(ctx, index);
  const auto rows = sweep_ddm(model, ctx, set, cfg.sweep.lambdas, cfg.sweep.taus, cfg.ddm_config());
  write_text((run.dir / "sweep_ddm.csv").string(), sweep_csv(rows));
  write_text((run.dir / "sweep_ddm_timing.csv").string(), sweep_timing_csv(rows));
  std::vector<Series> series;
  for (std::size_t t = 0; t < cfg.sweep.taus.size(); ++t) {
    Series s{"tau " + format_number(cfg.sweep.taus[t]), {}, {}};
    for (std::size_t l = 0; l < cfg.sweep.lambdas.size(); ++l) {
      s.x.push_back(cfg.sweep.lambdas[l]);
      s.y.push_back(rows[l * cfg.sweep.taus.size() + t].score.frechet);
    }
    series.push_back(std::move(s));
  }
  write_text((run.dir / "sweep_ddm.svg").string(), svg_line_chart("Frechet distance vs lambda", "lambda", "Frechet distance", series));
  std::cout << sweep_csv(rows);
}

void cmd_sweep_sfb(const RunConfig& cfg, std::size_t threads) {
  Run run = start_run(cfg, "sweep-sfb",
                      {{cfg.paths.corpus_dir + "/manifest.csv", "corpus manifest"},
                       {cfg.paths.codebook, "codebook"},
                       {cfg.paths.model, "model checkpoint"}},
                      threads);
  const Codebook cb = load_codebook(cfg.paths.codebook);
  const ToyModel<float> base = load_model<float>(cfg.paths.model);
  const Split split = load_split(cfg);
  const auto grids = encode_all(split.train, cfg, &cb, run.threads);
  const auto ids = ids_of(split.train);
  const EvalSet set = eval_set(cfg, split, cb, cfg.sweep.images, cfg.sweep.seed, run.threads);
  std::vector<PatchDb> dbs;
  dbs.reserve(cfg.sweep.hop_sets.size());
  std::vector<ToyModel<float>> models;
  models.reserve(cfg.sweep.hop_sets.size() * cfg.sweep.blenders.size());
  std::vector<SfbStack<float>> stacks;
  stacks.reserve(models.capacity());
  std::vector<SfbVariant> variants;
  TrainConfig tc = train_config(cfg);
  tc.epochs = cfg.sweep.sfb_epochs;
  tc.freeze_backbone = true;
  for (const auto& hs : cfg.sweep.hop_sets) {
    dbs.push_back(build_db_for(split.train, grids, cb, NeighborSpec(hs)));
    RetrievalContext ctx{&dbs.back(), &cb, cfg.distance_mode(), std::nullopt};
    auto examples = examples_of(split.train, grids);
    bool attached = false;
    for (std::size_t b : cfg.sweep.blenders) {
      models.push_back(base);
      stacks.push_back(SfbStack<float>::init(base.config().layers, b, cfg.sfb.max_scale, base.config().dim,
                                             cfg.sfb.seed, cfg.sfb_config()));
      if (b > 0) {
        if (!attached) {
          attach_retrieval(examples, ctx, cfg.ddm.k, cfg.grid_side(), run.threads,
                           cfg.train.exclude_own_image ? std::span<const std::uint32_t>(ids)
                                                       : std::span<const std::uint32_t>());
          attached = true;
        }
        train(models.back(), std::span<const TrainExample>(examples), tc, &stacks.back());
      }
      variants.push_back({dbs.back().spec.label(), b, &models.back(), &stacks.back(), ctx});
    }
  }
  const auto rows = sweep_sfb(variants, set, cfg.ddm_config());
  write_text((run.dir / "sweep_sfb.csv").string(), sweep_csv(rows));
  write_text((run.dir / "sweep_sfb_timing.csv").string(), sweep_timing_csv(rows));
  std::cout << sweep_csv(rows);
}

void cmd_bench(const RunConfig& cfg, std::size_t threads) {
  Run run = start_run(cfg, "bench",
                      {{cfg.paths.corpus_dir + "/manifest.csv", "corpus manifest"},
                       {cfg.paths.codebook, "codebook"},
                       {cfg.paths.db, "patch database"},
                       {cfg.paths.model, "model checkpoint"}},
                      threads);
  const Codebook cb = load_codebook(cfg.paths.codebook);
  const PatchDb db = load_db(cfg.paths.db);
  const ToyModel<float> model = load_model<float>(cfg.paths.model);
  const SfbStack<float> stack =
      fs::exists(cfg.paths.sfb)
          ? load_sfb_stack<float>(cfg.paths.sfb, model.config().layers, cfg.sfb_config())
          : SfbStack<float>::init(model.config().layers, cfg.sfb.blenders, cfg.sfb.max_scale, model.config().dim,
                                  cfg.sfb.seed, cfg.sfb_config());
  const Split split = load_split(cfg);
  std::vector<std::vector<std::uint32_t>> prompts;
  for (const auto& it : (split.held.empty() ? split.train : split.held)) prompts.push_back(it.prompt);
  RetrievalContext ctx{&db, &cb, cfg.distance_mode(), std::nullopt};
  std::optional<ScreenedIndex> index;
  use_screened_index(ctx, index);
  std::vector<std::pair<std::string, GenerationConfig>> modes;
  for (DecodeMode m : {DecodeMode::kBase, DecodeMode::kDdm, DecodeMode::kSfb}) {
    GenerationConfig gc;
    gc.mode = m;
    gc.ddm = cfg.ddm_config();
    gc.sampling = cfg.sampling();
    modes.emplace_back(to_string(m), gc);
  }
  BenchmarkOptions bo{cfg.bench.images, cfg.bench.warmup, cfg.bench.repetitions, cfg.bench.seed};
  const auto rows = overhead_benchmark(model, ctx, &stack, modes, prompts, bo);
  write_text((run.dir / "overhead.csv").string(), overhead_csv(rows));
  std::cout << overhead_csv(rows);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"arrag: patch-level retrieval-augmented decoding for discrete image tokens"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::size_t threads = 0;
  app.add_option("-c,--config", config_path, "JSON run configuration (defaults apply to missing keys)");
  app.add_option("-t,--threads", threads, "worker threads (falls back to ARRAG_THREADS, then 1)");

  auto* c_default = app.add_subcommand("default-config", "print the default configuration as JSON");
  auto* c_synth = app.add_subcommand("synth", "write the synthetic corpus");
  auto* c_cb = app.add_subcommand("build-codebook", "train and save the codebook");
  auto* c_db = app.add_subcommand("build-db", "encode the corpus and save the patch database");
  auto* c_train = app.add_subcommand("train", "train the backbone (and SFB modules when train.sfb is set)");
  bool resume = false;
  c_train->add_flag("--resume", resume, "start from the checkpoint at paths.model");
  auto* c_gen = app.add_subcommand("generate", "decode images for one corpus prompt");
  std::string mode = "base";
  std::size_t prompt_id = 0;
  std::uint64_t seed = 0;
  bool no_retrieval = false;
  c_gen->add_option("--mode", mode, "base | ddm | sfb | ddm+sfb | masked")
      ->check(CLI::IsMember({"base", "ddm", "sfb", "ddm+sfb", "masked"}));
  c_gen->add_option("--prompt-id", prompt_id, "corpus image whose prompt is used");
  c_gen->add_option("--seed", seed, "sampling seed");
  c_gen->add_flag("--no-retrieval", no_retrieval, "masked mode without retrieval in the final half");
  auto* c_eval = app.add_subcommand("eval-retrieval", "per-rank retrieval distance report");
  auto* c_sweep = app.add_subcommand("sweep", "hyperparameter sweeps");
  bool sweep_ddm_flag = false, sweep_sfb_flag = false;
  auto* o_ddm = c_sweep->add_flag("--ddm", sweep_ddm_flag, "lambda x tau grid");
  auto* o_sfb = c_sweep->add_flag("--sfb", sweep_sfb_flag, "hop sets x blender counts");
  o_ddm->excludes(o_sfb);
  c_sweep->require_option(1);
  auto* c_bench = app.add_subcommand("bench", "decoding overhead of ddm and sfb relative to base");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", 2, e.what());
    return 2;
  }

  try {
    if (c_default->parsed()) {
      std::cout << to_json(RunConfig{}).dump(2) << '\n';
      return 0;
    }
    const RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (c_synth->parsed()) cmd_synth(cfg, threads);
    else if (c_cb->parsed()) cmd_build_codebook(cfg, threads);
    else if (c_db->parsed()) cmd_build_db(cfg, threads);
    else if (c_train->parsed()) cmd_train(cfg, threads, resume);
    else if (c_gen->parsed()) cmd_generate(cfg, threads, mode, prompt_id, seed, no_retrieval);
    else if (c_eval->parsed()) cmd_eval_retrieval(cfg, threads);
    else if (c_sweep->parsed()) sweep_ddm_flag ? cmd_sweep_ddm(cfg, threads) : cmd_sweep_sfb(cfg, threads);
    else if (c_bench->parsed()) cmd_bench(cfg, threads);
  } catch (const Error& e) {
    report_error(error_kind(e.code()), static_cast<int>(e.code()), e.what());
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    report_error("internal", 1, e.what());
    return 1;
  }
  return 0;
}
