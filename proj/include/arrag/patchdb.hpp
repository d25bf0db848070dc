#pragma once

// Patch retrieval database. Each record maps the concatenated features of a
// patch's neighbourhood (the key) to the patch's own feature vector (the
// value). Search is exact top-K under L2; a coarse-partition index is
// available as an accelerator and returns the same hits when every cell is
// probed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "arrag/codebook.hpp"
#include "arrag/common.hpp"

namespace arrag {

struct Offset {
  int dr = 0;
  int dc = 0;
  bool operator==(const Offset&) const = default;
};

/// Set of Chebyshev rings around the centre whose patches form the key.
class NeighborSpec {
 public:
  NeighborSpec() : NeighborSpec(std::vector<int>{1}) {}

  explicit NeighborSpec(std::vector<int> hops) : hops_(std::move(hops)) {
    require(!hops_.empty(), "neighbor spec: at least one hop level required");
    std::sort(hops_.begin(), hops_.end());
    hops_.erase(std::unique(hops_.begin(), hops_.end()), hops_.end());
    for (int h : hops_) require(h >= 1 && h <= 32, "neighbor spec: hop levels must be in [1, 32]");
    for (int h : hops_)
      for (int dr = -h; dr <= h; ++dr)
        for (int dc = -h; dc <= h; ++dc)
          if (std::max(std::abs(dr), std::abs(dc)) == h) offsets_.push_back({dr, dc});
  }

  static NeighborSpec from_bitmask(std::uint32_t mask) {
    std::vector<int> hops;
    for (int b = 0; b < 32; ++b)
      if (mask & (1u << b)) hops.push_back(b + 1);
    return NeighborSpec(std::move(hops));
  }

  const std::vector<int>& hops() const { return hops_; }
  const std::vector<Offset>& offsets() const { return offsets_; }
  std::size_t block_count() const { return offsets_.size(); }
  std::size_t key_dim(std::size_t d) const { return offsets_.size() * d; }
  std::uint32_t bitmask() const {
    std::uint32_t m = 0;
    for (int h : hops_) m |= 1u << (h - 1);
    return m;
  }
  /// "12" for hops {1,2}; used in report columns.
  std::string label() const {
    std::string s;
    for (int h : hops_) s += std::to_string(h);
    return s;
  }

  bool operator==(const NeighborSpec& o) const { return hops_ == o.hops_; }

 private:
  std::vector<int> hops_;
  std::vector<Offset> offsets_;
};

/// Writes the key for cell (i, j) into `out`. A block is the neighbour's
/// feature when the neighbour is inside the grid and available(r, c) holds,
/// otherwise zeros. Returns the per-block availability.
template <class Available>
std::vector<std::uint8_t> build_key_into(std::span<const float> features, std::size_t side, std::size_t d,
                                         std::size_t i, std::size_t j, const NeighborSpec& spec,
                                         Available&& available, std::span<float> out) {
  require(i < side && j < side, "build_key: position outside grid");
  require(out.size() == spec.key_dim(d), "build_key: output has wrong length");
  require(features.size() == side * side * d, "build_key: feature grid has wrong length");
  std::vector<std::uint8_t> active(spec.block_count(), 0);
  const auto& offs = spec.offsets();
  for (std::size_t b = 0; b < offs.size(); ++b) {
    const long r = static_cast<long>(i) + offs[b].dr;
    const long c = static_cast<long>(j) + offs[b].dc;
    float* dst = out.data() + b * d;
    const bool inside = r >= 0 && c >= 0 && r < static_cast<long>(side) && c < static_cast<long>(side);
    if (inside && available(static_cast<std::size_t>(r), static_cast<std::size_t>(c))) {
      const float* src = features.data() + (static_cast<std::size_t>(r) * side + static_cast<std::size_t>(c)) * d;
      std::copy(src, src + d, dst);
      active[b] = 1;
    } else {
      std::fill(dst, dst + d, 0.0f);
    }
  }
  return active;
}

inline bool always_available(std::size_t, std::size_t) { return true; }

template <class Available>
std::vector<float> build_key(const PatchGrid& grid, std::size_t i, std::size_t j, const NeighborSpec& spec,
                             Available&& available) {
  std::vector<float> key(spec.key_dim(grid.dim));
  build_key_into(grid.features, grid.side, grid.dim, i, j, spec, available, key);
  return key;
}

inline std::vector<float> build_key(const PatchGrid& grid, std::size_t i, std::size_t j, const NeighborSpec& spec) {
  return build_key(grid, i, j, spec, always_available);
}

struct Provenance {
  std::uint32_t image = 0;
  std::uint16_t row = 0;
  std::uint16_t col = 0;
  bool operator==(const Provenance&) const = default;
};
static_assert(sizeof(Provenance) == 8);

/// Struct-of-arrays record storage, append order preserved.
struct PatchDb {
  NeighborSpec spec;
  std::size_t d = 0;
  std::size_t key_dim = 0;
  std::uint64_t codebook_hash = 0;
  std::vector<float> keys;
  std::vector<float> values;
  std::vector<TokenId> tokens;
  std::vector<Provenance> provenance;
  std::vector<double> block_norms;  // derived: squared norm of every key block, not persisted

  std::size_t size() const { return tokens.size(); }
  std::span<const float> key(std::size_t r) const { return {keys.data() + r * key_dim, key_dim}; }
  std::span<const float> value(std::size_t r) const { return {values.data() + r * d, d}; }

  bool operator==(const PatchDb& o) const {
    return spec == o.spec && d == o.d && key_dim == o.key_dim && codebook_hash == o.codebook_hash && keys == o.keys &&
           values == o.values && tokens == o.tokens && provenance == o.provenance;
  }
};

/// Recomputes block norms for records [first, size). Needed after filling
/// record arrays by hand; build and load keep them current.
inline void refresh_block_norms(PatchDb& db, std::size_t first = 0) {
  const std::size_t blocks = db.d ? db.key_dim / db.d : 0;
  db.block_norms.resize(db.size() * blocks);
  for (std::size_t r = first; r < db.size(); ++r)
    for (std::size_t b = 0; b < blocks; ++b) {
      const float* k = db.keys.data() + r * db.key_dim + b * db.d;
      double s = 0.0;
      for (std::size_t t = 0; t < db.d; ++t) s += double(k[t]) * double(k[t]);
      db.block_norms[r * blocks + b] = s;
    }
}

inline PatchDb empty_db(const NeighborSpec& spec, std::size_t d, std::uint64_t codebook_hash) {
  PatchDb db;
  db.spec = spec;
  db.d = d;
  db.key_dim = spec.key_dim(d);
  db.codebook_hash = codebook_hash;
  return db;
}

/// Appends one record per cell of `grid`, in raster order. Tokens already
/// present on the grid (from `tokenize` with the same codebook) are reused.
inline void append_grid(PatchDb& db, const PatchGrid& grid, const Codebook& cb, std::uint32_t image_id) {
  require(grid.dim == db.d, "build_db: grid dimension " + std::to_string(grid.dim) +
                                " does not match database dimension " + std::to_string(db.d));
  require(cb.dim() == db.d && cb.hash() == db.codebook_hash, "build_db: codebook does not match database",
          ErrorCode::kHashMismatch);
  require(grid.side <= 65536, "build_db: grid side exceeds provenance range");
  const std::size_t base = db.size();
  const std::size_t n = grid.cells();
  db.keys.resize((base + n) * db.key_dim);
  db.values.resize((base + n) * db.d);
  db.tokens.resize(base + n);
  db.provenance.resize(base + n);
  for (std::size_t i = 0; i < grid.side; ++i)
    for (std::size_t j = 0; j < grid.side; ++j) {
      const std::size_t r = base + i * grid.side + j;
      build_key_into(grid.features, grid.side, grid.dim, i, j, db.spec, always_available,
                     std::span<float>(db.keys.data() + r * db.key_dim, db.key_dim));
      const auto v = grid.feature(i, j);
      std::copy(v.begin(), v.end(), db.values.begin() + static_cast<std::ptrdiff_t>(r * db.d));
      db.tokens[r] = grid.tokens.empty() ? quantize(v, cb) : grid.tokens[i * grid.side + j];
      db.provenance[r] = {image_id, static_cast<std::uint16_t>(i), static_cast<std::uint16_t>(j)};
    }
  refresh_block_norms(db, base);
}

/// One record per cell per grid; record order is corpus order x raster order.
/// Image ids are first_image_id + corpus index.
inline PatchDb build_db(std::span<const PatchGrid> corpus, const Codebook& cb, const NeighborSpec& spec,
                        std::uint32_t first_image_id = 0) {
  PatchDb db = empty_db(spec, cb.dim(), cb.hash());
  for (std::size_t g = 0; g < corpus.size(); ++g)
    append_grid(db, corpus[g], cb, first_image_id + static_cast<std::uint32_t>(g));
  return db;
}

inline void check_codebook(const PatchDb& db, const Codebook& cb) {
  if (db.codebook_hash != cb.hash() || db.d != cb.dim())
    throw Error(ErrorCode::kHashMismatch, "codebook hash mismatch: database was built with a different codebook");
}

// ---------------------------------------------------------------------------
// search

struct RetrievalHit {
  TokenId token = 0;
  std::vector<float> value;
  double distance = 0.0;  // Euclidean, not squared
  std::size_t record = 0;
};

enum class DistanceMode {
  kL2,        // plain L2 over the whole key
  kMaskedL2,  // only blocks flagged active in the query contribute
};

struct SearchOptions {
  DistanceMode mode = DistanceMode::kL2;
  std::vector<std::uint8_t> active_blocks;  // required for kMaskedL2
  std::optional<std::uint32_t> exclude_image;
};

namespace detail {

/// Squared L2 between a query and one key, accumulated in double. Blocks
/// flagged in `zero` (all-zero query blocks) contribute the record's stored
/// block norm and are summed first. Returns +inf as soon as the partial sum
/// exceeds `bound` (partial sums only grow, so an abandoned record could
/// never have entered the current top-K).
inline double key_distance(const float* q, const float* k, std::size_t key_dim, std::size_t d,
                           const std::uint8_t* active, double bound, const std::uint8_t* zero = nullptr,
                           const double* norms = nullptr) {
  double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
  const std::size_t blocks = key_dim / d;
  if (zero && norms) {
    for (std::size_t b = 0; b < blocks; ++b)
      if (zero[b] && (!active || active[b])) a0 += norms[b];
    if (a0 > bound) return std::numeric_limits<double>::infinity();
  }
  for (std::size_t b = 0; b < blocks; ++b) {
    if (active && !active[b]) continue;
    if (zero && norms && zero[b]) continue;
    const float* qb = q + b * d;
    const float* kb = k + b * d;
    std::size_t t = 0;
    for (; t + 4 <= d; t += 4) {
      const double e0 = double(qb[t]) - double(kb[t]);
      const double e1 = double(qb[t + 1]) - double(kb[t + 1]);
      const double e2 = double(qb[t + 2]) - double(kb[t + 2]);
      const double e3 = double(qb[t + 3]) - double(kb[t + 3]);
      a0 += e0 * e0;
      a1 += e1 * e1;
      a2 += e2 * e2;
      a3 += e3 * e3;
    }
    for (; t < d; ++t) {
      const double e = double(qb[t]) - double(kb[t]);
      a0 += e * e;
    }
    if ((a0 + a1) + (a2 + a3) > bound) return std::numeric_limits<double>::infinity();
  }
  return (a0 + a1) + (a2 + a3);
}

/// Bounded top-K ordered by (squared distance, record index).
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) { items_.reserve(k + 1); }

  double bound() const {
    return items_.size() < k_ ? std::numeric_limits<double>::infinity() : items_.back().first;
  }
  void offer(double d2, std::size_t record) {
    const std::pair<double, std::size_t> item{d2, record};
    if (items_.size() == k_ && !(item < items_.back())) return;
    items_.insert(std::upper_bound(items_.begin(), items_.end(), item), item);
    if (items_.size() > k_) items_.pop_back();
  }
  const std::vector<std::pair<double, std::size_t>>& items() const { return items_; }

 private:
  std::size_t k_;
  std::vector<std::pair<double, std::size_t>> items_;
};

inline void validate_query(const PatchDb& db, std::span<const float> query, std::size_t k, const SearchOptions& opt) {
  require(query.size() == db.key_dim, "search: query dimension " + std::to_string(query.size()) +
                                          " does not match key dimension " + std::to_string(db.key_dim));
  require(k >= 1, "search: K must be >= 1");
  if (opt.mode == DistanceMode::kMaskedL2)
    require(opt.active_blocks.size() == db.spec.block_count(), "search: masked-L2 needs one flag per key block");
}

inline std::vector<RetrievalHit> materialize(const PatchDb& db, const TopK& top) {
  std::vector<RetrievalHit> hits;
  hits.reserve(top.items().size());
  for (const auto& [d2, r] : top.items()) {
    const auto v = db.value(r);
    hits.push_back({db.tokens[r], std::vector<float>(v.begin(), v.end()), std::sqrt(d2), r});
  }
  return hits;
}

/// Flags all-zero query blocks, or returns empty when the db carries no norms.
inline std::vector<std::uint8_t> zero_blocks(const PatchDb& db, const float* q) {
  const std::size_t blocks = db.key_dim / db.d;
  if (db.block_norms.size() != db.size() * blocks) return {};
  std::vector<std::uint8_t> zero(blocks, 1);
  for (std::size_t t = 0; t < db.key_dim; ++t)
    if (q[t] != 0.0f) zero[t / db.d] = 0;
  return zero;
}

inline void scan_record(const PatchDb& db, const float* q, const std::uint8_t* active,
                        const std::vector<std::uint8_t>& zero, const SearchOptions& opt, std::size_t r, TopK& top) {
  if (opt.exclude_image && db.provenance[r].image == *opt.exclude_image) return;
  const bool fast = !zero.empty();
  const double d2 = key_distance(q, db.keys.data() + r * db.key_dim, db.key_dim, db.d, active, top.bound(),
                                 fast ? zero.data() : nullptr,
                                 fast ? db.block_norms.data() + r * (db.key_dim / db.d) : nullptr);
  if (d2 != std::numeric_limits<double>::infinity()) top.offer(d2, r);
}

}  // namespace detail

/// Exact top-K by L2 distance. Hits are ordered by (distance, record index).
inline std::vector<RetrievalHit> search(const PatchDb& db, std::span<const float> query, std::size_t k,
                                        const SearchOptions& opt = {}) {
  detail::validate_query(db, query, k, opt);
  const std::uint8_t* active = opt.mode == DistanceMode::kMaskedL2 ? opt.active_blocks.data() : nullptr;
  const auto zero = detail::zero_blocks(db, query.data());
  detail::TopK top(k);
  for (std::size_t r = 0; r < db.size(); ++r) detail::scan_record(db, query.data(), active, zero, opt, r, top);
  return detail::materialize(db, top);
}

/// Queries are laid out back to back; results come back in query order.
inline std::vector<std::vector<RetrievalHit>> search_batch(const PatchDb& db, std::span<const float> queries,
                                                           std::size_t k, std::size_t threads = 1,
                                                           const SearchOptions& opt = {}) {
  require(db.key_dim > 0 && queries.size() % db.key_dim == 0, "search_batch: query block is not a multiple of key dim");
  require(k >= 1, "search: K must be >= 1");
  const std::size_t nq = queries.size() / db.key_dim;
  std::vector<std::vector<RetrievalHit>> out(nq);
  parallel_for(nq, resolve_threads(threads),
               [&](std::size_t q) { out[q] = search(db, queries.subspan(q * db.key_dim, db.key_dim), k, opt); });
  return out;
}

/// Exact top-K with the same hits as `search`. The leading coordinates of
/// every key block are packed into one float plane per coordinate. A bound
/// from the first plane screens all records, the other planes tighten it for
/// the survivors, and the full kernel runs in ascending bound order until no
/// remaining bound can beat the current K-th distance. Plain L2 only.
class ScreenedIndex {
 public:
  ScreenedIndex() = default;

  explicit ScreenedIndex(const PatchDb& db, std::size_t coords = 3)
      : records_(db.size()), blocks_(db.d ? db.key_dim / db.d : 0), coords_(std::min(coords, db.d)) {
    require(coords >= 1, "screened index: need at least one coordinate per block");
    stride_ = (blocks_ + kLanes - 1) / kLanes * kLanes;
    planes_.assign(coords_, std::vector<float>(records_ * stride_, 0.0f));
    for (std::size_t c = 0; c < coords_; ++c)
      for (std::size_t r = 0; r < records_; ++r) gather(db.keys.data() + r * db.key_dim, db.d, c, planes_[c].data() + r * stride_);
  }

  std::size_t size() const { return records_; }

  std::vector<RetrievalHit> search(const PatchDb& db, std::span<const float> query, std::size_t k,
                                   const SearchOptions& opt = {}) const {
    detail::validate_query(db, query, k, opt);
    require(opt.mode == DistanceMode::kL2, "screened index: plain L2 only");
    require(db.size() == records_ && db.d && db.key_dim / db.d == blocks_, "screened index: built for a different database");
    std::vector<float> qs(coords_ * stride_, 0.0f);
    for (std::size_t c = 0; c < coords_; ++c) gather(query.data(), db.d, c, qs.data() + c * stride_);
    std::vector<float> lb(records_);
    for (std::size_t r = 0; r < records_; ++r) lb[r] = bound_of(qs.data(), planes_[0].data() + r * stride_);

    const auto zero = detail::zero_blocks(db, query.data());
    detail::TopK top(k);
    // Float rounding keeps each bound within 1e-5 of the exact partial sum.
    auto limit = [&] { return top.bound() * (1.0 + 1e-4); };
    using Entry = std::pair<float, std::uint32_t>;

    // Head: the records with the smallest first-plane bounds, scanned exactly.
    const std::size_t head = std::min(records_, std::max<std::size_t>(32, 4 * k));
    std::vector<Entry> heap;
    heap.reserve(head + 1);
    for (std::size_t r = 0; r < records_; ++r) {
      if (heap.size() == head && !(Entry{lb[r], r} < heap.front())) continue;
      heap.emplace_back(lb[r], static_cast<std::uint32_t>(r));
      std::push_heap(heap.begin(), heap.end());
      if (heap.size() > head) {
        std::pop_heap(heap.begin(), heap.end());
        heap.pop_back();
      }
    }
    std::sort(heap.begin(), heap.end());
    std::vector<std::uint8_t> seen(records_, 0);
    for (const auto& [bound, r] : heap) {
      seen[r] = 1;
      detail::scan_record(db, query.data(), nullptr, zero, opt, r, top);
    }

    std::vector<Entry> rest;
    const double cut = limit();
    for (std::size_t r = 0; r < records_; ++r) {
      if (seen[r] || lb[r] > cut) continue;
      float b = lb[r];
      for (std::size_t c = 1; c < coords_ && b <= cut; ++c) b += bound_of(qs.data() + c * stride_, planes_[c].data() + r * stride_);
      if (b <= cut) rest.emplace_back(b, static_cast<std::uint32_t>(r));
    }
    std::sort(rest.begin(), rest.end());
    for (const auto& [bound, r] : rest) {
      if (bound > limit()) break;
      detail::scan_record(db, query.data(), nullptr, zero, opt, r, top);
    }
    return detail::materialize(db, top);
  }

 private:
  static constexpr std::size_t kLanes = 8;

  void gather(const float* key, std::size_t d, std::size_t c, float* out) const {
    for (std::size_t b = 0; b < blocks_; ++b) out[b] = key[b * d + c];
  }

  float bound_of(const float* q, const float* x) const {
    float acc[kLanes] = {};
    for (std::size_t t = 0; t < stride_; t += kLanes)
      for (std::size_t l = 0; l < kLanes; ++l) {
        const float e = q[t + l] - x[t + l];
        acc[l] += e * e;
      }
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  }

  std::size_t records_ = 0, blocks_ = 0, coords_ = 0, stride_ = 0;
  std::vector<std::vector<float>> planes_;
};

/// Coarse k-means partition over keys. Probing every cell visits every
/// record exactly once with the same distance kernel, so the result is
/// identical to `search`.
class CoarseIndex {
 public:
  CoarseIndex() = default;

  CoarseIndex(const PatchDb& db, std::size_t cells, std::uint64_t seed, std::size_t train_sample = 20000,
              std::size_t iterations = 10)
      : key_dim_(db.key_dim) {
    require(cells >= 1, "coarse index: need at least one cell");
    require(db.size() >= cells, "coarse index: fewer records than cells");
    Rng rng(seed);
    std::vector<std::size_t> sample(db.size());
    std::iota(sample.begin(), sample.end(), 0);
    rng.shuffle(sample);
    sample.resize(std::min(train_sample, db.size()));
    std::sort(sample.begin(), sample.end());
    // Plain Lloyd on a sample with random distinct-record initialisation.
    centroids_.resize(cells * key_dim_);
    for (std::size_t c = 0; c < cells; ++c) {
      const auto k = db.key(sample[c * sample.size() / cells]);
      std::copy(k.begin(), k.end(), centroids_.begin() + static_cast<std::ptrdiff_t>(c * key_dim_));
    }
    std::vector<double> sums(cells * key_dim_);
    std::vector<std::size_t> counts(cells);
    for (std::size_t it = 0; it < iterations; ++it) {
      std::fill(sums.begin(), sums.end(), 0.0);
      std::fill(counts.begin(), counts.end(), 0);
      for (std::size_t s : sample) {
        const std::size_t c = nearest_cell(db.key(s).data());
        const auto k = db.key(s);
        for (std::size_t t = 0; t < key_dim_; ++t) sums[c * key_dim_ + t] += k[t];
        ++counts[c];
      }
      for (std::size_t c = 0; c < cells; ++c)
        if (counts[c] > 0)
          for (std::size_t t = 0; t < key_dim_; ++t)
            centroids_[c * key_dim_ + t] = static_cast<float>(sums[c * key_dim_ + t] / static_cast<double>(counts[c]));
    }
    lists_.assign(cells, {});
    for (std::size_t r = 0; r < db.size(); ++r) lists_[nearest_cell(db.key(r).data())].push_back(r);
  }

  std::size_t cells() const { return lists_.size(); }
  const std::vector<std::size_t>& list(std::size_t c) const { return lists_[c]; }

  std::vector<RetrievalHit> search(const PatchDb& db, std::span<const float> query, std::size_t k,
                                   std::size_t probes, const SearchOptions& opt = {}) const {
    detail::validate_query(db, query, k, opt);
    require(db.key_dim == key_dim_, "coarse index: built for a different key dimension");
    require(probes >= 1, "coarse index: probe count must be >= 1");
    const std::uint8_t* active = opt.mode == DistanceMode::kMaskedL2 ? opt.active_blocks.data() : nullptr;
    std::vector<std::pair<double, std::size_t>> order(cells());
    for (std::size_t c = 0; c < cells(); ++c)
      order[c] = {detail::key_distance(query.data(), centroids_.data() + c * key_dim_, key_dim_, db.d, active,
                                       std::numeric_limits<double>::infinity()),
                  c};
    std::sort(order.begin(), order.end());
    const auto zero = detail::zero_blocks(db, query.data());
    detail::TopK top(k);
    for (std::size_t p = 0; p < std::min(probes, cells()); ++p)
      for (std::size_t r : lists_[order[p].second]) detail::scan_record(db, query.data(), active, zero, opt, r, top);
    return detail::materialize(db, top);
  }

 private:
  std::size_t nearest_cell(const float* key) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cells_count(); ++c) {
      const double d = detail::key_distance(key, centroids_.data() + c * key_dim_, key_dim_, key_dim_, nullptr, best_d);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    return best;
  }
  std::size_t cells_count() const { return centroids_.size() / key_dim_; }

  std::size_t key_dim_ = 0;
  std::vector<float> centroids_;
  std::vector<std::vector<std::size_t>> lists_;
};

// ---------------------------------------------------------------------------
// persistence
//
// "ARRG", u32 version, u32 d, u32 key_dim, u32 hop bitmask, u64 codebook
// hash, u64 record count, then f32 keys, f32 values, u32 tokens and
// (u32, u16, u16) provenance. Every section starts on a 64-byte boundary.

inline constexpr std::uint32_t kDbVersion = 1;
inline constexpr std::size_t kDbAlign = 64;

inline void save_db(const PatchDb& db, const std::string& path) {
  BinaryWriter w(path);
  w.magic("ARRG");
  w.pod<std::uint32_t>(kDbVersion);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(db.d));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(db.key_dim));
  w.pod<std::uint32_t>(db.spec.bitmask());
  w.pod<std::uint64_t>(db.codebook_hash);
  w.pod<std::uint64_t>(db.size());
  w.pad_to(kDbAlign);
  w.array<float>(db.keys);
  w.pad_to(kDbAlign);
  w.array<float>(db.values);
  w.pad_to(kDbAlign);
  w.array<TokenId>(db.tokens);
  w.pad_to(kDbAlign);
  w.array<Provenance>(db.provenance);
  w.pad_to(kDbAlign);
  w.close();
}

inline PatchDb load_db(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("ARRG", "patch database");
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kDbVersion)
    throw Error(ErrorCode::kFormat, "unsupported patch database version " + std::to_string(version) + ": " + path);
  PatchDb db;
  db.d = r.pod<std::uint32_t>("dimension");
  db.key_dim = r.pod<std::uint32_t>("key dimension");
  const auto mask = r.pod<std::uint32_t>("hop-set bitmask");
  if (mask == 0) throw Error(ErrorCode::kFormat, "invalid hop-set bitmask 0: " + path);
  db.spec = NeighborSpec::from_bitmask(mask);
  if (db.d == 0 || db.key_dim != db.spec.key_dim(db.d))
    throw Error(ErrorCode::kFormat, "key dimension inconsistent with hop set and dimension: " + path);
  db.codebook_hash = r.pod<std::uint64_t>("codebook hash");
  const auto count = r.pod<std::uint64_t>("record count");
  if (count > r.remaining()) throw Error(ErrorCode::kFormat, "truncated record section: " + path);
  db.keys.resize(count * db.key_dim);
  db.values.resize(count * db.d);
  db.tokens.resize(count);
  db.provenance.resize(count);
  r.skip_to_alignment(kDbAlign, "record section");
  r.array<float>(db.keys, "record section");
  r.skip_to_alignment(kDbAlign, "record section");
  r.array<float>(db.values, "record section");
  r.skip_to_alignment(kDbAlign, "record section");
  r.array<TokenId>(db.tokens, "record section");
  r.skip_to_alignment(kDbAlign, "record section");
  r.array<Provenance>(db.provenance, "record section");
  refresh_block_norms(db);
  return db;
}

}  // namespace arrag
