#pragma once

// Vector-quantized patch vocabulary: k-means codebook, nearest-code
// quantization, and a toy patch encoder/decoder built on a fixed orthonormal
// projection of pixel blocks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "arrag/common.hpp"
#include "arrag/image.hpp"

namespace arrag {

using TokenId = std::uint32_t;

class Codebook {
 public:
  Codebook() = default;

  Codebook(std::size_t size, std::size_t dim, std::vector<float> vectors)
      : size_(size), dim_(dim), vectors_(std::move(vectors)) {
    require(size_ >= 2, "codebook needs at least 2 code vectors");
    require(dim_ >= 1, "codebook dimension must be >= 1");
    require(vectors_.size() == size_ * dim_, "codebook vector storage has wrong length");
    require(all_finite<float>(vectors_), "codebook contains non-finite values");
    hash_ = fnv1a_of<float>(vectors_);
  }

  std::size_t size() const { return size_; }
  std::size_t dim() const { return dim_; }
  std::uint64_t hash() const { return hash_; }
  std::span<const float> data() const { return vectors_; }
  std::span<const float> vector(TokenId id) const { return {vectors_.data() + std::size_t{id} * dim_, dim_}; }

  bool operator==(const Codebook& o) const {
    return size_ == o.size_ && dim_ == o.dim_ && vectors_ == o.vectors_;
  }

 private:
  std::size_t size_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> vectors_;
  std::uint64_t hash_ = 0;
};

namespace detail {

inline double squared_l2(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    acc += d * d;
  }
  return acc;
}

inline double squared_l2(std::span<const float> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a[k]) - b[k];
    acc += d * d;
  }
  return acc;
}

}  // namespace detail

/// Nearest code vector under squared L2; ties go to the smallest index.
inline TokenId quantize(std::span<const float> v, const Codebook& cb) {
  require(v.size() == cb.dim(), "quantize: dimension mismatch (got " + std::to_string(v.size()) +
                                    ", codebook has " + std::to_string(cb.dim()) + ")");
  require(all_finite(v), "quantize: non-finite input vector");
  TokenId best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t z = 0; z < cb.size(); ++z) {
    const double d = detail::squared_l2(v, cb.vector(static_cast<TokenId>(z)));
    if (d < best_d) {
      best_d = d;
      best = static_cast<TokenId>(z);
    }
  }
  return best;
}

inline std::span<const float> dequantize(TokenId id, const Codebook& cb) {
  require(id < cb.size(), "dequantize: token id " + std::to_string(id) + " out of range [0, " +
                              std::to_string(cb.size()) + ")");
  return cb.vector(id);
}

struct KMeansOptions {
  std::size_t max_iterations = 50;
  double tolerance = 1e-6;  // max centroid L2 movement
};

/// Seeded k-means++ / Lloyd. Duplicate inputs are collapsed into weighted
/// points before seeding, which leaves the objective unchanged.
inline Codebook train_codebook(std::span<const float> vectors, std::size_t dim, std::size_t size,
                               std::uint64_t seed, KMeansOptions opt = {}) {
  require(dim >= 1, "train_codebook: dim must be >= 1");
  require(size >= 2, "train_codebook: codebook size must be >= 2");
  require(vectors.size() % dim == 0, "train_codebook: input length is not a multiple of dim");
  require(all_finite(vectors), "train_codebook: non-finite input");
  const std::size_t n = vectors.size() / dim;
  auto row = [&](std::size_t i) { return vectors.subspan(i * dim, dim); };

  // Collapse exact duplicates, keeping first-occurrence order.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto bytes_less = [&](std::size_t a, std::size_t b) {
    const int c = std::memcmp(row(a).data(), row(b).data(), dim * sizeof(float));
    return c < 0 || (c == 0 && a < b);
  };
  std::sort(order.begin(), order.end(), bytes_less);
  std::vector<std::pair<std::size_t, double>> uniq;  // (first index, weight)
  for (std::size_t k = 0; k < n;) {
    std::size_t e = k + 1;
    while (e < n && std::memcmp(row(order[k]).data(), row(order[e]).data(), dim * sizeof(float)) == 0) ++e;
    uniq.emplace_back(order[k], static_cast<double>(e - k));
    k = e;
  }
  std::sort(uniq.begin(), uniq.end());
  if (uniq.size() < size)
    throw Error(ErrorCode::kInvalidArgument,
                "train_codebook: insufficient diversity (" + std::to_string(uniq.size()) +
                    " distinct vectors for codebook size " + std::to_string(size) + ")");

  const std::size_t u = uniq.size();
  Rng rng(seed);
  std::vector<double> centers;
  centers.reserve(size * dim);
  auto center = [&](std::size_t c) { return std::span<const double>(centers.data() + c * dim, dim); };
  auto push_center = [&](std::size_t point) {
    for (float x : row(uniq[point].first)) centers.push_back(x);
  };

  // k-means++ seeding, weighted by multiplicity.
  {
    double total = 0.0;
    for (auto& p : uniq) total += p.second;
    double r = rng.uniform() * total;
    std::size_t first = u - 1;
    for (std::size_t p = 0; p < u; ++p) {
      r -= uniq[p].second;
      if (r < 0.0) {
        first = p;
        break;
      }
    }
    push_center(first);
    std::vector<double> d2(u);
    for (std::size_t p = 0; p < u; ++p) d2[p] = detail::squared_l2(row(uniq[p].first), center(0));
    for (std::size_t c = 1; c < size; ++c) {
      double mass = 0.0;
      for (std::size_t p = 0; p < u; ++p) mass += d2[p] * uniq[p].second;
      double t = rng.uniform() * mass;
      std::size_t pick = u;
      for (std::size_t p = 0; p < u; ++p) {
        if (d2[p] <= 0.0) continue;
        t -= d2[p] * uniq[p].second;
        if (t < 0.0) {
          pick = p;
          break;
        }
      }
      if (pick == u)  // rounding left t >= 0; take the last point with mass
        for (std::size_t p = u; p-- > 0;)
          if (d2[p] > 0.0) {
            pick = p;
            break;
          }
      push_center(pick);
      for (std::size_t p = 0; p < u; ++p)
        d2[p] = std::min(d2[p], detail::squared_l2(row(uniq[p].first), center(c)));
    }
  }

  // Lloyd iterations.
  std::vector<std::size_t> assign(u, 0);
  std::vector<double> sums(size * dim), weights(size);
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    for (std::size_t p = 0; p < u; ++p) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < size; ++c) {
        const double d = detail::squared_l2(row(uniq[p].first), center(c));
        if (d < best) {
          best = d;
          assign[p] = c;
        }
      }
    }
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(weights.begin(), weights.end(), 0.0);
    for (std::size_t p = 0; p < u; ++p) {
      const auto x = row(uniq[p].first);
      const double w = uniq[p].second;
      for (std::size_t k = 0; k < dim; ++k) sums[assign[p] * dim + k] += w * static_cast<double>(x[k]);
      weights[assign[p]] += w;
    }
    double max_move = 0.0;
    for (std::size_t c = 0; c < size; ++c) {
      if (weights[c] == 0.0) continue;  // empty cluster keeps its centroid
      double move = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double nv = sums[c * dim + k] / weights[c];
        const double dv = nv - centers[c * dim + k];
        move += dv * dv;
        centers[c * dim + k] = nv;
      }
      max_move = std::max(max_move, std::sqrt(move));
    }
    if (max_move < opt.tolerance) break;
  }

  std::vector<float> out(centers.size());
  std::transform(centers.begin(), centers.end(), out.begin(), [](double x) { return static_cast<float>(x); });
  return Codebook(size, dim, std::move(out));
}

// ---------------------------------------------------------------------------
// persistence: "ARCB", u32 version, u32 |Z|, u32 d, |Z|*d f32, u64 FNV-1a

inline constexpr std::uint32_t kCodebookVersion = 1;

inline void save_codebook(const Codebook& cb, const std::string& path) {
  BinaryWriter w(path);
  w.magic("ARCB");
  w.pod<std::uint32_t>(kCodebookVersion);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(cb.size()));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(cb.dim()));
  w.array(cb.data());
  w.pod<std::uint64_t>(cb.hash());
  w.close();
}

inline Codebook load_codebook(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("ARCB", "codebook");
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kCodebookVersion)
    throw Error(ErrorCode::kFormat, "unsupported codebook version " + std::to_string(version) + ": " + path);
  const auto size = r.pod<std::uint32_t>("codebook size");
  const auto dim = r.pod<std::uint32_t>("codebook dimension");
  std::vector<float> v(std::size_t{size} * dim);
  r.array<float>(v, "code vector section");
  const auto stored = r.pod<std::uint64_t>("content hash");
  Codebook cb(size, dim, std::move(v));
  if (cb.hash() != stored) throw Error(ErrorCode::kFormat, "codebook content hash does not match data: " + path);
  return cb;
}

// ---------------------------------------------------------------------------
// toy patch encoder

/// Fixed orthonormal map from a flattened patch_px x patch_px x 3 block to
/// `dim` features. The first three rows are the per-channel constant
/// directions so flat colours survive the projection; the remaining rows are
/// seeded Gaussian directions orthonormalised against everything before them.
class Projection {
 public:
  Projection(std::size_t patch_px, std::size_t dim, std::uint64_t seed)
      : patch_px_(patch_px), dim_(dim), in_(patch_px * patch_px * 3), rows_(dim * in_, 0.0) {
    require(patch_px >= 1, "projection: patch_px must be >= 1");
    require(dim >= 1 && dim <= in_, "projection: dim must be in [1, 3*patch_px^2]");
    const std::size_t dc = std::min<std::size_t>(3, dim);
    const double inv = 1.0 / std::sqrt(static_cast<double>(patch_px * patch_px));
    for (std::size_t c = 0; c < dc; ++c)
      for (std::size_t p = 0; p < patch_px * patch_px; ++p) rows_[c * in_ + p * 3 + c] = inv;
    Rng rng(seed);
    std::vector<double> v(in_);
    for (std::size_t r = dc; r < dim; ++r) {
      for (;;) {
        for (auto& x : v) x = rng.normal();
        for (int pass = 0; pass < 2; ++pass)
          for (std::size_t q = 0; q < r; ++q) {
            double dot = 0.0;
            for (std::size_t k = 0; k < in_; ++k) dot += v[k] * rows_[q * in_ + k];
            for (std::size_t k = 0; k < in_; ++k) v[k] -= dot * rows_[q * in_ + k];
          }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-6) continue;
        for (std::size_t k = 0; k < in_; ++k) rows_[r * in_ + k] = v[k] / norm;
        break;
      }
    }
  }

  std::size_t patch_px() const { return patch_px_; }
  std::size_t dim() const { return dim_; }
  std::size_t input_dim() const { return in_; }
  std::span<const double> row(std::size_t r) const { return {rows_.data() + r * in_, in_}; }

  void forward(std::span<const double> block, std::span<float> out) const {
    for (std::size_t r = 0; r < dim_; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < in_; ++k) acc += rows_[r * in_ + k] * block[k];
      out[r] = static_cast<float>(acc);
    }
  }

  void transpose(std::span<const float> z, std::span<double> block) const {
    std::fill(block.begin(), block.end(), 0.0);
    for (std::size_t r = 0; r < dim_; ++r)
      for (std::size_t k = 0; k < in_; ++k) block[k] += rows_[r * in_ + k] * static_cast<double>(z[r]);
  }

 private:
  std::size_t patch_px_, dim_, in_;
  std::vector<double> rows_;
};

/// A side x side grid of patch features and (once quantized) token ids.
struct PatchGrid {
  std::size_t side = 0;
  std::size_t dim = 0;
  std::vector<float> features;  // side*side*dim, raster order
  std::vector<TokenId> tokens;  // empty until quantized

  std::size_t cells() const { return side * side; }
  std::span<const float> feature(std::size_t i, std::size_t j) const {
    return {features.data() + (i * side + j) * dim, dim};
  }
  std::span<float> feature(std::size_t i, std::size_t j) { return {features.data() + (i * side + j) * dim, dim}; }
};

struct EncoderConfig {
  std::size_t patch_px = 4;
  std::size_t dim = 16;
  std::uint64_t proj_seed = 0;
};

inline constexpr double kPixelCenter = 127.5;
inline constexpr double kPixelScale = 255.0;

inline PatchGrid encode_image(const Image& img, const Projection& proj) {
  const std::size_t px = proj.patch_px();
  require(img.width > 0 && img.width == img.height, "encode_image: image must be square and non-empty");
  require(img.width % px == 0, "encode_image: image side " + std::to_string(img.width) +
                                   " not divisible by patch size " + std::to_string(px));
  require(img.rgb.size() == img.width * img.height * 3, "encode_image: pixel buffer has wrong length");
  PatchGrid g;
  g.side = img.width / px;
  g.dim = proj.dim();
  g.features.resize(g.cells() * g.dim);
  std::vector<double> block(proj.input_dim());
  for (std::size_t i = 0; i < g.side; ++i)
    for (std::size_t j = 0; j < g.side; ++j) {
      std::size_t k = 0;
      for (std::size_t y = 0; y < px; ++y)
        for (std::size_t x = 0; x < px; ++x)
          for (std::size_t c = 0; c < 3; ++c)
            block[k++] = (static_cast<double>(img.at(i * px + y, j * px + x, c)) - kPixelCenter) / kPixelScale;
      proj.forward(block, g.feature(i, j));
    }
  return g;
}

inline PatchGrid encode_image(const Image& img, const EncoderConfig& cfg) {
  return encode_image(img, Projection(cfg.patch_px, cfg.dim, cfg.proj_seed));
}

/// Fills grid.tokens by quantizing every feature vector.
inline void tokenize(PatchGrid& grid, const Codebook& cb) {
  require(grid.dim == cb.dim(), "tokenize: grid dimension does not match codebook");
  grid.tokens.resize(grid.cells());
  for (std::size_t c = 0; c < grid.cells(); ++c)
    grid.tokens[c] = quantize({grid.features.data() + c * grid.dim, grid.dim}, cb);
}

/// Grid whose features are the code vectors of the given tokens.
inline PatchGrid grid_from_tokens(std::span<const TokenId> tokens, std::size_t side, const Codebook& cb) {
  require(side > 0 && tokens.size() == side * side, "grid_from_tokens: token count is not side^2");
  PatchGrid g;
  g.side = side;
  g.dim = cb.dim();
  g.features.resize(g.cells() * g.dim);
  g.tokens.assign(tokens.begin(), tokens.end());
  for (std::size_t c = 0; c < g.cells(); ++c) {
    const auto v = dequantize(tokens[c], cb);
    std::copy(v.begin(), v.end(), g.features.begin() + static_cast<std::ptrdiff_t>(c * g.dim));
  }
  return g;
}

inline Image decode_image(std::span<const TokenId> tokens, std::size_t side, const Codebook& cb,
                          const Projection& proj) {
  require(!tokens.empty() && side > 0, "decode_image: empty token grid");
  require(tokens.size() == side * side, "decode_image: token count is not side^2");
  require(cb.dim() == proj.dim(), "decode_image: codebook dimension does not match projection");
  const std::size_t px = proj.patch_px();
  Image img(side * px, side * px);
  std::vector<double> block(proj.input_dim());
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j) {
      proj.transpose(dequantize(tokens[i * side + j], cb), block);
      std::size_t k = 0;
      for (std::size_t y = 0; y < px; ++y)
        for (std::size_t x = 0; x < px; ++x)
          for (std::size_t c = 0; c < 3; ++c) {
            const double v = std::round(block[k++] * kPixelScale + kPixelCenter);
            img.at(i * px + y, j * px + x, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
          }
    }
  return img;
}

inline Image decode_image(std::span<const TokenId> tokens, std::size_t side, const Codebook& cb,
                          const EncoderConfig& cfg) {
  return decode_image(tokens, side, cb, Projection(cfg.patch_px, cfg.dim, cfg.proj_seed));
}

}  // namespace arrag
