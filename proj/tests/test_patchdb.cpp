#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "arrag/patchdb.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace arrag {
namespace {

using OracleHit = oracle::KnnHit;

void expect_same(const std::vector<RetrievalHit>& got, const std::vector<OracleHit>& want, const PatchDb& db) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t k = 0; k < got.size(); ++k) {
    EXPECT_EQ(got[k].record, want[k].record) << "rank " << k;
    EXPECT_EQ(got[k].token, db.tokens[want[k].record]);
    EXPECT_NEAR(got[k].distance, std::sqrt(static_cast<double>(want[k].d2)), 1e-6);
  }
}

PatchDb random_db(std::size_t n, std::size_t blocks, std::size_t d, std::uint64_t seed, std::size_t images = 10) {
  std::vector<int> hops = blocks == 8 ? std::vector<int>{1} : std::vector<int>{1, 2};
  PatchDb db = empty_db(NeighborSpec(hops), d, 0xabcdef);
  Rng rng(seed);
  db.keys.resize(n * db.key_dim);
  db.values.resize(n * d);
  db.tokens.resize(n);
  db.provenance.resize(n);
  for (auto& x : db.keys) x = static_cast<float>(rng.normal());
  for (auto& x : db.values) x = static_cast<float>(rng.normal());
  for (std::size_t r = 0; r < n; ++r) {
    db.tokens[r] = static_cast<TokenId>(rng.below(512));
    db.provenance[r] = {static_cast<std::uint32_t>(r % images), 0, 0};
  }
  refresh_block_norms(db);
  return db;
}

std::vector<float> random_query(std::size_t dim, Rng& rng) {
  std::vector<float> q(dim);
  for (auto& x : q) x = static_cast<float>(rng.normal());
  return q;
}

Codebook small_codebook(std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(64 * d);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Codebook(64, d, v);
}

PatchGrid random_grid(std::size_t side, std::size_t d, std::uint64_t seed) {
  PatchGrid g;
  g.side = side;
  g.dim = d;
  g.features.resize(side * side * d);
  Rng rng(seed);
  for (auto& x : g.features) x = static_cast<float>(rng.normal());
  return g;
}

TEST(NeighborSpec, RingOrderAndCounts) {
  const NeighborSpec one({1});
  ASSERT_EQ(one.block_count(), 8u);
  const std::vector<Offset> want = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}};
  EXPECT_EQ(one.offsets(), want);
  EXPECT_EQ(NeighborSpec({1, 2}).block_count(), 24u);
  EXPECT_EQ(NeighborSpec({2}).block_count(), 16u);
  EXPECT_EQ(NeighborSpec({1, 3}).block_count(), 8u + 24u);
  EXPECT_EQ(NeighborSpec({1, 2}).key_dim(16), 24u * 16u);
  EXPECT_EQ(NeighborSpec::from_bitmask(NeighborSpec({1, 2}).bitmask()), NeighborSpec({1, 2}));
  EXPECT_THROW(NeighborSpec(std::vector<int>{}), Error);
  EXPECT_THROW(NeighborSpec({0}), Error);
}

TEST(BuildKey, InteriorOrderMatchesRaster) {
  const auto g = random_grid(5, 3, 1);
  const auto key = build_key(g, 2, 2, NeighborSpec({1}));
  const int rows[] = {1, 1, 1, 2, 2, 3, 3, 3}, cols[] = {1, 2, 3, 1, 3, 1, 2, 3};
  for (int b = 0; b < 8; ++b)
    for (int t = 0; t < 3; ++t) EXPECT_EQ(key[b * 3 + t], g.feature(rows[b], cols[b])[t]);
  for (float x : key) EXPECT_NE(x, 0.0f);
}

TEST(BuildKey, CornerPadsWithZeros) {
  const auto g = random_grid(4, 2, 2);
  const auto key = build_key(g, 0, 0, NeighborSpec({1}));
  for (int b = 0; b < 8; ++b) {
    const bool inside = b == 4 || b == 6 || b == 7;
    for (int t = 0; t < 2; ++t) EXPECT_EQ(key[b * 2 + t] != 0.0f, inside) << "block " << b;
  }
}

TEST(BuildKey, CausalMaskZeroesUngenerated) {
  const auto g = random_grid(6, 2, 3);
  const std::size_t n = 2 * 6 + 3;
  std::vector<float> key(NeighborSpec({1, 2}).key_dim(2));
  const auto active = build_key_into(g.features, 6, 2, 2, 3, NeighborSpec({1, 2}),
                                     [&](std::size_t r, std::size_t c) { return r * 6 + c < n; }, key);
  const NeighborSpec spec({1, 2});
  const auto& offs = spec.offsets();
  for (std::size_t b = 0; b < offs.size(); ++b) {
    const long r = 2 + offs[b].dr, c = 3 + offs[b].dc;
    const bool avail = r >= 0 && c >= 0 && r < 6 && c < 6 && static_cast<std::size_t>(r * 6 + c) < n;
    EXPECT_EQ(active[b] != 0, avail) << "block " << b << " r " << r << " c " << c;
    for (int t = 0; t < 2; ++t)
      EXPECT_EQ(key[b * 2 + t], avail ? g.feature(static_cast<std::size_t>(r), static_cast<std::size_t>(c))[t] : 0.0f);
  }
  EXPECT_THROW(build_key(g, 6, 0, NeighborSpec({1})), Error);
}

TEST(BuildDb, RecordLayoutAndOrder) {
  const auto cb = small_codebook(3, 4);
  auto g = random_grid(4, 3, 5);
  const std::vector<PatchGrid> corpus = {g, g};
  const auto db = build_db(corpus, cb, NeighborSpec({1}));
  ASSERT_EQ(db.size(), 32u);
  for (std::size_t r = 0; r < 16; ++r) {
    EXPECT_TRUE(std::equal(db.key(r).begin(), db.key(r).end(), db.key(r + 16).begin()));
    EXPECT_EQ(db.tokens[r], db.tokens[r + 16]);
    EXPECT_EQ(db.provenance[r].image, 0u);
    EXPECT_EQ(db.provenance[r + 16].image, 1u);
    EXPECT_EQ(db.provenance[r].row, r / 4);
    EXPECT_EQ(db.provenance[r].col, r % 4);
    EXPECT_EQ(db.tokens[r], quantize(db.value(r), cb));
    const auto key = build_key(g, r / 4, r % 4, NeighborSpec({1}));
    EXPECT_TRUE(std::equal(key.begin(), key.end(), db.key(r).begin()));
  }
}

TEST(BuildDb, FullSizeGridGives576Records) {
  const auto cb = small_codebook(4, 6);
  const std::vector<PatchGrid> corpus = {random_grid(24, 4, 7)};
  EXPECT_EQ(build_db(corpus, cb, NeighborSpec({1, 2})).size(), 576u);
}

TEST(BuildDb, EmptyCorpusIsSearchable) {
  const auto cb = small_codebook(4, 6);
  const auto db = build_db(std::span<const PatchGrid>(), cb, NeighborSpec({1}));
  EXPECT_EQ(db.size(), 0u);
  const std::vector<float> q(db.key_dim, 0.0f);
  EXPECT_TRUE(search(db, q, 5).empty());
}

TEST(BuildDb, RejectsDimensionMismatch) {
  const auto cb = small_codebook(4, 6);
  const std::vector<PatchGrid> corpus = {random_grid(4, 3, 7)};
  EXPECT_THROW(build_db(corpus, cb, NeighborSpec({1})), Error);
}

TEST(Search, MatchesBruteForce) {
  const auto db = random_db(3000, 8, 16, 1);
  Rng rng(2);
  for (int t = 0; t < 30; ++t) {
    const auto q = random_query(db.key_dim, rng);
    expect_same(search(db, q, 10), oracle::brute_force_knn(db, q, 10), db);
  }
}

TEST(Search, CausalQueriesMatchBruteForceInBothModes) {
  const auto db = random_db(2000, 24, 4, 3);
  Rng rng(4);
  for (int t = 0; t < 30; ++t) {
    auto q = random_query(db.key_dim, rng);
    SearchOptions masked;
    masked.mode = DistanceMode::kMaskedL2;
    masked.active_blocks.assign(24, 1);
    for (std::size_t b = 0; b < 24; ++b)
      if (rng.below(2)) {
        std::fill(q.begin() + static_cast<std::ptrdiff_t>(b * 4), q.begin() + static_cast<std::ptrdiff_t>(b * 4 + 4), 0.0f);
        masked.active_blocks[b] = 0;
      }
    expect_same(search(db, q, 7), oracle::brute_force_knn(db, q, 7), db);
    expect_same(search(db, q, 7, masked), oracle::brute_force_knn(db, q, 7, masked), db);
  }
}

TEST(Search, NormShortcutDoesNotChangeResults) {
  auto db = random_db(1500, 24, 4, 5);
  auto plain = db;
  plain.block_norms.clear();
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    auto q = random_query(db.key_dim, rng);
    std::fill(q.begin() + 40, q.end(), 0.0f);
    const auto a = search(db, q, 10), b = search(plain, q, 10);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      EXPECT_EQ(a[k].record, b[k].record);
      EXPECT_NEAR(a[k].distance, b[k].distance, 1e-9);
    }
  }
}

TEST(Search, ExactMatchIsFirstWithZeroDistance) {
  const auto db = random_db(500, 8, 4, 7);
  const auto q = std::vector<float>(db.key(123).begin(), db.key(123).end());
  const auto hits = search(db, q, 3);
  EXPECT_EQ(hits[0].record, 123u);
  EXPECT_EQ(hits[0].distance, 0.0);
  const auto v = db.value(123);
  EXPECT_EQ(hits[0].value, std::vector<float>(v.begin(), v.end()));
}

TEST(Search, ClampsToRecordCountAndOrdersTies) {
  PatchDb db = empty_db(NeighborSpec({1}), 1, 0);
  for (int r = 0; r < 3; ++r) {
    db.keys.insert(db.keys.end(), 8, r == 1 ? 2.0f : 1.0f);
    db.values.push_back(static_cast<float>(r));
    db.tokens.push_back(static_cast<TokenId>(r));
    db.provenance.push_back({0, 0, 0});
  }
  refresh_block_norms(db);
  const std::vector<float> q(8, 0.0f);
  const auto hits = search(db, q, 10);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].record, 0u);
  EXPECT_EQ(hits[1].record, 2u);
  EXPECT_EQ(hits[2].record, 1u);
  for (std::size_t k = 1; k < hits.size(); ++k) EXPECT_LE(hits[k - 1].distance, hits[k].distance);
}

TEST(Search, ExcludesImage) {
  const auto db = random_db(1000, 8, 4, 8, 5);
  Rng rng(9);
  SearchOptions opt;
  opt.exclude_image = 3;
  for (int t = 0; t < 10; ++t) {
    const auto q = random_query(db.key_dim, rng);
    const auto hits = search(db, q, 10, opt);
    expect_same(hits, oracle::brute_force_knn(db, q, 10, opt), db);
    for (const auto& h : hits) EXPECT_NE(db.provenance[h.record].image, 3u);
  }
}

TEST(Search, RejectsBadArguments) {
  const auto db = random_db(10, 8, 4, 1);
  const std::vector<float> q(db.key_dim, 0.0f), short_q(3, 0.0f);
  EXPECT_THROW(search(db, short_q, 1), Error);
  EXPECT_THROW(search(db, q, 0), Error);
  SearchOptions masked;
  masked.mode = DistanceMode::kMaskedL2;
  EXPECT_THROW(search(db, q, 1, masked), Error);
}

TEST(Search, GlobalOptimality) {
  const auto db = random_db(2000, 8, 8, 10);
  Rng rng(11);
  for (int t = 0; t < 10; ++t) {
    const auto q = random_query(db.key_dim, rng);
    const auto hits = search(db, q, 1);
    for (std::size_t r = 0; r < db.size(); ++r)
      ASSERT_LE(hits[0].distance * hits[0].distance, detail::squared_l2(q, db.key(r)) + 1e-9);
  }
}

TEST(SearchBatch, EqualsSequentialSearches) {
  const auto db = random_db(800, 8, 4, 12);
  Rng rng(13);
  std::vector<float> qs;
  for (int t = 0; t < 576; ++t) {
    const auto q = random_query(db.key_dim, rng);
    qs.insert(qs.end(), q.begin(), q.end());
  }
  const auto batch = search_batch(db, qs, 5, 3);
  ASSERT_EQ(batch.size(), 576u);
  for (std::size_t t = 0; t < 576; ++t) {
    const auto one = search(db, std::span<const float>(qs).subspan(t * db.key_dim, db.key_dim), 5);
    ASSERT_EQ(one.size(), batch[t].size());
    for (std::size_t k = 0; k < one.size(); ++k) {
      EXPECT_EQ(one[k].record, batch[t][k].record);
      EXPECT_EQ(one[k].distance, batch[t][k].distance);
    }
  }
  // Reversing the queries reverses the results.
  std::vector<float> rev;
  for (std::size_t t = 576; t-- > 0;) rev.insert(rev.end(), qs.begin() + static_cast<std::ptrdiff_t>(t * db.key_dim),
                                                 qs.begin() + static_cast<std::ptrdiff_t>((t + 1) * db.key_dim));
  const auto back = search_batch(db, rev, 5, 2);
  for (std::size_t t = 0; t < 576; ++t) EXPECT_EQ(back[575 - t][0].record, batch[t][0].record);
}

TEST(CoarseIndex, AllProbesEqualsExactSearch) {
  const auto db = random_db(3000, 8, 8, 14);
  const CoarseIndex index(db, 16, 1);
  std::size_t listed = 0;
  for (std::size_t c = 0; c < index.cells(); ++c) listed += index.list(c).size();
  EXPECT_EQ(listed, db.size());
  Rng rng(15);
  for (int t = 0; t < 20; ++t) {
    const auto q = random_query(db.key_dim, rng);
    const auto a = index.search(db, q, 10, index.cells());
    const auto b = search(db, q, 10);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      EXPECT_EQ(a[k].record, b[k].record);
      EXPECT_EQ(a[k].distance, b[k].distance);
    }
    EXPECT_LE(index.search(db, q, 10, 2).size(), 10u);
  }
}

void expect_identical(const std::vector<RetrievalHit>& a, const std::vector<RetrievalHit>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].record, b[k].record) << "rank " << k;
    EXPECT_EQ(a[k].distance, b[k].distance) << "rank " << k;
  }
}

TEST(ScreenedIndex, EqualsExactSearch) {
  const auto db = random_db(3000, 24, 8, 16, 7);
  const ScreenedIndex index(db);
  EXPECT_EQ(index.size(), db.size());
  Rng rng(17);
  for (int t = 0; t < 30; ++t) {
    auto q = random_query(db.key_dim, rng);
    if (t % 3 == 1) std::copy(db.key(t * 91).begin(), db.key(t * 91).end(), q.begin());
    if (t % 3 == 2) std::fill(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(5 * db.d), 0.0f);
    expect_identical(index.search(db, q, 10), search(db, q, 10));
    SearchOptions opt;
    opt.exclude_image = static_cast<std::uint32_t>(t % 7);
    expect_identical(index.search(db, q, 10, opt), search(db, q, 10, opt));
    expect_same(index.search(db, q, 3, opt), oracle::brute_force_knn(db, q, 3, opt), db);
  }
}

TEST(ScreenedIndex, DuplicateKeysKeepRecordOrder) {
  PatchDb db = random_db(400, 8, 4, 18);
  for (std::size_t r = 0; r < db.size(); ++r)
    std::copy_n(db.keys.begin() + static_cast<std::ptrdiff_t>((r % 5) * db.key_dim), db.key_dim,
                db.keys.begin() + static_cast<std::ptrdiff_t>(r * db.key_dim));
  refresh_block_norms(db);
  const ScreenedIndex index(db, 1);
  const std::vector<float> q(db.key(2).begin(), db.key(2).end());
  const auto hits = index.search(db, q, 50);
  expect_identical(hits, search(db, q, 50));
  for (std::size_t k = 0; k < hits.size(); ++k) EXPECT_EQ(hits[k].record, 2 + 5 * k);
}

TEST(ScreenedIndex, RejectsMaskedModeAndForeignDatabase) {
  const auto db = random_db(100, 8, 4, 19);
  const ScreenedIndex index(db);
  const std::vector<float> q(db.key_dim, 0.5f);
  SearchOptions masked;
  masked.mode = DistanceMode::kMaskedL2;
  EXPECT_THROW(index.search(db, q, 1, masked), Error);
  EXPECT_THROW(index.search(random_db(101, 8, 4, 19), q, 1), Error);
  EXPECT_THROW(ScreenedIndex(db, 0), Error);
}

TEST(DbFile, RoundTripIsBitExactAndSearchable) {
  const auto cb = small_codebook(4, 16);
  std::vector<PatchGrid> corpus = {random_grid(6, 4, 17), random_grid(6, 4, 18)};
  const auto db = build_db(corpus, cb, NeighborSpec({1, 2}), 7);
  testing::TempDir dir;
  const auto path = dir.file("db.arrg");
  save_db(db, path);
  EXPECT_EQ(std::filesystem::file_size(path) % 64, 0u);
  const auto back = load_db(path);
  EXPECT_EQ(back, db);
  EXPECT_EQ(back.block_norms, db.block_norms);
  const auto key = build_key(corpus[1], 3, 2, db.spec);
  const auto a = search(db, key, 10), b = search(back, key, 10);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].record, b[k].record);
    EXPECT_EQ(a[k].distance, b[k].distance);
  }
  EXPECT_NO_THROW(check_codebook(back, cb));
  const auto other = small_codebook(4, 99);
  try {
    check_codebook(back, other);
    FAIL() << "expected a hash mismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kHashMismatch);
  }
}

TEST(DbFile, TruncationAndBadMagic) {
  const auto cb = small_codebook(4, 16);
  std::vector<PatchGrid> corpus = {random_grid(6, 4, 19)};
  const auto db = build_db(corpus, cb, NeighborSpec({1}));
  testing::TempDir dir;
  const auto path = dir.file("db.arrg");
  save_db(db, path);
  const auto bytes = testing::read_file(path);
  testing::write_file(path, bytes.substr(0, bytes.size() / 2));
  try {
    load_db(path);
    FAIL() << "expected truncation error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("truncated record section"), std::string::npos) << e.what();
    EXPECT_EQ(e.code(), ErrorCode::kFormat);
  }
  testing::write_file(path, "ARRX" + bytes.substr(4));
  EXPECT_THROW(load_db(path), Error);
  EXPECT_THROW(load_db(dir.file("missing.arrg")), Error);
}

}  // namespace
}  // namespace arrag
