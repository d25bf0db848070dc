#include <gtest/gtest.h>

#include <set>

#include "arrag/codebook.hpp"
#include "arrag/synth.hpp"
#include "test_util.hpp"

namespace arrag {
namespace {

TEST(Synth, CorpusIsPureInSpecAndSeed) {
  CorpusSpec spec;
  spec.count = 40;
  const auto a = generate_corpus(spec), b = generate_corpus(spec, 3);
  ASSERT_EQ(a.size(), 40u);
  bool differs = false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].image.rgb, b[k].image.rgb);
    EXPECT_EQ(a[k].prompt, b[k].prompt);
    EXPECT_EQ(a[k].id, k);
    const auto single = generate_item(spec, k);
    EXPECT_EQ(single.image.rgb, a[k].image.rgb);
    differs |= k > 0 && a[k].image.rgb != a[0].image.rgb;
  }
  EXPECT_TRUE(differs);
  spec.seed = 1;
  const auto c = generate_corpus(spec);
  std::size_t same = 0;
  for (std::size_t k = 0; k < a.size(); ++k) same += c[k].prompt == a[k].prompt ? 1 : 0;
  EXPECT_LT(same, a.size());
}

TEST(Synth, WrittenCorpusIsByteIdenticalAndReadable) {
  CorpusSpec spec;
  spec.count = 1;
  spec.families = {Family::kBicolorField};
  spec.seed = 17;
  testing::TempDir dir;
  write_corpus(generate_corpus(spec), dir.path() / "a");
  write_corpus(generate_corpus(spec), dir.path() / "b");
  for (const char* f : {"manifest.csv", "img_000000.ppm"})
    EXPECT_EQ(testing::read_file((dir.path() / "a" / f).string()), testing::read_file((dir.path() / "b" / f).string()));
  const auto back = read_corpus(dir.path() / "a");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].params.family, Family::kBicolorField);
  EXPECT_EQ(back[0].image.rgb, generate_item(spec, 0).image.rgb);
  EXPECT_THROW(read_corpus(dir.path() / "missing"), Error);
}

TEST(Synth, PromptsDecodeToTheirParameters) {
  Rng rng(3);
  std::set<std::vector<std::uint32_t>> prompts;
  std::set<std::tuple<int, int, int, int, int, int>> tuples;
  for (int t = 0; t < 2000; ++t) {
    const auto f = static_cast<Family>(rng.below(kFamilyCount));
    const auto pp = draw_params(f, 8, 4, rng);
    const auto prompt = encode_prompt(pp);
    ASSERT_EQ(prompt.size(), kPromptLength);
    for (auto tok : prompt) EXPECT_LT(tok, kTextVocab);
    EXPECT_EQ(decode_prompt(prompt), pp);
    prompts.insert(prompt);
    tuples.insert({static_cast<int>(pp.family), static_cast<int>(pp.color_a), static_cast<int>(pp.color_b),
                   static_cast<int>(pp.p[0]), static_cast<int>(pp.p[1]), static_cast<int>(pp.p[2])});
    EXPECT_EQ(parse_prompt_string(prompt_string(prompt)), prompt);
  }
  EXPECT_EQ(prompts.size(), tuples.size());
  EXPECT_THROW(decode_prompt(std::vector<std::uint32_t>{7, 8, 9, 32, 32, 32}), Error);
  EXPECT_THROW(decode_prompt(std::vector<std::uint32_t>{0, 8, 9, 32}), Error);
  EXPECT_THROW(parse_prompt_string("1 2 x"), Error);
  EXPECT_THROW(parse_prompt_string("1 64"), Error);
}

TEST(Synth, ImagesSatisfyEncoderPreconditions) {
  CorpusSpec spec;
  spec.count = 25;
  spec.side_px = 96;
  for (const auto& it : generate_corpus(spec)) {
    EXPECT_EQ(it.image.width, 96u);
    const auto g = encode_image(it.image, EncoderConfig{});
    EXPECT_EQ(g.side, 24u);
  }
}

TEST(Synth, StripesRepeatAlongTheStripeDirection) {
  CorpusSpec train;
  train.count = 200;
  const auto corpus = generate_corpus(train);
  const Projection proj(4, 16, 0);
  std::vector<float> feats;
  for (const auto& it : corpus) {
    const auto g = encode_image(it.image, proj);
    feats.insert(feats.end(), g.features.begin(), g.features.end());
  }
  const Codebook cb = train_codebook(feats, 16, 512, 0);
  CorpusSpec stripes = train;
  stripes.count = 30;
  stripes.seed = 5;
  stripes.families = {Family::kStripes};
  double duplicate = 0;
  for (const auto& it : generate_corpus(stripes)) {
    auto g = encode_image(it.image, proj);
    tokenize(g, cb);
    const std::set<TokenId> distinct(g.tokens.begin(), g.tokens.end());
    duplicate += 1.0 - static_cast<double>(distinct.size()) / static_cast<double>(g.cells());
  }
  EXPECT_GE(duplicate / 30.0, 0.5);
}

TEST(Synth, RejectsInvalidSpecs) {
  CorpusSpec spec;
  spec.side_px = 30;
  EXPECT_THROW(generate_corpus(spec), Error);
  spec = {};
  spec.families.clear();
  EXPECT_THROW(generate_corpus(spec), Error);
  spec = {};
  spec.palette_size = 17;
  EXPECT_THROW(generate_corpus(spec), Error);
  EXPECT_THROW(parse_family("plaid"), Error);
  EXPECT_EQ(parse_family("bicolor-field"), Family::kBicolorField);
}

}  // namespace
}  // namespace arrag
