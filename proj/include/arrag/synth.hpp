#pragma once

// Deterministic synthetic corpus: flat-colour pattern images whose prompts
// encode (family, two palette colours, three coarse parameters) in a fixed
// six-token template.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "arrag/common.hpp"
#include "arrag/image.hpp"

namespace arrag {

enum class Family : std::uint32_t { kStripes = 0, kChecker = 1, kDisk = 2, kGradient = 3, kBicolorField = 4 };

inline constexpr std::size_t kFamilyCount = 5;

inline std::string to_string(Family f) {
  static const std::array<const char*, kFamilyCount> names = {"stripes", "checker", "disk", "gradient",
                                                              "bicolor-field"};
  return names.at(static_cast<std::size_t>(f));
}

inline Family parse_family(const std::string& s) {
  for (std::size_t k = 0; k < kFamilyCount; ++k)
    if (to_string(static_cast<Family>(k)) == s) return static_cast<Family>(k);
  throw Error(ErrorCode::kInvalidArgument, "unknown pattern family '" + s + "'");
}

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr std::size_t kMaxPalette = 16;

inline const std::array<Rgb, kMaxPalette>& base_palette() {
  static const std::array<Rgb, kMaxPalette> p = {{
      {230, 25, 75},   {60, 180, 75},   {255, 225, 25},  {0, 130, 200},  {245, 130, 48},  {145, 30, 180},
      {70, 240, 240},  {240, 50, 230},  {210, 245, 60},  {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
      {170, 110, 40},  {255, 250, 200}, {128, 0, 0},     {0, 0, 128},
  }};
  return p;
}

struct CorpusSpec {
  std::size_t count = 100;
  std::size_t side_px = 32;
  std::size_t patch_px = 4;
  std::vector<Family> families = {Family::kStripes, Family::kChecker, Family::kDisk, Family::kGradient,
                                  Family::kBicolorField};
  std::size_t palette_size = 8;
  std::uint64_t seed = 0;

  void validate() const {
    require(count >= 1, "synth: count must be >= 1");
    require(patch_px >= 1 && side_px % patch_px == 0, "synth: image side must be divisible by the patch size");
    require(side_px / patch_px >= 2, "synth: image must span at least 2x2 patches");
    require(!families.empty(), "synth: at least one pattern family is required");
    require(palette_size >= 2 && palette_size <= kMaxPalette, "synth: palette size must be in [2, 16]");
  }
};

/// Parameter tuple fully determining one image.
struct PatternParams {
  Family family = Family::kStripes;
  std::uint32_t color_a = 0, color_b = 1;
  std::array<std::uint32_t, 3> p{};

  bool operator==(const PatternParams&) const = default;
};

// Prompt template: [family, color_a, color_b, p0, p1, p2] with disjoint
// token ranges inside a 64-token vocabulary.
inline constexpr std::size_t kPromptLength = 6;
inline constexpr std::uint32_t kFamilyTokenBase = 0;
inline constexpr std::uint32_t kColorTokenBase = 8;
inline constexpr std::uint32_t kParamTokenBase = 32;
inline constexpr std::uint32_t kParamLimit = 32;
inline constexpr std::size_t kTextVocab = 64;

inline std::vector<std::uint32_t> encode_prompt(const PatternParams& pp) {
  require(pp.color_a < kMaxPalette && pp.color_b < kMaxPalette, "prompt: colour index out of range");
  std::vector<std::uint32_t> t = {kFamilyTokenBase + static_cast<std::uint32_t>(pp.family),
                                  kColorTokenBase + pp.color_a, kColorTokenBase + pp.color_b};
  for (auto v : pp.p) {
    require(v < kParamLimit, "prompt: parameter out of range");
    t.push_back(kParamTokenBase + v);
  }
  return t;
}

inline PatternParams decode_prompt(std::span<const std::uint32_t> t) {
  require(t.size() == kPromptLength, "prompt: expected 6 tokens");
  require(t[0] >= kFamilyTokenBase && t[0] < kFamilyTokenBase + kFamilyCount, "prompt: bad family token");
  PatternParams pp;
  pp.family = static_cast<Family>(t[0] - kFamilyTokenBase);
  for (std::size_t k = 1; k <= 2; ++k)
    require(t[k] >= kColorTokenBase && t[k] < kColorTokenBase + kMaxPalette, "prompt: bad colour token");
  pp.color_a = t[1] - kColorTokenBase;
  pp.color_b = t[2] - kColorTokenBase;
  for (std::size_t k = 0; k < 3; ++k) {
    require(t[3 + k] >= kParamTokenBase && t[3 + k] < kParamTokenBase + kParamLimit, "prompt: bad parameter token");
    pp.p[k] = t[3 + k] - kParamTokenBase;
  }
  return pp;
}

/// Draws a parameter tuple. Parameter meanings per family:
///   stripes        orientation {0 vertical, 1 horizontal, 2 diagonal}, width in patches - 1, phase in px
///   checker        cell size in patches - 1, row phase, column phase (in patches)
///   disk           centre column, centre row (eighths), radius step
///   gradient       direction {0 horizontal, 1 vertical, 2 diagonal}, band count - 2, reversed
///   bicolor-field  split {0 vertical, 1 horizontal, 2 diagonal, 3 anti-diagonal}, position (eighths), border width
inline PatternParams draw_params(Family f, std::size_t palette_size, std::size_t patch_px, Rng& rng) {
  PatternParams pp;
  pp.family = f;
  pp.color_a = static_cast<std::uint32_t>(rng.below(palette_size));
  pp.color_b = static_cast<std::uint32_t>(rng.below(palette_size - 1));
  if (pp.color_b >= pp.color_a) ++pp.color_b;
  auto u = [&](std::size_t n) { return static_cast<std::uint32_t>(rng.below(n)); };
  switch (f) {
    case Family::kStripes: pp.p = {u(3), u(3), u(std::min<std::size_t>(patch_px, kParamLimit))}; break;
    case Family::kChecker: pp.p = {u(3), u(2), u(2)}; break;
    case Family::kDisk: pp.p = {2 + u(5), 2 + u(5), u(4)}; break;
    case Family::kGradient: pp.p = {u(3), u(5), u(2)}; break;
    case Family::kBicolorField: pp.p = {u(4), 2 + u(5), u(3)}; break;
  }
  return pp;
}

inline Image render(const PatternParams& pp, std::size_t side_px, std::size_t patch_px, std::size_t palette_size) {
  require(pp.color_a < palette_size && pp.color_b < palette_size, "render: colour outside palette");
  const Rgb a = base_palette()[pp.color_a], b = base_palette()[pp.color_b];
  Image img(side_px, side_px);
  const double s = static_cast<double>(side_px);
  auto put = [&](std::size_t y, std::size_t x, const Rgb& c) {
    for (std::size_t ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
  };
  auto mix = [](const Rgb& x, const Rgb& y, double t) {
    Rgb o{};
    for (std::size_t ch = 0; ch < 3; ++ch)
      o[ch] = static_cast<std::uint8_t>(std::lround((1.0 - t) * x[ch] + t * y[ch]));
    return o;
  };
  for (std::size_t y = 0; y < side_px; ++y)
    for (std::size_t x = 0; x < side_px; ++x) {
      const auto [p0, p1, p2] = pp.p;
      switch (pp.family) {
        case Family::kStripes: {
          const std::size_t w = (p1 + 1) * patch_px;
          const std::size_t coord = p0 == 0 ? x : p0 == 1 ? y : x + y;
          put(y, x, ((coord + p2) / w) % 2 == 0 ? a : b);
          break;
        }
        case Family::kChecker: {
          const std::size_t w = (p0 + 1) * patch_px;
          const std::size_t r = y / w + p1, c = x / w + p2;
          put(y, x, (r + c) % 2 == 0 ? a : b);
          break;
        }
        case Family::kDisk: {
          const double cx = s * p0 / 8.0, cy = s * p1 / 8.0, rad = s * (2.0 + p2) / 16.0;
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          put(y, x, dx * dx + dy * dy <= rad * rad ? b : a);
          break;
        }
        case Family::kGradient: {
          const std::size_t bands = p1 + 2;
          const double t = p0 == 0 ? (x + 0.5) / s : p0 == 1 ? (y + 0.5) / s : (x + y + 1.0) / (2.0 * s);
          std::size_t band = std::min(bands - 1, static_cast<std::size_t>(t * bands));
          if (p2) band = bands - 1 - band;
          put(y, x, mix(a, b, static_cast<double>(band) / static_cast<double>(bands - 1)));
          break;
        }
        case Family::kBicolorField: {
          const double pos = s * p1 / 8.0, border = static_cast<double>(p2 * patch_px) / 2.0;
          const double v = p0 == 0 ? x + 0.5 - pos
                           : p0 == 1 ? y + 0.5 - pos
                           : p0 == 2 ? (x + 0.5) + (y + 0.5) - 2.0 * pos
                                     : (x + 0.5) - (y + 0.5) + 2.0 * pos - s;
          if (std::abs(v) < border)
            put(y, x, mix(a, b, 0.5));
          else
            put(y, x, v < 0 ? a : b);
          break;
        }
      }
    }
  return img;
}

struct CorpusItem {
  std::uint32_t id = 0;
  PatternParams params;
  std::vector<std::uint32_t> prompt;
  Image image;
};

/// Item `index` of the corpus; depends only on (spec, index).
inline CorpusItem generate_item(const CorpusSpec& spec, std::size_t index) {
  Rng rng(derive_seed(spec.seed, index));
  CorpusItem it;
  it.id = static_cast<std::uint32_t>(index);
  const Family f = spec.families[rng.below(spec.families.size())];
  it.params = draw_params(f, spec.palette_size, spec.patch_px, rng);
  it.prompt = encode_prompt(it.params);
  it.image = render(it.params, spec.side_px, spec.patch_px, spec.palette_size);
  return it;
}

inline std::vector<CorpusItem> generate_corpus(const CorpusSpec& spec, std::size_t threads = 1) {
  spec.validate();
  std::vector<CorpusItem> out(spec.count);
  parallel_for(spec.count, resolve_threads(threads), [&](std::size_t k) { out[k] = generate_item(spec, k); });
  return out;
}

inline std::string prompt_string(std::span<const std::uint32_t> prompt) {
  std::ostringstream os;
  for (std::size_t k = 0; k < prompt.size(); ++k) os << (k ? " " : "") << prompt[k];
  return os.str();
}

inline std::vector<std::uint32_t> parse_prompt_string(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::uint32_t> out;
  long long v = 0;
  while (is >> v) {
    require(v >= 0 && v < static_cast<long long>(kTextVocab), "prompt: token out of range");
    out.push_back(static_cast<std::uint32_t>(v));
  }
  require(is.eof(), "prompt: unparseable token list");
  return out;
}

inline std::string image_file_name(std::uint32_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%06u.ppm", id);
  return buf;
}

inline constexpr const char* kManifestHeader = "image_id,file,family,color_a,color_b,p0,p1,p2,prompt";

/// Writes PPM files and manifest.csv into `dir`.
inline void write_corpus(const std::vector<CorpusItem>& items, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.csv", std::ios::binary);
  if (!man) throw Error(ErrorCode::kIo, "cannot write " + (dir / "manifest.csv").string());
  man << kManifestHeader << '\n';
  for (const auto& it : items) {
    const std::string file = image_file_name(it.id);
    write_ppm((dir / file).string(), it.image);
    man << it.id << ',' << file << ',' << to_string(it.params.family) << ',' << it.params.color_a << ','
        << it.params.color_b << ',' << it.params.p[0] << ',' << it.params.p[1] << ',' << it.params.p[2] << ','
        << prompt_string(it.prompt) << '\n';
  }
  if (!man) throw Error(ErrorCode::kIo, "failed writing manifest in " + dir.string());
}

/// Reads a corpus written by write_corpus.
inline std::vector<CorpusItem> read_corpus(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.csv", std::ios::binary);
  if (!man) throw Error(ErrorCode::kIo, "cannot open " + (dir / "manifest.csv").string());
  std::string line;
  std::getline(man, line);
  if (line != kManifestHeader) throw Error(ErrorCode::kFormat, "unexpected manifest header in " + dir.string());
  std::vector<CorpusItem> out;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw Error(ErrorCode::kFormat, "malformed manifest row: " + line);
    CorpusItem it;
    try {
      it.id = static_cast<std::uint32_t>(std::stoul(f[0]));
      it.prompt = parse_prompt_string(f[8]);
      it.params = decode_prompt(it.prompt);
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kFormat, "malformed manifest row '" + line + "': " + e.what());
    }
    it.image = read_ppm((dir / f[1]).string());
    out.push_back(std::move(it));
  }
  if (out.empty()) throw Error(ErrorCode::kFormat, "empty corpus manifest in " + dir.string());
  return out;
}

}  // namespace arrag
