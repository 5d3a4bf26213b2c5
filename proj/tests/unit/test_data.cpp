#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "sona/core/error.hpp"
#include "sona/core/kvconfig.hpp"
#include "sona/data/archive.hpp"
#include "sona/data/synthetic.hpp"

using namespace sona;
using namespace sona::data;

namespace {

SplitCounts small_counts() { return {40, 12, 12, 12, 8}; }

double count_ones(const Tensor& m) {
  double n = 0;
  for (real v : m.data()) n += v;
  return n;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("sona_test_" + name);
}

}  // namespace

TEST_CASE("archive round trip keeps names, order, shapes and bytes") {
  Rng rng(1);
  Archive a;
  a.add("w", rng.normal_tensor({3, 4}));
  a.add("note", std::string("hello\nworld"));
  a.add("empty_text", std::string());
  a.add("v", Tensor(Shape{1}, real(-0.0f)));
  const auto bytes = encode_archive(a);
  const Archive b = decode_archive(bytes);
  REQUIRE(b.size() == 4);
  CHECK(b.entries()[0].name == "w");
  CHECK(b.entries()[1].name == "note");
  CHECK(b.tensor("w") == a.tensor("w"));
  CHECK(b.text("note") == "hello\nworld");
  CHECK(b.text("empty_text").empty());
  CHECK(std::signbit(b.tensor("v")[0]));
  CHECK(encode_archive(b) == bytes);
}

TEST_CASE("empty archive round trips") {
  const auto bytes = encode_archive(Archive{});
  CHECK(bytes.size() == 12);
  CHECK(decode_archive(bytes).size() == 0);
}

TEST_CASE("archive lookups report missing or mistyped entries") {
  Archive a;
  a.add("t", Tensor(Shape{2}));
  a.add("s", std::string("x"));
  CHECK_THROWS_AS(a.tensor("missing"), FormatError);
  CHECK_THROWS_AS(a.tensor("s"), FormatError);
  CHECK_THROWS_AS(a.text("t"), FormatError);
  CHECK_THROWS_AS(a.add("t", Tensor(Shape{1})), ArgumentError);
  CHECK_THROWS_AS(a.add("", Tensor(Shape{1})), ArgumentError);
}

TEST_CASE("corrupted archives fail with an offset, never silently") {
  Archive a;
  a.add("weights", Tensor(Shape{2, 2}, std::vector<real>{1, 2, 3, 4}));
  a.add("meta", std::string("k=v"));
  const auto good = encode_archive(a);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_archive(bad_magic), doctest::Contains("offset 0"), FormatError);

  auto bad_version = good;
  bad_version[4] = 9;
  CHECK_THROWS_WITH_AS(decode_archive(bad_version), doctest::Contains("offset 4"), FormatError);

  for (std::size_t cut = 0; cut < good.size(); ++cut) {
    const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_WITH_AS(decode_archive(truncated), doctest::Contains("offset"), FormatError);
  }
  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_archive(trailing), FormatError);

  // A flipped byte is either rejected or yields an archive that re-encodes to exactly those bytes.
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    auto fuzzed = good;
    const auto at = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(good.size()) - 1));
    fuzzed[at] ^= static_cast<std::uint8_t>(1 + rng.uniform_int(0, 254));
    try {
      const Archive c = decode_archive(fuzzed);
      CHECK(encode_archive(c) == fuzzed);
    } catch (const FormatError&) {
    } catch (const ArgumentError&) {
    }
  }
}

TEST_CASE("archive files are written atomically and load back") {
  const auto p = temp_path("archive.sona");
  Archive a;
  a.add("x", Tensor(Shape{3}, real(7)));
  save_archive(a, p);
  CHECK(load_archive(p).tensor("x") == a.tensor("x"));
  CHECK_FALSE(std::filesystem::exists(p.string() + ".tmp"));
  std::filesystem::remove(p);
  const std::string where = p.string();
  CHECK_THROWS_WITH_AS(load_archive(p), doctest::Contains(where.c_str()), FormatError);
}

TEST_CASE("integer lists survive the tensor encoding") {
  const std::vector<std::int32_t> v{0, -5, 16777216, 42};
  CHECK(tensor_to_ints(ints_to_tensor(v)) == v);
  CHECK_THROWS_AS(ints_to_tensor({16777217}), ArgumentError);
}

TEST_CASE("rendered disc area matches pi r^2 within the boundary pixels") {
  const std::size_t side = 64;
  for (double r : {8.0, 12.5, 20.0}) {
    const Tensor m = shape_mask(Shape2D::kCircle, side, 32.0, 32.0, r);
    // Every pixel the circle boundary crosses can flip; at most about 4 * (2r + 1) of them.
    CHECK(std::abs(count_ones(m) - disc_area(r)) <= 4.0 * (2.0 * r + 1.0));
  }
}

TEST_CASE("every shape has a non-empty mask inside the image") {
  for (auto s : {Shape2D::kCircle, Shape2D::kSquare, Shape2D::kTriangle, Shape2D::kCross, Shape2D::kRing,
                 Shape2D::kStar, Shape2D::kDiamond, Shape2D::kPlus}) {
    CAPTURE(shape_name(s));
    const Tensor m = shape_mask(s, 16, 8, 8, 5);
    CHECK(count_ones(m) > 4);
    CHECK(count_ones(m) < 256);
    CHECK(parse_shape(shape_name(s)) == s);
  }
  // The ring is the disc minus its core.
  CHECK(count_ones(shape_mask(Shape2D::kRing, 64, 32, 32, 20)) < count_ones(shape_mask(Shape2D::kCircle, 64, 32, 32, 20)));
}

TEST_CASE("benchmark generation is deterministic per seed") {
  const FactorSpec spec;
  const auto a = generate_benchmark(spec, small_counts(), 5);
  const auto b = generate_benchmark(spec, small_counts(), 5);
  const auto c = generate_benchmark(spec, small_counts(), 6);
  CHECK(encode_archive(benchmark_to_archive(a)) == encode_archive(benchmark_to_archive(b)));
  CHECK_FALSE(a.id_train.images == c.id_train.images);
}

TEST_CASE("benchmark archive round trip") {
  const auto a = generate_benchmark(FactorSpec{}, small_counts(), 9);
  const auto b = benchmark_from_archive(benchmark_to_archive(a));
  CHECK(b.id_train.images == a.id_train.images);
  CHECK(b.far_ood.masks == a.far_ood.masks);
  CHECK(b.near_ood.labels == a.near_ood.labels);
  CHECK(b.id_classes == a.id_classes);
  CHECK(b.ood_prompt_labels == a.ood_prompt_labels);
  CHECK(encode_archive(benchmark_to_archive(b)) == encode_archive(benchmark_to_archive(a)));
}

TEST_CASE("split roles: near OOD shares ID nuisances, far OOD does not") {
  const FactorSpec spec;
  const auto s = generate_benchmark(spec, small_counts(), 11);
  auto in_id_ranges = [&](const Background& bg) {
    if (bg.family != Background::Family::kStriped) return false;
    for (double v : bg.base) {
      if (!spec.base_color.contains(v)) return false;
    }
    return spec.stripe_frequency.contains(bg.frequency);
  };
  for (const ImageSet* set : {&s.id_train, &s.id_test, &s.near_ood, &s.prompt_train}) {
    for (const auto& bg : set->backgrounds) CHECK(in_id_ranges(bg));
  }
  for (const auto& bg : s.far_ood.backgrounds) {
    CHECK_FALSE(in_id_ranges(bg));
    for (double v : bg.base) CHECK(spec.far_base_color.contains(v));
  }
  for (auto l : s.near_ood.labels) {
    CHECK(std::find(s.id_classes.begin(), s.id_classes.end(), l) == s.id_classes.end());
  }
  for (auto l : s.id_train.labels) CHECK(s.id_index(l) >= 0);
  for (real v : s.id_train.images.data()) {
    CHECK(v >= 0);
    CHECK(v <= 1);
  }
}

TEST_CASE("classes are balanced within a split") {
  const auto s = generate_benchmark(FactorSpec{}, {42, 10, 10, 10, 6}, 13);
  std::map<std::int32_t, int> counts;
  for (auto l : s.id_train.labels) ++counts[l];
  REQUIRE(counts.size() == 4);
  for (const auto& [label, n] : counts) {
    CHECK(n >= 42 / 4);
    CHECK(n <= 42 / 4 + 1);
  }
}

TEST_CASE("the foreground mask marks the shape pixels") {
  const auto s = generate_benchmark(FactorSpec{}, small_counts(), 15);
  const LabeledImage img = s.id_test.at(3);
  const std::size_t hw = 16 * 16;
  for (std::size_t p = 0; p < hw; ++p) {
    if (img.mask[p] == 1) {
      // Foreground colours are dark; backgrounds stay above the ID base range minus stripes.
      CHECK(img.pixels[p] <= 0.2 + 1e-6);
    } else {
      CHECK(img.pixels[p] >= 0.35 - 0.12 - 1e-6);
    }
  }
}

TEST_CASE("class budget violations are configuration errors") {
  FactorSpec spec;
  spec.near_classes = {"ring", "diamond", "star", "plus"};
  spec.far_classes = {};
  CHECK_THROWS_AS(spec.validate(), ConfigError);

  FactorSpec overlap;
  overlap.near_classes = {"ring", "circle"};
  CHECK_THROWS_AS(overlap.validate(), ConfigError);

  FactorSpec unknown;
  unknown.id_classes = {"circle", "hexagon"};
  CHECK_THROWS_AS(unknown.validate(), ConfigError);

  FactorSpec colours;
  colours.far_base_color = {0.7, 0.9};
  CHECK_THROWS_AS(colours.validate(), ConfigError);
}

TEST_CASE("factor spec key-value round trip") {
  FactorSpec spec;
  spec.side = 24;
  spec.stripe_amplitude = 0.05;
  spec.near_classes = {"ring"};
  const auto kv = spec_to_key_values(spec);
  const FactorSpec back = spec_from_key_values(kv);
  CHECK(spec_to_key_values(back) == kv);
  CHECK(back.side == 24);
  CHECK(back.near_classes == std::vector<std::string>{"ring"});
  auto bad = kv;
  bad["data.nonsense"] = "1";
  CHECK_THROWS_AS(spec_from_key_values(bad), ConfigError);
}

TEST_CASE("key-value parser") {
  const auto kv = parse_key_values("# comment\nseed = 3\n\n  sona.lambda=0.2  # trailing\n", "test.cfg");
  CHECK(kv.size() == 2);
  CHECK(kv.at("seed") == "3");
  CHECK(kv.at("sona.lambda") == "0.2");
  CHECK_THROWS_WITH_AS(parse_key_values("a = 1\na = 2\n", "x.cfg"), doctest::Contains("x.cfg:2"), ConfigError);
  CHECK_THROWS_AS(parse_key_values("no equals sign\n", "x.cfg"), ConfigError);
  CHECK_THROWS_AS(parse_key_values("bad key! = 1\n", "x.cfg"), ConfigError);
}

TEST_CASE("config hash depends on content, not order") {
  const std::map<std::string, std::string> a{{"x", "1"}, {"y", "2"}};
  std::map<std::string, std::string> b;
  b["y"] = "2";
  b["x"] = "1";
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b["y"] = "3";
  CHECK(config_hash(a) != config_hash(b));
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}
