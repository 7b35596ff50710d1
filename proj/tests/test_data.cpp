#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "xalign/data.hpp"

using namespace xalign;
namespace fs = std::filesystem;

namespace {

GenSpec small_spec(std::uint64_t seed = 1) {
  GenSpec spec;
  spec.size = 32;
  spec.seed = seed;
  spec.splits = {40, 10, 10, 10};
  return spec;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("xalign_" + name);
  fs::remove_all(p);
  return p;
}

void expect_same(const Dataset& a, const Dataset& b) {
  ASSERT_EQ(a.samples.size(), b.samples.size());
  EXPECT_EQ(a.num_labels, b.num_labels);
  EXPECT_EQ(a.shape, b.shape);
  EXPECT_EQ(a.split_of, b.split_of);
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto &x = a.samples[i], &y = b.samples[i];
    ASSERT_EQ(x.id, y.id);
    EXPECT_EQ(x.labels, y.labels);
    ASSERT_EQ(x.image.shape(), y.image.shape());
    EXPECT_TRUE(std::equal(x.image.values().begin(), x.image.values().end(), y.image.values().begin())) << x.id;
    ASSERT_EQ(x.masks.size(), y.masks.size());
    for (const auto& [label, mask] : x.masks) {
      const auto& other = y.masks.at(label);
      EXPECT_TRUE(std::equal(mask.values().begin(), mask.values().end(), other.values().begin()));
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

}  // namespace

TEST(Generate, SameSeedIsIdentical) { expect_same(generate(small_spec(3)), generate(small_spec(3))); }

TEST(Generate, DifferentSeedsDiffer) {
  const auto a = generate(small_spec(3)), b = generate(small_spec(4));
  EXPECT_NE(a.samples[0].image.values()[100] + a.samples[1].image.values()[200],
            b.samples[0].image.values()[100] + b.samples[1].image.values()[200]);
}

TEST(Generate, SplitsAreDisjointAndCoverEverything) {
  const auto d = generate(small_spec());
  std::set<std::int64_t> seen;
  std::size_t total = 0;
  for (auto split : {Split::train, Split::val, Split::finetune, Split::eval}) {
    for (auto i : d.indices(split)) {
      EXPECT_TRUE(seen.insert(d.samples[i].id).second);
      ++total;
    }
  }
  EXPECT_EQ(total, d.samples.size());
  EXPECT_EQ(d.indices(Split::train).size(), 40u);
  EXPECT_EQ(d.indices(Split::eval).size(), 10u);
}

TEST(Generate, MaskPresentExactlyForPositiveLabels) {
  const auto d = generate(small_spec());
  for (const auto& s : d.samples) {
    for (std::int64_t k = 0; k < d.num_labels; ++k) {
      const bool positive = s.labels[static_cast<std::size_t>(k)] != 0;
      ASSERT_EQ(s.masks.count(k) == 1, positive) << "sample " << s.id << " label " << k;
      if (!positive) continue;
      double area = 0.0;
      for (double v : s.masks.at(k).values()) {
        EXPECT_TRUE(v == 0.0 || v == 1.0);
        area += v;
      }
      EXPECT_GT(area, 0.0);
    }
  }
}

TEST(Generate, PixelsAreQuantizedToBytesInUnitRange) {
  const auto d = generate(small_spec());
  for (double v : d.samples[0].image.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_EQ(std::round(v * 255.0) / 255.0, v);
  }
}

TEST(Generate, SingleClassGivesOneMaskPerPositive) {
  auto spec = small_spec();
  spec.classes = {{ShapeKind::circle, Texture::solid}};
  const auto d = generate(spec);
  for (const auto& s : d.samples) EXPECT_EQ(s.masks.size(), static_cast<std::size_t>(s.labels[0]));
}

TEST(Generate, ConfounderFollowsRequestedProbability) {
  auto spec = small_spec(9);
  spec.splits = {1500, 500, 500, 500};
  spec.confounder = true;
  spec.confounder_probability = 0.8;
  const auto d = generate(spec);
  double pos = 0, pos_patch = 0, neg = 0, neg_patch = 0;
  for (const auto& s : d.samples) {
    // The patch is a bright top-left block; read it back from the pixels.
    const bool patch = s.image.values()[0] > 0.7 && s.image.values()[33] > 0.7;
    EXPECT_EQ(patch, s.confounded);
    if (s.labels[0]) {
      ++pos;
      pos_patch += patch;
    } else {
      ++neg;
      neg_patch += patch;
    }
  }
  EXPECT_NEAR(pos_patch / pos, 0.8, 0.05);
  EXPECT_NEAR(neg_patch / neg, 0.2, 0.05);
}

TEST(Generate, LabelMarginalsAndAdjacentJointsFollowMatrix) {
  auto spec = small_spec(11);
  spec.splits = {2000, 500, 500, 1000};
  spec.cooccurrence = {{0.6, 0.45, 0.3375}, {0.45, 0.5, 0.25}, {0.3375, 0.25, 0.3}};
  // chain: P(2|1)=0.5, P(2|not 1)=0.1; P(1|0)=0.75, P(1|not 0)=0.125 -> P(0,2)=0.6*(0.75*0.5+0.25*0.1)=0.24
  spec.cooccurrence[0][2] = spec.cooccurrence[2][0] = 0.24;
  const auto d = generate(spec);
  double n = 0, c0 = 0, c1 = 0, c01 = 0, c02 = 0;
  for (const auto& s : d.samples) {
    ++n;
    c0 += s.labels[0];
    c1 += s.labels[1];
    c01 += s.labels[0] && s.labels[1];
    c02 += s.labels[0] && s.labels[2];
  }
  EXPECT_NEAR(c0 / n, 0.6, 0.03);
  EXPECT_NEAR(c1 / n, 0.5, 0.03);
  EXPECT_NEAR(c01 / n, 0.45, 0.03);
  EXPECT_NEAR(c02 / n, 0.24, 0.03);
}

TEST(GenSpecValidation, RejectsImpossibleCooccurrence) {
  auto spec = small_spec();
  spec.cooccurrence = {{0.3, 0.5, 0.1}, {0.5, 0.6, 0.3}, {0.1, 0.3, 0.5}};
  EXPECT_THROW(spec.validate(), std::invalid_argument);  // joint above a marginal
  spec.cooccurrence = {{0.5, 0.25}, {0.25, 0.5}};
  EXPECT_THROW(spec.validate(), std::invalid_argument);  // wrong size
  spec = small_spec();
  spec.size = 8;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(GenSpecJson, RoundTrips) {
  auto spec = small_spec(5);
  spec.confounder = true;
  spec.channels = 3;
  const auto back = genspec_from_json(genspec_to_json(spec));
  EXPECT_EQ(genspec_to_json(back), genspec_to_json(spec));
}

TEST(Pretraining, UsesDisjointVocabulary) {
  const auto spec = small_spec();
  const auto pre = pretraining_spec(spec);
  for (const auto& a : spec.classes) {
    for (const auto& b : pre.classes) EXPECT_NE(a.shape, b.shape);
  }
}

TEST(Directory, RoundTripGrayscale) {
  const auto d = generate(small_spec(6));
  const auto dir = scratch("roundtrip_gray");
  save_directory(d, dir.string());
  expect_same(d, load_directory(dir.string()));
  fs::remove_all(dir);
}

TEST(Directory, RoundTripColor) {
  auto spec = small_spec(7);
  spec.channels = 3;
  const auto d = generate(spec);
  const auto dir = scratch("roundtrip_rgb");
  save_directory(d, dir.string());
  expect_same(d, load_directory(dir.string()));
  fs::remove_all(dir);
}

TEST(Directory, GrayscaleBytesScaleBy255) {
  const auto dir = scratch("pgm");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "x.pgm", std::ios::binary);
    out << "P5\n2 1\n255\n";
    out.put(static_cast<char>(0));
    out.put(static_cast<char>(51));
  }
  const auto t = read_pgm((dir / "x.pgm").string());
  EXPECT_EQ(t.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(t.at(0), 0.0);
  EXPECT_EQ(t.at(1), 51.0 / 255.0);
  fs::remove_all(dir);
}

TEST(Directory, UnknownIdInLabelsIsHardError) {
  const auto d = generate(small_spec(8));
  const auto dir = scratch("unknown_id");
  save_directory(d, dir.string());
  std::ofstream(dir / "labels.csv", std::ios::app) << "99999,1,0,0\n";
  EXPECT_THROW(load_directory(dir.string()), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Directory, MalformedRowNamesLine) {
  const auto d = generate(small_spec(8));
  const auto dir = scratch("malformed");
  save_directory(d, dir.string());
  write_text(dir / "labels.csv", "id,label0,label1,label2\n0,1,0,0\n1,1\n");
  try {
    load_directory(dir.string());
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("labels.csv:3"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Directory, MissingMaskIsExcludedNotFatal) {
  const auto d = generate(small_spec(10));
  const auto dir = scratch("missing_mask");
  save_directory(d, dir.string());
  const auto& s = d.samples.front();
  ASSERT_FALSE(s.masks.empty());
  const auto label = s.masks.begin()->first;
  char stem[32];
  std::snprintf(stem, sizeof(stem), "%05lld_label%lld.png", static_cast<long long>(s.id), static_cast<long long>(label));
  fs::remove(dir / "masks" / stem);
  const auto loaded = load_directory(dir.string());
  ASSERT_EQ(loaded.excluded.size(), 1u);
  EXPECT_EQ(loaded.excluded[0], std::make_pair(s.id, label));
  fs::remove_all(dir);
}
