#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "klr/error.hpp"
#include "klr/store.hpp"
#include "support.hpp"

namespace klr {
namespace {

namespace fs = std::filesystem;
using test::Vec;

class StoreTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("klr_store_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  static Concept random_concept(int d_w, int d_e, const std::vector<LayerDims>& layers, std::uint64_t seed) {
    auto rng = test::rng_for(seed);
    Concept c;
    c.name = "bear";
    c.superclass = "teddy";
    c.embedding = test::random_vector(d_w, rng);
    c.i_star = test::random_vector(d_e, rng);
    for (const auto& l : layers) {
      c.key_targets.push_back(test::random_vector(l.d_k, rng));
      c.value_targets.push_back(test::random_vector(l.d_v, rng));
    }
    c.beta = 0.675;
    return c;
  }

  static std::vector<std::uint8_t> bytes_of(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  static void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }

  fs::path dir_;
  Vocabulary vocab_{Vocabulary::default_tokens(), 32, 1};
};

const std::vector<LayerDims> kToyLayers(3, LayerDims{16, 16});

TEST(Crc, StandardCheckValue) {
  const std::string s = "123456789";
  const std::vector<std::uint8_t> bytes(s.begin(), s.end());
  EXPECT_EQ(crc32_of(bytes), 0xCBF43926u);
  std::vector<std::uint8_t> prefixed{0xAA, 0xBB};
  prefixed.insert(prefixed.end(), bytes.begin(), bytes.end());
  EXPECT_EQ(crc32_of(prefixed, 2), 0xCBF43926u);
}

TEST(Precision, ParsesNames) {
  EXPECT_EQ(parse_precision("f32"), Precision::kF32);
  EXPECT_EQ(parse_precision("f64"), Precision::kF64);
  EXPECT_THROW(parse_precision("f16"), ConfigError);
  EXPECT_STREQ(to_string(Precision::kF64), "f64");
}

TEST_F(StoreTest, DoublePrecisionRoundTripIsBitExact) {
  const Concept c = random_concept(32, 32, kToyLayers, 1);
  const auto path = dir_ / "bear.klc";
  save_concept(c, vocab_, path, Precision::kF64);
  const Concept back = load_concept(path, vocab_);
  EXPECT_EQ(back.name, "bear");
  EXPECT_EQ(back.superclass, "teddy");
  EXPECT_TRUE(back.embedding == c.embedding);
  EXPECT_TRUE(back.i_star == c.i_star);
  EXPECT_EQ(back.beta, c.beta);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_TRUE(back.key_targets[l] == c.key_targets[l]);
    EXPECT_TRUE(back.value_targets[l] == c.value_targets[l]);
  }
}

TEST_F(StoreTest, SinglePrecisionRoundTripRoundsEachScalar) {
  const Concept c = random_concept(32, 32, kToyLayers, 2);
  const auto path = dir_ / "bear.klc";
  EXPECT_EQ(save_concept(c, vocab_, path), 696u);
  EXPECT_EQ(fs::file_size(path), 696u);
  const Concept back = load_concept(path, vocab_);
  for (Eigen::Index i = 0; i < 32; ++i) {
    EXPECT_EQ(back.embedding(i), static_cast<double>(static_cast<float>(c.embedding(i))));
  }
  EXPECT_EQ(back.beta, static_cast<double>(0.675f));
}

TEST_F(StoreTest, ByteCountMatchesPredictionAcrossDimensions) {
  int seed = 10;
  for (int d_w : {1, 7, 32}) {
    for (int d_e : {1, 5, 32}) {
      for (const auto& layers : {std::vector<LayerDims>{{1, 1}}, std::vector<LayerDims>{{3, 9}, {16, 2}}, kToyLayers}) {
        Vocabulary vocab(Vocabulary::default_tokens(), d_w, 1);
        const Concept c = random_concept(d_w, d_e, layers, static_cast<std::uint64_t>(++seed));
        for (Precision p : {Precision::kF32, Precision::kF64}) {
          const auto path = dir_ / "c.klc";
          const std::size_t n = save_concept(c, vocab, path, p);
          EXPECT_EQ(n, predicted_size(ConceptDims::of(c), p));
          EXPECT_EQ(fs::file_size(path), n);
        }
      }
    }
  }
}

TEST_F(StoreTest, ProductionSizedConceptFitsTheBudget) {
  // Cross-attention widths of a 16-layer text-to-image UNet.
  const std::vector<std::uint32_t> widths{320, 320, 640, 640, 1280, 1280, 1280, 1280,
                                          1280, 1280, 640, 640, 640, 320, 320, 320};
  std::vector<LayerDims> layers;
  for (auto w : widths) layers.push_back({w, w});
  const std::uint32_t sum_v = std::accumulate(widths.begin(), widths.end(), 0u);
  EXPECT_GT(sum_v, 12000u);
  const Vocabulary vocab(Vocabulary::default_tokens(), 768, 1);
  const Concept c = random_concept(768, 768, layers, 3);
  const auto path = dir_ / "big.klc";
  const std::size_t n = save_concept(c, vocab, path);
  EXPECT_EQ(n, predicted_size(ConceptDims::of(c), Precision::kF32));
  EXPECT_GE(n, 30u * 1024u);
  EXPECT_LE(n, 300u * 1024u);
}

TEST_F(StoreTest, SizeGrowsLinearlyWithLayers) {
  std::vector<LayerDims> one{{40, 24}};
  std::vector<std::size_t> sizes;
  for (int layers = 1; layers <= 8; layers *= 2) {
    ConceptDims d{32, 32, std::vector<LayerDims>(static_cast<std::size_t>(layers), one[0])};
    sizes.push_back(predicted_size(d, Precision::kF32));
  }
  const std::size_t per_layer = 8 + 4 * (40 + 24);
  for (std::size_t k = 1; k < sizes.size(); ++k) {
    EXPECT_EQ(sizes[k] - sizes[k - 1], per_layer * (std::size_t{1} << (k - 1)));
  }
}

TEST_F(StoreTest, TruncationIsChecksumError) {
  const auto path = dir_ / "bear.klc";
  save_concept(random_concept(32, 32, kToyLayers, 4), vocab_, path);
  auto b = bytes_of(path);
  for (std::size_t keep : {std::size_t{3}, std::size_t{10}, std::size_t{30}, b.size() - 1}) {
    write_bytes(path, std::vector<std::uint8_t>(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(keep)));
    if (keep < 4) {
      EXPECT_THROW(load_concept(path, vocab_), FormatError) << keep;
    } else {
      EXPECT_THROW(load_concept(path, vocab_), ChecksumError) << keep;
    }
  }
}

TEST_F(StoreTest, FlippedPayloadBitFailsChecksumButHeaderStillReads) {
  const auto path = dir_ / "bear.klc";
  const Concept c = random_concept(32, 32, kToyLayers, 5);
  save_concept(c, vocab_, path);
  auto b = bytes_of(path);
  b[100] ^= 0x10;
  write_bytes(path, b);
  EXPECT_THROW(load_concept(path, vocab_), ChecksumError);
  const ConceptHeader h = read_concept_header(path);
  EXPECT_EQ(h.dims, ConceptDims::of(c));
  EXPECT_EQ(h.precision, Precision::kF32);
  EXPECT_EQ(h.superclass_index, static_cast<std::uint32_t>(vocab_.index_of("teddy")));
}

TEST_F(StoreTest, BadMagicAndVersionAreDistinguished) {
  const auto path = dir_ / "bear.klc";
  save_concept(random_concept(32, 32, kToyLayers, 6), vocab_, path);
  auto b = bytes_of(path);
  auto bad_magic = b;
  bad_magic[0] = 'X';
  write_bytes(path, bad_magic);
  EXPECT_THROW(load_concept(path, vocab_), FormatError);
  auto bad_version = b;
  bad_version[4] = 9;
  write_bytes(path, bad_version);
  EXPECT_THROW(load_concept(path, vocab_), VersionError);
  EXPECT_THROW(read_concept_header(path), VersionError);
  auto bad_precision = b;
  bad_precision[6] = 2;
  write_bytes(path, bad_precision);
  EXPECT_THROW(read_concept_header(path), FormatError);
  auto trailing = b;
  trailing.push_back(0);
  write_bytes(path, trailing);
  EXPECT_THROW(load_concept(path, vocab_), ChecksumError);
  EXPECT_THROW(load_concept(dir_ / "missing.klc", vocab_), IoError);
}

TEST_F(StoreTest, SuperclassOutsideVocabularyIsLoadError) {
  const auto path = dir_ / "bear.klc";
  save_concept(random_concept(32, 32, kToyLayers, 7), vocab_, path);
  const Vocabulary small({"a", "photo"}, 32, 1);
  EXPECT_THROW(load_concept(path, small), LoadError);
  Concept unknown = random_concept(32, 32, kToyLayers, 7);
  unknown.superclass = "zebra";
  EXPECT_THROW(save_concept(unknown, vocab_, path), VocabularyError);
}

TEST_F(StoreTest, NonFiniteConceptIsRejectedWithoutWriting) {
  Concept c = random_concept(32, 32, kToyLayers, 8);
  c.value_targets[1](3) = std::numeric_limits<double>::quiet_NaN();
  const auto path = dir_ / "nan.klc";
  EXPECT_THROW(save_concept(c, vocab_, path), ContractError);
  EXPECT_FALSE(fs::exists(path));
}

TEST_F(StoreTest, CovarianceRoundTripIsBitExact) {
  auto rng = test::rng_for(9);
  const auto m = test::random_metric(12, rng);
  const auto path = dir_ / "cov.klr";
  EXPECT_EQ(save_covariance(m, path), 10u + 2u * 8u * 144u);
  const auto back = load_covariance(path);
  EXPECT_TRUE(back.c_inv() == m.c_inv());
  EXPECT_TRUE(back.chol() == m.chol());
  auto b = bytes_of(path);
  b.pop_back();
  write_bytes(path, b);
  EXPECT_THROW(load_covariance(path), FormatError);
}

TEST_F(StoreTest, GridRoundTripAtBothPrecisions) {
  auto rng = test::rng_for(10);
  const FeatureGrid g = random_normal_grid(8, 6, 5, rng);
  const auto path = dir_ / "sample.klg";
  save_grid(g, path);
  const FeatureGrid back = load_grid(path);
  EXPECT_TRUE(back.same_shape(g));
  EXPECT_TRUE(back.data == g.data);
  save_grid(g, path, Precision::kF32);
  EXPECT_TRUE(load_grid(path).data == g.data.cast<float>().cast<double>());
  auto b = bytes_of(path);
  b[b.size() - 10] ^= 1;
  write_bytes(path, b);
  EXPECT_THROW(load_grid(path), ChecksumError);
}

}  // namespace
}  // namespace klr
