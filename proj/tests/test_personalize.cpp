#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "klr/error.hpp"
#include "klr/generate.hpp"
#include "klr/personalize.hpp"
#include "support.hpp"

namespace klr {
namespace {

using test::Mat;
using test::Vec;

const ToyPipeline& default_pipeline() {
  static const ToyPipeline p{PipelineConfig{}};
  return p;
}

const ToyPipeline& identity_mix_pipeline() {
  static const ToyPipeline p = [] {
    PipelineConfig cfg;
    cfg.mix_strength = 0.0;
    return ToyPipeline(cfg);
  }();
  return p;
}

TrainConfig short_training(int steps) {
  TrainConfig cfg;
  cfg.steps = steps;
  return cfg;
}

// Reference keys/values for a sequence, one concept or several, written out
// token by token. The multi-concept null space uses the metric-weighted
// least-squares projector instead of a QR basis.
Mat reference_projection(const Mat& weight, const Mat& encodings, const Mat& c_inv, const std::vector<Vec>& targets,
                         const std::vector<Vec>& outputs, double beta, double tau) {
  Mat targets_m(encodings.cols(), static_cast<Eigen::Index>(targets.size()));
  for (std::size_t j = 0; j < targets.size(); ++j) targets_m.col(static_cast<Eigen::Index>(j)) = targets[j];
  const Mat gram = targets_m.transpose() * c_inv * targets_m;
  Mat out(encodings.rows(), weight.rows());
  for (Eigen::Index m = 0; m < encodings.rows(); ++m) {
    const Vec e = encodings.row(m).transpose();
    const Vec coeff = gram.ldlt().solve(targets_m.transpose() * c_inv * e);
    Vec h = weight * (e - targets_m * coeff);
    for (std::size_t j = 0; j < targets.size(); ++j) {
      const double ratio = targets[j].dot(c_inv * e) / targets[j].dot(c_inv * targets[j]);
      h += outputs[j] * test::logistic((ratio - beta) / tau);
    }
    out.row(m) = h.transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Initialization

TEST(InitConcept, TargetsAreSuperclassProjections) {
  const auto& p = default_pipeline();
  const Concept c = init_concept("bear", "teddy", p);
  const auto ep = p.encoder().encode("a photo of a teddy");
  const Vec e_super = ep.encodings.row(4).transpose();
  const auto& vocab = p.encoder().vocabulary();
  EXPECT_TRUE(c.embedding == vocab.embedding(vocab.index_of("teddy")));
  EXPECT_TRUE(c.i_star == e_super);
  ASSERT_EQ(c.layers(), 3);
  for (int l = 0; l < 3; ++l) {
    const Vec k = p.layer(l).w_k.weight() * e_super;
    const Vec v = p.layer(l).w_v.weight() * e_super;
    EXPECT_LE(test::rel_err(c.key_targets[static_cast<std::size_t>(l)], k), 1e-15);
    EXPECT_LE(test::rel_err(c.value_targets[static_cast<std::size_t>(l)], v), 1e-15);
  }
  EXPECT_FALSE(c.key_trainable);
}

TEST(InitConcept, UnknownSuperclassIsVocabularyError) {
  EXPECT_THROW(init_concept("x", "zebra", default_pipeline()), VocabularyError);
}

TEST(InitConcept, SaturatedGateReproducesSuperclassSamplingUnderIdentityMix) {
  // With identity mixing the corpus encodings are exactly the projected
  // vocabulary, so distinct words are metric-orthogonal and every gate is 0 or 1.
  const auto& p = identity_mix_pipeline();
  const Concept c = init_concept("bear", "teddy", p);
  GenerateRequest with_concept;
  with_concept.tokens = tokenize("a photo of a S*");
  with_concept.concepts = {BoundConcept{&c, "S*", {}}};
  with_concept.options.tau = 1e-3;
  GenerateRequest plain;
  plain.tokens = tokenize("a photo of a teddy");
  const auto a = generate(p, with_concept);
  const auto b = generate(p, plain);
  EXPECT_LE(test::rel_err(a.sample.data, b.sample.data), 1e-8);
  for (int l = 0; l < 3; ++l) {
    const auto lu = static_cast<std::size_t>(l);
    EXPECT_LE(test::rel_err(a.conditioned.conditioning[lu].keys, b.conditioned.conditioning[lu].keys), 1e-8);
    EXPECT_LE(test::rel_err(a.conditioned.conditioning[lu].values, b.conditioned.conditioning[lu].values), 1e-8);
  }
}

// ---------------------------------------------------------------------------
// Masked loss

TEST(MaskedLoss, UnitMaskIsMeanSquaredError) {
  auto rng = test::rng_for(100);
  const FeatureGrid a = random_normal_grid(8, 8, 16, rng);
  const FeatureGrid b = random_normal_grid(8, 8, 16, rng);
  const double mse = (a.data - b.data).squaredNorm() / static_cast<double>(a.data.size());
  EXPECT_NEAR(masked_loss(a, b, Mat::Ones(8, 8)), mse, 1e-15 * mse);
  EXPECT_EQ(masked_loss(a, b, Mat::Constant(8, 8, 0.5)), masked_loss(a, b, Mat::Ones(8, 8)));
}

TEST(MaskedLoss, IgnoresPixelsOutsideTheMask) {
  auto rng = test::rng_for(101);
  const FeatureGrid a = random_normal_grid(8, 8, 16, rng);
  const FeatureGrid b = random_normal_grid(8, 8, 16, rng);
  Mat mask = Mat::Zero(8, 8);
  mask.block(2, 3, 3, 2).setOnes();
  FeatureGrid changed = a;
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      if (mask(y, x) == 0.0) changed.data.row(y * 8 + x).array() += 10.0;
    }
  }
  EXPECT_EQ(masked_loss(a, b, mask), masked_loss(changed, b, mask));
}

TEST(MaskedLoss, ZeroMaskIsDegenerate) {
  const FeatureGrid a(8, 8, 4);
  EXPECT_THROW(masked_loss(a, a, Mat::Zero(8, 8)), DegenerateInputError);
  EXPECT_THROW(masked_loss(a, a, Mat::Constant(8, 8, -1.0)), ContractError);
  EXPECT_THROW(masked_loss(a, FeatureGrid(8, 8, 3), Mat::Ones(8, 8)), ContractError);
  EXPECT_THROW(masked_loss(a, a, Mat::Ones(4, 8)), ContractError);
}

TEST(MaskedLoss, GradientMatchesFiniteDifferences) {
  auto rng = test::rng_for(102);
  const FeatureGrid a = random_normal_grid(4, 4, 3, rng);
  const FeatureGrid b = random_normal_grid(4, 4, 3, rng);
  const Mat mask = (Mat::Random(4, 4).array() + 1.0).matrix();
  const Mat g = masked_loss_gradient(a, b, mask);
  for (Eigen::Index i = 0; i < a.data.size(); ++i) {
    FeatureGrid p = a, m = a;
    p.data(i) += 1e-6;
    m.data(i) -= 1e-6;
    const double fd = (masked_loss(p, b, mask) - masked_loss(m, b, mask)) / 2e-6;
    EXPECT_NEAR(g(i), fd, 1e-8);
  }
}

// ---------------------------------------------------------------------------
// Dataset

TEST(SyntheticDataset, PairsEveryImageWithEveryTemplate) {
  const auto& p = default_pipeline();
  const auto data = synthetic_dataset(p, "teddy", 3);
  EXPECT_EQ(data.size(), 4 * training_templates().size());
  for (const auto& s : data) {
    EXPECT_NE(std::find(s.prompt.begin(), s.prompt.end(), "S*"), s.prompt.end());
    EXPECT_DOUBLE_EQ(s.mask.maxCoeff(), 1.0);
    EXPECT_GE(s.mask.minCoeff(), 0.0);
    EXPECT_EQ(s.target.channels, 16);
  }
  const auto again = synthetic_dataset(p, "teddy", 3);
  EXPECT_TRUE(again[5].target.data == data[5].target.data);
  SyntheticConfig one;
  one.one_shot = true;
  EXPECT_EQ(synthetic_dataset(p, "teddy", 3, one).size(), 1u);
  EXPECT_THROW(synthetic_dataset(p, "zebra", 3), VocabularyError);
}

TEST(ValidationItems, TimestepsAreEvenlySpaced) {
  const auto& p = default_pipeline();
  const auto data = synthetic_dataset(p, "teddy", 3);
  const auto items = validation_items(data, p, 9);
  ASSERT_EQ(items.size(), 16u);
  for (std::size_t k = 0; k < items.size(); ++k) EXPECT_EQ(items[k].t, static_cast<int>(k * 50 / 16));
  EXPECT_THROW(validation_items({}, p, 9), ContractError);
}

// ---------------------------------------------------------------------------
// Gradients through the full denoiser

class ConceptGradientTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto& p = default_pipeline();
    data_ = synthetic_dataset(p, "teddy", 4);
    cpt_ = init_concept("bear", "teddy", p);
    auto rng = test::rng_for(103);
    // Move away from initialization so every gate sits on its slope.
    cpt_.embedding += 0.3 * test::random_vector(32, rng);
    for (auto& v : cpt_.value_targets) v += 0.5 * test::random_vector(v.size(), rng);
    eps_ = random_normal_grid(8, 8, 16, rng);
  }

  double loss(const Concept& c) const {
    return evaluate_sample(default_pipeline(), c, data_[6], 12, eps_, gate_, false).loss;
  }

  std::vector<TrainingSample> data_;
  Concept cpt_;
  FeatureGrid eps_;
  GateParams<double> gate_{0.75, 0.1};
};

TEST_F(ConceptGradientTest, ValueTargetsMatchFiniteDifferences) {
  const auto ev = evaluate_sample(default_pipeline(), cpt_, data_[6], 12, eps_, gate_, true);
  int checked = 0;
  for (std::size_t l = 0; l < cpt_.value_targets.size(); ++l) {
    for (Eigen::Index k = 0; k < 16; k += 2) {
      Concept p = cpt_, m = cpt_;
      p.value_targets[l](k) += 1e-6;
      m.value_targets[l](k) -= 1e-6;
      const double fd = (loss(p) - loss(m)) / 2e-6;
      const double an = ev.gradient.value_targets[l](k);
      EXPECT_LE(std::abs(an - fd), 1e-5 * std::max(std::abs(fd), 1e-3)) << "layer " << l << " k " << k;
      ++checked;
    }
  }
  EXPECT_GE(checked, 20);
}

TEST_F(ConceptGradientTest, EmbeddingMatchesFiniteDifferences) {
  const auto ev = evaluate_sample(default_pipeline(), cpt_, data_[6], 12, eps_, gate_, true);
  for (Eigen::Index k = 0; k < 32; ++k) {
    Concept p = cpt_, m = cpt_;
    p.embedding(k) += 1e-6;
    m.embedding(k) -= 1e-6;
    const double fd = (loss(p) - loss(m)) / 2e-6;
    EXPECT_LE(std::abs(ev.gradient.embedding(k) - fd), 1e-5 * std::max(std::abs(fd), 1e-3)) << k;
  }
}

TEST_F(ConceptGradientTest, KeyTargetsMatchFiniteDifferences) {
  cpt_.key_trainable = true;
  const auto ev = evaluate_sample(default_pipeline(), cpt_, data_[6], 12, eps_, gate_, true);
  for (std::size_t l = 0; l < cpt_.key_targets.size(); ++l) {
    for (Eigen::Index k = 0; k < 16; k += 3) {
      Concept p = cpt_, m = cpt_;
      p.key_targets[l](k) += 1e-6;
      m.key_targets[l](k) -= 1e-6;
      const double fd = (loss(p) - loss(m)) / 2e-6;
      EXPECT_LE(std::abs(ev.gradient.key_targets[l](k) - fd), 1e-5 * std::max(std::abs(fd), 1e-3));
    }
  }
}

// ---------------------------------------------------------------------------
// Training

class TrainingTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new std::vector<TrainingSample>(synthetic_dataset(default_pipeline(), "teddy", 5));
  }
  static void TearDownTestSuite() {
    delete data_;
    data_ = nullptr;
  }
  static std::vector<TrainingSample>* data_;
};
std::vector<TrainingSample>* TrainingTest::data_ = nullptr;

TEST_F(TrainingTest, ZeroStepsReturnsInitialization) {
  const auto& p = default_pipeline();
  const Concept init = init_concept("bear", "teddy", p);
  const auto r = train_concept(init, *data_, short_training(0), p);
  EXPECT_TRUE(r.log.empty());
  EXPECT_TRUE(r.concept_state.embedding == init.embedding);
  EXPECT_TRUE(r.concept_state.i_star == init.i_star);
  for (int l = 0; l < 3; ++l) {
    EXPECT_TRUE(r.concept_state.value_targets[static_cast<std::size_t>(l)] ==
                init.value_targets[static_cast<std::size_t>(l)]);
  }
}

TEST_F(TrainingTest, LockedKeysStayBitConstantAndRunsAreDeterministic) {
  const auto& p = default_pipeline();
  const Concept init = init_concept("bear", "teddy", p);
  const auto a = train_concept(init, *data_, short_training(30), p);
  const auto b = train_concept(init, *data_, short_training(30), p);
  ASSERT_EQ(a.log.size(), 30u);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_TRUE(a.concept_state.key_targets[l] == init.key_targets[l]);
    EXPECT_FALSE(a.concept_state.value_targets[l] == init.value_targets[l]);
    EXPECT_TRUE(a.concept_state.value_targets[l] == b.concept_state.value_targets[l]);
  }
  EXPECT_TRUE(a.concept_state.embedding == b.concept_state.embedding);
  EXPECT_TRUE(a.concept_state.i_star == b.concept_state.i_star);
  for (std::size_t s = 0; s < a.log.size(); ++s) {
    EXPECT_EQ(a.log[s].step, static_cast<int>(s) + 1);
    EXPECT_EQ(a.log[s].loss, b.log[s].loss);
  }
  EXPECT_EQ(a.log.back().i_star_norm, a.concept_state.i_star.norm());
}

TEST_F(TrainingTest, SelectedStepEqualsShorterRun) {
  const auto& p = default_pipeline();
  const Concept init = init_concept("bear", "teddy", p);
  TrainConfig cfg = short_training(20);
  cfg.select_step = 8;
  const auto selected = train_concept(init, *data_, cfg, p);
  const auto shorter = train_concept(init, *data_, short_training(8), p);
  EXPECT_EQ(selected.log.size(), 20u);
  EXPECT_TRUE(selected.concept_state.embedding == shorter.concept_state.embedding);
  EXPECT_TRUE(selected.concept_state.value_targets[2] == shorter.concept_state.value_targets[2]);
  cfg.select_step = 21;
  EXPECT_THROW(train_concept(init, *data_, cfg, p), ConfigError);
}

TEST_F(TrainingTest, TargetInputFollowsExponentialAverageBeforeTheStep) {
  const auto& p = default_pipeline();
  SyntheticConfig one;
  one.one_shot = true;
  const auto single = synthetic_dataset(p, "teddy", 5, one);
  const Concept init = init_concept("bear", "teddy", p);
  const auto r = train_concept(init, single, short_training(1), p);
  // Every draw uses the same prompt, so the batch mean is that prompt's encoding.
  const auto ep = p.encoder().encode(single[0].prompt, {{"S*", init.embedding}});
  const Vec e = ep.encodings.row(placeholder_index(ep)).transpose();
  const Vec expected = 0.99 * init.i_star + 0.01 * e;
  EXPECT_LE(test::rel_err(r.concept_state.i_star, expected), 1e-14);
}

TEST_F(TrainingTest, ClosedGateLeavesValuesUntouched) {
  // sigma underflows to exactly zero, so o*^V gets no gradient; the embedding
  // still learns through the null-space term W e_perp.
  const auto& p = default_pipeline();
  const Concept init = init_concept("bear", "teddy", p);
  TrainConfig cfg = short_training(20);
  cfg.gate.beta = 1e6;
  const auto r = train_concept(init, *data_, cfg, p);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_TRUE(r.concept_state.value_targets[l] == init.value_targets[l]);
  for (const auto& rec : r.log) EXPECT_EQ(rec.gate_mean, 0.0);

  const auto items = validation_items(*data_, p, 11);
  const Concept& c = r.concept_state;
  const double gated = validation_loss(p, c, *data_, items, cfg.gate);
  const double null_space = validation_loss(p, *data_, items, {{"S*", c.embedding}}, [&](const EncodedPrompt& ep) {
    Conditioning cond;
    Mat perp = ep.encodings;
    for (Eigen::Index m = 0; m < perp.rows(); ++m) {
      perp.row(m) = project_orthogonal(Vec(ep.encodings.row(m).transpose()), c.i_star, p.metric()).transpose();
    }
    for (int l = 0; l < p.layer_count(); ++l) {
      cond.push_back({perp * p.layer(l).w_k.weight().transpose(), perp * p.layer(l).w_v.weight().transpose()});
    }
    return cond;
  });
  EXPECT_NEAR(gated, null_space, 1e-8 * null_space);
}

TEST_F(TrainingTest, DivergenceIsReported) {
  const auto& p = default_pipeline();
  TrainConfig cfg = short_training(50);
  cfg.lr_o = 1e12;
  cfg.lr_embed = 1e12;
  EXPECT_THROW(train_concept(init_concept("bear", "teddy", p), *data_, cfg, p), TrainingDivergedError);
}

TEST_F(TrainingTest, RejectsBadConfigurations) {
  const auto& p = default_pipeline();
  const Concept init = init_concept("bear", "teddy", p);
  TrainConfig cfg = short_training(-1);
  EXPECT_THROW(train_concept(init, *data_, cfg, p), ConfigError);
  cfg = short_training(1);
  cfg.gate.tau = 0.0;
  EXPECT_THROW(train_concept(init, *data_, cfg, p), ConfigError);
  EXPECT_THROW(train_concept(init, {}, short_training(1), p), ContractError);
  auto no_placeholder = *data_;
  no_placeholder[0].prompt = tokenize("a photo of a cat");
  EXPECT_THROW(train_concept(init, no_placeholder, short_training(1), p), ContractError);
}

TEST_F(TrainingTest, TrainedConceptTouchesNonConceptTokens) {
  const auto& p = default_pipeline();
  const auto r = train_concept(init_concept("bear", "teddy", p), *data_, short_training(400), p);
  const auto ep = p.encoder().encode("a photo of a S*", {{"S*", r.concept_state.embedding}});
  const auto report = gate_report(p, ep, r.concept_state, {0.75, 0.1});
  double leak = 0.0;
  for (Eigen::Index m = 0; m < 4; ++m) leak = std::max(leak, std::abs(report.ratios(m)));
  EXPECT_GT(leak, 0.01);
  EXPECT_GT(report.gates(4), 0.5);
}

// ---------------------------------------------------------------------------
// Conditioning and key-locking

TEST(ConditionPrompt, NoConceptsIsBaseConditioning) {
  const auto& p = default_pipeline();
  const auto tokens = tokenize("a photo of a cat");
  const auto out = condition_prompt(p, tokens, {}, ConditionOptions{});
  const auto base = p.denoiser().condition_base(p.encoder().encode(tokens));
  for (std::size_t l = 0; l < base.size(); ++l) {
    EXPECT_TRUE(out.conditioning[l].keys == base[l].keys);
    EXPECT_TRUE(out.conditioning[l].values == base[l].values);
  }
}

TEST(ConditionPrompt, SaturatedLocalLockHitsSuperclassKey) {
  const auto& p = default_pipeline();
  Concept c = init_concept("bear", "teddy", p);
  auto rng = test::rng_for(104);
  c.embedding += 0.2 * test::random_vector(32, rng);
  const auto tokens = tokenize("a photo of a S*");
  c.i_star = p.encoder().encode(tokens, {{"S*", c.embedding}}).encodings.row(4).transpose();
  ConditionOptions opts;
  opts.tau = 0.01;
  const BoundConcept b{&c, "S*", {}};
  const auto out = condition_prompt(p, tokens, {&b, 1}, opts);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_LE(test::rel_err(out.conditioning[l].keys.row(4).transpose(), c.key_targets[l]), 1e-8);
  }
}

TEST(ConditionPrompt, LockNoneKeepsBaseKeys) {
  const auto& p = default_pipeline();
  const Concept c = init_concept("bear", "teddy", p);
  const auto tokens = tokenize("a photo of a S*");
  ConditionOptions opts;
  opts.lock = LockMode::kNone;
  const BoundConcept b{&c, "S*", {}};
  const auto out = condition_prompt(p, tokens, {&b, 1}, opts);
  for (int l = 0; l < 3; ++l) {
    const Mat base = out.prompt.encodings * p.layer(l).w_k.weight().transpose();
    EXPECT_TRUE(out.conditioning[static_cast<std::size_t>(l)].keys == base);
  }
}

TEST(GlobalKeyLock, KeysComeFromSuperclassPromptValuesFromConcept) {
  const auto& p = default_pipeline();
  Concept c = init_concept("bear", "teddy", p);
  auto rng = test::rng_for(105);
  for (auto& v : c.value_targets) v += test::random_vector(v.size(), rng);
  const auto tokens = tokenize("a S* on the beach");
  const auto cond = global_key_lock(p, tokens, c, 0.15);
  const auto super_ep = p.encoder().encode("a teddy on the beach");
  ConditionOptions local;
  const BoundConcept b{&c, "S*", {}};
  const auto local_cond = condition_prompt(p, tokens, {&b, 1}, local).conditioning;
  for (int l = 0; l < 3; ++l) {
    const auto lu = static_cast<std::size_t>(l);
    EXPECT_TRUE(cond[lu].keys == super_ep.encodings * p.layer(l).w_k.weight().transpose());
    EXPECT_TRUE(cond[lu].values == local_cond[lu].values);
  }
  ConditionOptions global;
  global.lock = LockMode::kGlobal;
  const auto via_options = condition_prompt(p, tokens, {&b, 1}, global).conditioning;
  EXPECT_TRUE(via_options[1].keys == cond[1].keys);
  EXPECT_THROW(global_key_lock(p, tokenize("a photo of a cat"), c, 0.15), ContractError);
}

TEST(GlobalKeyLock, IdentityMixLeavesOtherTokenKeysUnchanged) {
  const auto& p = identity_mix_pipeline();
  const Concept c = init_concept("bear", "teddy", p);
  const auto tokens = tokenize("a S* on the beach");
  const auto cond = global_key_lock(p, tokens, c, 0.15);
  const auto concept_ep = p.encoder().encode(tokens, {{"S*", c.embedding}});
  for (int l = 0; l < 3; ++l) {
    const Mat base = concept_ep.encodings * p.layer(l).w_k.weight().transpose();
    for (Eigen::Index m : {0, 2, 3, 4}) {
      EXPECT_TRUE(cond[static_cast<std::size_t>(l)].keys.row(m) == base.row(m));
    }
  }
}

TEST(ConditionPrompt, TwoConceptsMatchTokenwiseReference) {
  const auto& p = default_pipeline();
  auto rng = test::rng_for(106);
  Concept a = init_concept("bear", "teddy", p);
  Concept b = init_concept("pup", "dog", p);
  for (Concept* c : {&a, &b}) {
    c->embedding += 0.3 * test::random_vector(32, rng);
    for (auto& v : c->value_targets) v += test::random_vector(v.size(), rng);
  }
  const auto tokens = tokenize("a photo of a S1* and a S2*");
  a.i_star = p.encoder().encode(tokens, {{"S1*", a.embedding}, {"S2*", b.embedding}}).encodings.row(4).transpose();
  const std::vector<BoundConcept> bound{{&a, "S1*", {}}, {&b, "S2*", {}}};
  ConditionOptions opts;
  opts.beta = 0.675;
  const auto out = condition_prompt(p, tokens, bound, opts);
  ASSERT_TRUE(out.basis.has_value());
  const Mat& c_inv = p.metric().c_inv();
  for (int l = 0; l < 3; ++l) {
    const auto lu = static_cast<std::size_t>(l);
    const Mat keys = reference_projection(p.layer(l).w_k.weight(), out.prompt.encodings, c_inv, {a.i_star, b.i_star},
                                          {a.key_targets[lu], b.key_targets[lu]}, 0.675, 0.15);
    const Mat values = reference_projection(p.layer(l).w_v.weight(), out.prompt.encodings, c_inv,
                                            {a.i_star, b.i_star}, {a.value_targets[lu], b.value_targets[lu]}, 0.675,
                                            0.15);
    EXPECT_LE(test::rel_err(out.conditioning[lu].keys, keys), 1e-10);
    EXPECT_LE(test::rel_err(out.conditioning[lu].values, values), 1e-10);
  }
}

TEST(ConditionPrompt, SingleConceptMatchesTokenwiseReference) {
  const auto& p = default_pipeline();
  auto rng = test::rng_for(107);
  Concept c = init_concept("bear", "teddy", p);
  c.embedding += 0.3 * test::random_vector(32, rng);
  for (auto& v : c.value_targets) v += test::random_vector(v.size(), rng);
  const auto tokens = tokenize("a S* on the beach");
  const BoundConcept b{&c, "S*", {}};
  const auto out = condition_prompt(p, tokens, {&b, 1}, ConditionOptions{});
  for (int l = 0; l < 3; ++l) {
    const auto lu = static_cast<std::size_t>(l);
    const Mat values = reference_projection(p.layer(l).w_v.weight(), out.prompt.encodings, p.metric().c_inv(),
                                            {c.i_star}, {c.value_targets[lu]}, c.beta, 0.15);
    EXPECT_LE(test::rel_err(out.conditioning[lu].values, values), 1e-12);
  }
}

TEST(ConditionPrompt, RejectsDuplicateAndMalformedTokens) {
  const auto& p = default_pipeline();
  const Concept c = init_concept("bear", "teddy", p);
  const auto tokens = tokenize("a S* and S*");
  const std::vector<BoundConcept> twice{{&c, "S*", {}}, {&c, "S*", {}}};
  EXPECT_THROW(condition_prompt(p, tokens, twice, {}), ContractError);
  const std::vector<BoundConcept> bad{{&c, "bear", {}}};
  EXPECT_THROW(condition_prompt(p, tokens, bad, {}), ContractError);
}

TEST(CheckCompatible, NamesBothDimensions) {
  const auto& p = default_pipeline();
  Concept c = init_concept("bear", "teddy", p);
  c.embedding = Vec::Zero(24);
  try {
    check_compatible(c, p);
    FAIL();
  } catch (const LoadError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("24"), std::string::npos) << what;
    EXPECT_NE(what.find("32"), std::string::npos) << what;
  }
}

// ---------------------------------------------------------------------------
// Sampling

TEST(Generate, NoConceptsIsBaseSampling) {
  const auto& p = default_pipeline();
  GenerateRequest req;
  req.tokens = tokenize("a photo of a cat");
  req.seed = 21;
  const auto out = generate(p, req);
  const auto cond = p.denoiser().condition_base(p.encoder().encode(req.tokens));
  SampleOptions so;
  so.seed = 21;
  const auto& den = p.denoiser();
  const FeatureGrid ref = ddim_sample([&](const FeatureGrid& x, int t) { return den.predict_noise(x, t, cond); },
                                      [&](const FeatureGrid&, int) -> FeatureGrid { throw ContractError("unused"); },
                                      p.schedule(), so);
  EXPECT_TRUE(out.sample.data == ref.data);
}

TEST(Generate, ClosedGateSamplesFromNullSpaceEncodings) {
  // With the gate shut the edit contributes nothing beyond removing the i*
  // component: the result is the unedited model fed e_perp.
  const auto& p = default_pipeline();
  Concept c = init_concept("bear", "teddy", p);
  auto rng = test::rng_for(108);
  for (auto& v : c.value_targets) v += test::random_vector(v.size(), rng);
  GenerateRequest req;
  req.tokens = tokenize("a photo of a S*");
  req.concepts = {BoundConcept{&c, "S*", {}}};
  req.options.beta = 1e6;
  const auto out = generate(p, req);
  for (const auto& g : out.gates) EXPECT_EQ(g.report.gates.maxCoeff(), 0.0);

  EncodedPrompt ep = p.encoder().encode(req.tokens, {{"S*", c.embedding}});
  for (Eigen::Index m = 0; m < ep.encodings.rows(); ++m) {
    ep.encodings.row(m) = project_orthogonal(Vec(ep.encodings.row(m).transpose()), c.i_star, p.metric()).transpose();
  }
  const auto cond = p.denoiser().condition_base(ep);
  SampleOptions so;
  so.seed = req.seed;
  const auto& den = p.denoiser();
  const FeatureGrid ref = ddim_sample([&](const FeatureGrid& x, int t) { return den.predict_noise(x, t, cond); },
                                      [&](const FeatureGrid& x, int t) { return den.predict_noise(x, t, cond); },
                                      p.schedule(), so);
  EXPECT_LE(test::rel_err(out.sample.data, ref.data), 1e-8);
}

TEST(Generate, RejectsEmptyPrompt) {
  EXPECT_THROW(generate(default_pipeline(), GenerateRequest{}), ContractError);
}

// ---------------------------------------------------------------------------
// Diagnostics

TEST(Mismatch, IdentityMixClosesTheTrainEvalGap) {
  const auto& p = identity_mix_pipeline();
  const auto data = synthetic_dataset(p, "teddy", 6);
  const auto cfg = short_training(60);
  const auto r = reproduce_mismatch(data, cfg, p, "teddy");
  EXPECT_LT(std::abs(r.gap()), 1e-6);
  const auto again = reproduce_mismatch(data, cfg, p, "teddy");
  EXPECT_EQ(r.loss_a_train, again.loss_a_train);
  EXPECT_EQ(r.loss_a_eval, again.loss_a_eval);
  EXPECT_EQ(r.loss_b, again.loss_b);
}

TEST(Mismatch, ClosedFormOnPlaceholderRowEqualsReplacement) {
  // Metric orthogonality of distinct words makes the closed-form edit act on
  // the placeholder row only.
  const auto& p = identity_mix_pipeline();
  const Concept c = init_concept("bear", "teddy", p);
  auto rng = test::rng_for(109);
  std::vector<Vec> values = c.value_targets;
  for (auto& v : values) v += test::random_vector(v.size(), rng);
  const auto ep = p.encoder().encode("a photo of a S*", {{"S*", c.embedding}});
  const auto replaced = condition_replaced(p, ep, 4, c.key_targets, values);
  const auto closed = condition_closed_form(p, ep, c.i_star, c.key_targets, values);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_LE(test::rel_err(replaced[l].values, closed[l].values), 1e-10);
    EXPECT_LE(test::rel_err(replaced[l].keys, closed[l].keys), 1e-10);
  }
}

}  // namespace
}  // namespace klr
