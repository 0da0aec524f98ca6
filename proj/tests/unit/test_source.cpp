#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "bbgc/parallel.hpp"
#include "bbgc/rng.hpp"
#include "bbgc/source.hpp"
#include "fixtures.hpp"

using namespace bbgc;

namespace {

SourceSpec synthetic_spec(std::uint32_t latent_dim, std::uint32_t embed_dim, double mass, double spread,
                          std::uint64_t seed, std::size_t components = 20) {
  SourceSpec spec;
  spec.kind = SourceKind::synthetic;
  spec.latent_dim = latent_dim;
  spec.embed_dim = embed_dim;
  spec.seed = seed;
  spec.parameters = {{"background", {{"components", components}, {"spread", 0.25}}},
                     {"planted", nlohmann::json::array({{{"mass", mass}, {"spread", spread}}})}};
  return spec;
}

// |observed - expected| within 5 binomial standard deviations.
void expect_binomial(std::size_t hits, std::size_t n, double p) {
  const double sd = std::sqrt(n * p * (1.0 - p));
  EXPECT_NEAR(static_cast<double>(hits), n * p, 5.0 * sd + 1e-9) << hits << " of " << n << " at p=" << p;
}

}  // namespace

TEST(Rng, DeriveSeedSeparatesPurposes) {
  EXPECT_NE(derive_seed(1, "anchors"), derive_seed(1, "pool"));
  EXPECT_NE(derive_seed(1, "anchors"), derive_seed(2, "anchors"));
  EXPECT_EQ(derive_seed(7, "pool"), derive_seed(7, "pool"));
}

TEST(Rng, UniformAndNormalMoments) {
  CounterRng rng(123);
  const std::size_t n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double g = rng.normal();
    sn += g;
    sn2 += g * g;
  }
  EXPECT_NEAR(su / n, 0.5, 5 * std::sqrt(1.0 / 12 / n));
  EXPECT_NEAR(sn / n, 0.0, 5 / std::sqrt(double(n)));
  EXPECT_NEAR(sn2 / n, 1.0, 5 * std::sqrt(2.0 / n));
}

TEST(Latents, IndexAddressableAndWorkerInvariant) {
  std::vector<LatentCode> one;
  std::vector<LatentCode> many;
  {
    ScopedWorkerCount w(1);
    one = sample_latents(5000, 3, 99);
  }
  {
    ScopedWorkerCount w(8);
    many = sample_latents(5000, 3, 99);
  }
  EXPECT_EQ(one, many);
  const auto tail = sample_latents(10, 3, 99, 4990);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(tail[i], one[4990 + i]);
    EXPECT_EQ(sample_latent(3, 99, 4990 + i), one[4990 + i]);
  }
}

TEST(Latents, StandardNormalMomentsAndF32Rounding) {
  const std::size_t n = 100000;
  const auto z = sample_latents(n, 2, 5);
  double s = 0, s2 = 0, cross = 0;
  for (const auto& code : z) {
    for (double v : code.values()) ASSERT_EQ(v, static_cast<double>(static_cast<float>(v)));
    s += code[0];
    s2 += code[0] * code[0];
    cross += code[0] * code[1];
  }
  EXPECT_NEAR(s / n, 0.0, 5 / std::sqrt(double(n)));
  EXPECT_NEAR(s2 / n, 1.0, 5 * std::sqrt(2.0 / n));
  EXPECT_NEAR(cross / n, 0.0, 5 / std::sqrt(double(n)));
}

class PlantedMass : public ::testing::TestWithParam<std::pair<std::uint32_t, double>> {};

TEST_P(PlantedMass, PriorMassMatchesConfiguredMass) {
  const auto [latent_dim, mass] = GetParam();
  const auto spec = synthetic_spec(latent_dim, 8, mass, 0.05, 17);
  const auto model = SyntheticModel::from_spec(spec);
  const std::size_t n = 200000;
  const auto z = sample_latents(n, latent_dim, 3);
  std::size_t hits = 0;
  for (const auto& code : z) hits += model.planted_index(code, spec.seed) == 0 ? 1 : 0;
  expect_binomial(hits, n, mass);
}

INSTANTIATE_TEST_SUITE_P(Dims, PlantedMass,
                         ::testing::Values(std::pair<std::uint32_t, double>{1, 0.01},
                                           std::pair<std::uint32_t, double>{2, 0.01},
                                           std::pair<std::uint32_t, double>{2, 0.2},
                                           std::pair<std::uint32_t, double>{6, 0.05}));

TEST(Synthetic, PlantedLatentLandsInItsRegion) {
  const auto spec = synthetic_spec(4, 8, 0.01, 0.05, 23);
  const auto model = SyntheticModel::from_spec(spec);
  for (std::uint64_t i = 0; i < 200; ++i) {
    const auto z = model.planted_latent(0, spec.seed, i);
    EXPECT_EQ(model.planted_index(z, spec.seed), 0u);
    EXPECT_EQ(model.component_of(z, spec.seed), 0u);
  }
}

TEST(Synthetic, ZeroSpreadEmbedsExactlyAtCentre) {
  const auto spec = synthetic_spec(2, 16, 0.3, 0.0, 29);
  const auto model = SyntheticModel::from_spec(spec);
  const auto z = model.planted_latent(0, spec.seed, 0);
  const auto e = model.embed(z, spec.seed);
  const auto& c = model.planted()[0].center;
  for (std::size_t k = 0; k < c.size(); ++k) EXPECT_EQ(e[k], c[k]);
}

TEST(Synthetic, FullMassPlantsEverything) {
  SourceSpec spec = synthetic_spec(2, 8, 1.0, 0.0, 31);
  spec.parameters["background"] = nlohmann::json::array();
  const auto model = SyntheticModel::from_spec(spec);
  for (const auto& z : sample_latents(2000, 2, 1)) EXPECT_EQ(model.component_of(z, spec.seed), 0u);
}

TEST(Synthetic, SpreadControlsDistanceToCentre) {
  const auto spec = synthetic_spec(2, 128, 0.01, 0.05, 37);
  const auto model = SyntheticModel::from_spec(spec);
  const auto c = EmbeddingVector::from_unit(model.planted()[0].center, 1e-6);
  const double expect = std::atan(0.05) / std::numbers::pi;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const auto e = model.embed(model.planted_latent(0, spec.seed, i), spec.seed);
    EXPECT_NEAR(cosine_distance(e, c), expect, 0.3 * expect);
  }
}

TEST(Synthetic, BackgroundFollowsWeights) {
  SourceSpec spec = synthetic_spec(3, 4, 0.0, 0.0, 41);
  spec.parameters["planted"] = nlohmann::json::array();
  spec.parameters["background"] = nlohmann::json::array(
      {{{"center", {1.0, 0.0, 0.0, 0.0}}, {"spread", 0.1}, {"weight", 1.0}},
       {{"center", {0.0, 1.0, 0.0, 0.0}}, {"spread", 0.1}, {"weight", 3.0}}});
  const auto model = SyntheticModel::from_spec(spec);
  const std::size_t n = 100000;
  std::size_t first = 0;
  for (const auto& z : sample_latents(n, 3, 2)) first += model.component_of(z, spec.seed) == 0 ? 1 : 0;
  expect_binomial(first, n, 0.25);
}

TEST(Synthetic, EmbeddingIsPureFunctionOfLatentAndSeed) {
  const auto spec = synthetic_spec(2, 32, 0.05, 0.05, 43);
  const auto z = sample_latents(500, 2, 8);
  const auto a = generate(spec, z);
  const auto b = generate(spec, z);
  for (std::size_t i = 0; i < z.size(); ++i) {
    EXPECT_EQ(a[i].embedding, b[i].embedding);
    EXPECT_EQ(a[i].latent, z[i]);
    for (double v : a[i].embedding.values()) ASSERT_EQ(v, static_cast<double>(static_cast<float>(v)));
  }
}

TEST(Synthetic, RejectsBadConfiguration) {
  SourceSpec spec = synthetic_spec(2, 8, 0.01, 0.05, 1);
  spec.parameters["planted"][0]["center"] = {1.0, 0.0};
  EXPECT_THROW((void)SyntheticModel::from_spec(spec), Error);
  spec = synthetic_spec(2, 8, 1.5, 0.05, 1);
  EXPECT_THROW((void)SyntheticModel::from_spec(spec), Error);
  spec = synthetic_spec(2, 8, 0.01, 0.05, 1);
  spec.embed_dim = 1;
  EXPECT_THROW(spec.validate(), Error);
  const auto model = SyntheticModel::from_spec(synthetic_spec(2, 8, 0.01, 0.05, 1));
  EXPECT_THROW((void)model.component_of(LatentCode({0.0, 0.0, 0.0}), 1), Error);
}

TEST(SourceSpec, JsonRoundTrip) {
  const auto spec = synthetic_spec(2, 8, 0.01, 0.05, 77);
  const auto back = SourceSpec::from_json(spec.to_json());
  EXPECT_EQ(back.kind, spec.kind);
  EXPECT_EQ(back.latent_dim, 2u);
  EXPECT_EQ(back.embed_dim, 8u);
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.parameters, spec.parameters);
  EXPECT_THROW((void)SourceSpec::from_json({{"kind", "gan"}, {"latent_dim", 2}, {"embed_dim", 8}}), Error);
}
