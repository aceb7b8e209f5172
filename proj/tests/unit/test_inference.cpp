#include <gtest/gtest.h>

#include <algorithm>

#include "ebsal/inference.hpp"

using namespace ebsal;

namespace {

using Net = Model<double, Generator<double>>;

Net small_model(std::uint64_t seed) {
  GeneratorConfig c;
  c.height = c.width = 32;
  c.encoder = EncoderKind::conv;
  c.latent_dim = 4;
  c.decoder_init_std = 0.2;
  auto rng = make_rng(seed);
  Net m{EbmPrior<double>::initialized(4, 8, 1.0, PriorMode::ebm, rng, 0.1), Generator<double>::initialized(c, rng)};
  m.generator.head.bias[0] = 0.5;
  return m;
}

Tensor<double> image(std::uint64_t seed) {
  auto rng = make_rng(seed);
  Tensor<double> t({3, 32, 32});
  for (auto& v : t.storage()) v = uniform(rng);
  return t;
}

LangevinConfig sampler(std::uint64_t stream) {
  LangevinConfig c;
  c.steps = 5;
  c.step_size = 0.4;
  c.stream = stream;
  return c;
}

}  // namespace

TEST(PredictStochastic, SingleSampleHasZeroUncertainty) {
  const auto m = small_model(1);
  const auto b = predict_stochastic(m, image(2), 1, sampler(3));
  ASSERT_EQ(b.samples.size(), 1u);
  for (double v : b.uncertainty.data) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(b.mean_map.data, b.samples[0].data);
}

TEST(PredictStochastic, DeadLatentGivesIdenticalSamples) {
  auto m = small_model(1);
  auto& w = m.generator.inject.weight;  // [c_out, c_in, k, k], latent channels last
  const std::size_t co = w.dim(0), ci = w.dim(1), kk = w.dim(2) * w.dim(3), d = 4;
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = ci - d; i < ci; ++i)
      for (std::size_t k = 0; k < kk; ++k) w[(o * ci + i) * kk + k] = 0;
  const auto b = predict_stochastic(m, image(2), 6, sampler(3));
  for (const auto& s : b.samples) EXPECT_EQ(s.data, b.samples[0].data);
  for (double v : b.uncertainty.data) EXPECT_EQ(v, 0.0);
}

TEST(PredictStochastic, VarianceRecomputedFromSamples) {
  const auto m = small_model(4);
  const auto b = predict_stochastic(m, image(5), 10, sampler(6));
  ASSERT_EQ(b.samples.size(), 10u);
  double max_var = 0;
  for (std::size_t i = 0; i < b.mean_map.data.size(); ++i) {
    double mean = 0, var = 0;
    for (const auto& s : b.samples) mean += s.data[i] / 10;
    for (const auto& s : b.samples) var += (s.data[i] - mean) * (s.data[i] - mean) / 10;
    EXPECT_NEAR(b.mean_map.data[i], mean, 1e-14);
    EXPECT_NEAR(b.uncertainty.data[i], var, 1e-14);
    max_var = std::max(max_var, var);
  }
  EXPECT_GT(max_var, 0.0);
}

TEST(PredictStochastic, RangesAndShape) {
  const auto m = small_model(7);
  const auto b = predict_stochastic(m, image(8), 8, sampler(9));
  EXPECT_EQ(b.mean_map.height, 32u);
  EXPECT_EQ(b.mean_map.width, 32u);
  EXPECT_EQ(b.mean_map.channels, 1u);
  for (double v : b.mean_map.data) EXPECT_TRUE(v >= 0 && v <= 1);
  for (double v : b.uncertainty.data) EXPECT_TRUE(v >= 0 && v <= 0.25);
}

TEST(PredictStochastic, OrderOfSamplesDoesNotMatter) {
  const auto m = small_model(7);
  auto b = predict_stochastic(m, image(8), 7, sampler(9));
  std::reverse(b.samples.begin(), b.samples.end());
  std::rotate(b.samples.begin(), b.samples.begin() + 3, b.samples.end());
  Image mean, var;
  summarize_samples(b.samples, mean, var);
  for (std::size_t i = 0; i < mean.data.size(); ++i) {
    EXPECT_NEAR(mean.data[i], b.mean_map.data[i], 1e-15);
    EXPECT_NEAR(var.data[i], b.uncertainty.data[i], 1e-15);
  }
}

TEST(PredictStochastic, SameStreamSameResult) {
  const auto m = small_model(7);
  EXPECT_EQ(predict_stochastic(m, image(8), 4, sampler(9)).mean_map.data,
            predict_stochastic(m, image(8), 4, sampler(9)).mean_map.data);
}

TEST(PredictStochastic, ZeroSamplesRejected) {
  const auto m = small_model(7);
  EXPECT_THROW(predict_stochastic(m, image(8), 0, sampler(9)), std::invalid_argument);
}

TEST(PredictPoint, EqualsClampedForwardAtZero) {
  const auto m = small_model(10);
  const auto img = image(11);
  Tape<double> tape;
  Graph<double> g{tape, false};
  const auto ref = m.generator.forward(g, img, tape.constant(Tensor<double>({4})));
  const auto p = predict_point(m, img);
  for (std::size_t i = 0; i < p.data.size(); ++i) EXPECT_NEAR(p.data[i], std::clamp(ref.value()[i], 0.0, 1.0), 1e-12);
  EXPECT_EQ(predict_point(m, img).data, p.data);
}
