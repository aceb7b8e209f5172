#include <gtest/gtest.h>

#include <sstream>

#include "ebsal/tensor/checkpoint.hpp"
#include "ebsal/tensor/ops.hpp"
#include "ebsal/tensor/tape.hpp"
#include "oracles/finite_difference.hpp"

using namespace ebsal;
namespace o = ebsal::ops;

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(Tensor<double>(Shape{0, 3}), DimensionError);
  Tensor<double> t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
  t.set_requires_grad(true);
  EXPECT_EQ(t.grad().size(), 6u);
}

TEST(Tensor, CheckFiniteRaises) {
  Tensor<double> t({2}, {1.0, std::nan("")});
  EXPECT_THROW(t.check_finite("t"), NumericError);
}

TEST(Matmul, IdentityAndHandValues) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({3, 2}, {1, 2, 3, 4, 5, 6}));
  auto y = o::matmul(tape.constant(Tensor<double>::identity(3)), x);
  EXPECT_EQ(y.value(), x.value());
  auto c = o::matmul(tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4})), tape.constant(Tensor<double>({2, 1}, {1, 1})));
  EXPECT_EQ(c.value().storage(), (std::vector<double>{3, 7}));
  EXPECT_THROW(o::matmul(x, x), DimensionError);
}

TEST(Conv2d, IdentityKernelAndAveraging) {
  Tape<double> tape;
  auto rng = make_rng(1);
  auto x = tape.constant(oracle::random_tensor(rng, {1, 5, 5}));
  auto y = o::conv2d(x, tape.constant(Tensor<double>::full({1, 1, 1, 1}, 1.0)), 1, std::size_t{0});
  EXPECT_EQ(y.value(), x.value());

  auto flat = tape.constant(Tensor<double>::full({1, 6, 6}, 2.5));
  auto avg = o::conv2d(flat, tape.constant(Tensor<double>::full({1, 1, 3, 3}, 1.0 / 9)), 1, std::size_t{1});
  for (std::size_t yy = 1; yy < 5; ++yy)
    for (std::size_t xx = 1; xx < 5; ++xx) EXPECT_NEAR(avg.value()[yy * 6 + xx], 2.5, 1e-12);
}

TEST(Conv2d, NonIntegralOutputRaises) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 6, 6}));
  auto k = tape.constant(Tensor<double>({1, 1, 3, 3}));
  EXPECT_THROW(o::conv2d(x, k, 2, std::size_t{1}), DimensionError);
  EXPECT_EQ(o::conv2d(x, k, 2, o::Padding{0, 1}).shape(), (Shape{1, 3, 3}));
  EXPECT_THROW(o::conv2d(x, tape.constant(Tensor<double>({1, 1, 2, 2})), 1, std::size_t{0}), DimensionError);
}

TEST(Elementwise, FixedPoints) {
  Tape<double> tape;
  EXPECT_EQ(o::gelu(tape.constant(Tensor<double>::scalar(0))).value()[0], 0.0);
  auto sm = o::softmax(tape.constant(Tensor<double>::full({5}, 3.0)), 0);
  for (double v : sm.value().data()) EXPECT_NEAR(v, 0.2, 1e-15);
  EXPECT_EQ(o::square_norm(tape.constant(Tensor<double>({2}, {3, 4}))).value()[0], 25.0);
  EXPECT_THROW(o::softmax(tape.constant(Tensor<double>({2, 2})), 2), DimensionError);
  EXPECT_THROW(o::add(tape.constant(Tensor<double>({2})), tape.constant(Tensor<double>({3}))), DimensionError);
}

TEST(Elementwise, GeluMatchesErfForm) {
  for (double x : {-3.0, -0.5, 0.7, 2.0}) {
    EXPECT_NEAR(o::detail::gelu_value(x), 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))), 1e-15);
  }
}

TEST(ConcatSplit, RoundTrip) {
  Tape<double> tape;
  auto rng = make_rng(2);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto a = tape.constant(oracle::random_tensor(rng, {2, 3, 4}));
    Shape sb{2, 3, 4};
    sb[axis] = 5;
    auto b = tape.constant(oracle::random_tensor(rng, sb));
    auto parts = o::split(o::concat<double>({a, b}, axis), axis, {a.shape()[axis], 5});
    EXPECT_EQ(parts[0].value(), a.value());
    EXPECT_EQ(parts[1].value(), b.value());
  }
}

TEST(Backward, TrivialLosses) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({3}, {1, -2, 5}));
  tape.backward(o::sum(x));
  for (double g : tape.grad(x)) EXPECT_EQ(g, 1.0);
  Tape<double> t2;
  auto y = t2.variable(Tensor<double>({3}, {1, -2, 5}));
  t2.backward(o::scale(o::square_norm(y), 0.5));
  EXPECT_EQ(t2.grad_tensor(y), y.value());
}

TEST(Backward, ErrorsOnBadLoss) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({3}));
  EXPECT_THROW(tape.backward(x), DimensionError);
  auto c = tape.constant(Tensor<double>::scalar(1));
  EXPECT_THROW(tape.backward(c), std::logic_error);
}

TEST(Backward, AccumulatesUntilZeroed) {
  Tensor<double> p({2}, {1, 2});
  p.set_requires_grad(true);
  for (int rep = 0; rep < 2; ++rep) {
    Tape<double> tape;
    tape.backward(o::sum(tape.leaf(p)));
  }
  EXPECT_EQ(p.grad()[0], 2.0);
  p.zero_grad();
  EXPECT_EQ(p.grad()[1], 0.0);
}

TEST(Backward, NonFiniteForwardRaises) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>::scalar(1e300));
  EXPECT_THROW(o::mul(x, x), NumericError);
}

TEST(Backward, MlpAgainstFiniteDifferences) {
  auto rng = make_rng(3);
  std::vector<Tensor<double>> in{oracle::random_tensor(rng, {4, 3}), oracle::random_tensor(rng, {3, 5}),
                                 oracle::random_tensor(rng, {5}), oracle::random_tensor(rng, {5, 1}),
                                 oracle::random_tensor(rng, {1})};
  auto f = [](Tape<double>&, const std::vector<Var<double>>& v) {
    auto h = o::gelu(o::add_row_bias(o::matmul(v[0], v[1]), v[2]));
    return o::square_norm(o::add_row_bias(o::matmul(h, v[3]), v[4]));
  };
  EXPECT_LT(oracle::gradient_check(f, in), 1e-5);
}

TEST(Checkpoint, RoundTripAndErrors) {
  Checkpoint ck;
  ck.meta = "{\"k\":1}";
  ck.add("a", Tensor<double>({2, 2}, {1, 2, 3, 4.5}));
  ck.add("b", Tensor<float>({1}, {0.25f}));
  EXPECT_THROW(ck.add("a", Tensor<double>({1})), CheckpointError);
  std::stringstream ss;
  write_checkpoint(ss, ck);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 8), "EBSALCKP");
  std::stringstream in(bytes);
  auto back = read_checkpoint(in);
  EXPECT_EQ(back.meta, ck.meta);
  Tensor<double> a({2, 2});
  back.load_into("a", a);
  EXPECT_EQ(a.storage(), (std::vector<double>{1, 2, 3, 4.5}));
  Tensor<double> wrong({4});
  EXPECT_THROW(back.load_into("a", wrong), CheckpointError);
  std::stringstream trunc(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_checkpoint(trunc), CheckpointError);
  std::stringstream bad("NOTACKPT");
  EXPECT_THROW(read_checkpoint(bad), CheckpointError);
}

TEST(Determinism, ForwardIsBitIdentical) {
  auto rng = make_rng(4);
  auto x = oracle::random_tensor(rng, {2, 8, 8});
  auto k = oracle::random_tensor(rng, {3, 2, 3, 3});
  auto run = [&] {
    Tape<double> tape;
    return o::gelu(o::conv2d(tape.ref(x), tape.ref(k), 1, std::size_t{1})).value();
  };
  EXPECT_EQ(run(), run());
}
