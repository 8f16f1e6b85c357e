#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <random>

#include "metagait/tensor.hpp"
#include "test_support.hpp"

using namespace metagait;
using testsupport::random_parameter;
using testsupport::random_tensor;

namespace {

Tensor vec(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor::from_values({n}, std::move(v));
}

}  // namespace

TEST_CASE("conv1d hand cases") {
  // Kernels are (C_out, C_in, K); inputs (C_in, L).
  Tensor x = Tensor::from_values({1, 3}, {1, 2, 3});

  SECTION("identity kernel") {
    Tensor k = Tensor::from_values({1, 1, 3}, {0, 1, 0});
    CHECK(conv1d(x, k).values() == std::vector<double>{1, 2, 3});
  }
  SECTION("box kernel with zero padding") {
    Tensor k = Tensor::from_values({1, 1, 3}, {1, 1, 1});
    CHECK(conv1d(x, k).values() == std::vector<double>{3, 6, 5});
  }
  SECTION("pointwise kernel") {
    Tensor k = Tensor::from_values({1, 1, 1}, {2});
    CHECK(conv1d(x, k).values() == std::vector<double>{2, 4, 6});
  }
  SECTION("even kernel rejected") {
    Tensor k = Tensor::from_values({1, 1, 2}, {1, 1});
    CHECK_THROWS_AS(conv1d(x, k), std::invalid_argument);
  }
  SECTION("channel mismatch rejected") {
    Tensor k = Tensor::from_values({1, 2, 3}, {0, 1, 0, 0, 1, 0});
    CHECK_THROWS_AS(conv1d(x, k), std::invalid_argument);
  }
}

TEST_CASE("conv2d matches loop oracle") {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({2, 5, 4}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  Tensor y = conv2d(x, k);
  REQUIRE(y.shape() == Shape{3, 5, 4});
  // Brute-force cross-correlation with zero padding.
  for (std::int64_t co = 0; co < 3; ++co)
    for (std::int64_t r = 0; r < 5; ++r)
      for (std::int64_t c = 0; c < 4; ++c) {
        double acc = 0;
        for (std::int64_t ci = 0; ci < 2; ++ci)
          for (std::int64_t u = 0; u < 3; ++u)
            for (std::int64_t v = 0; v < 3; ++v) {
              const std::int64_t rr = r + u - 1, cc = c + v - 1;
              if (rr < 0 || rr >= 5 || cc < 0 || cc >= 4) continue;
              acc += x.at({ci, rr, cc}) * k.at({co, ci, u, v});
            }
        CHECK_THAT(y.at({co, r, c}), Catch::Matchers::WithinAbs(acc, 1e-12));
      }
}

TEST_CASE("dense hand cases") {
  SECTION("identity") {
    Tensor w = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    CHECK(dense(vec({3, -1}), w).values() == std::vector<double>{3, -1});
  }
  SECTION("hand matmul") {
    Tensor w = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    CHECK(dense(vec({1, 1}), w).values() == std::vector<double>{3, 7});
  }
  SECTION("annihilation") {
    Tensor w = Tensor::zeros({3, 2});
    CHECK(dense(vec({5, 7}), w).values() == std::vector<double>{0, 0, 0});
  }
  SECTION("extent mismatch rejected") {
    Tensor w = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK_THROWS_AS(dense(vec({1, 1}), w), std::invalid_argument);
  }
}

TEST_CASE("leaky_relu fixed points") {
  Tensor y = leaky_relu(vec({2.0, -1.0, 0.0}));
  CHECK(y.values()[0] == 2.0);
  CHECK(y.values()[1] == -0.01);
  CHECK(y.values()[2] == 0.0);
}

TEST_CASE("sigmoid values and antisymmetry") {
  CHECK(sigmoid(Tensor::scalar(0)).scalar_value() == 0.5);
  const double sp = sigmoid(Tensor::scalar(3.7)).scalar_value();
  const double sm = sigmoid(Tensor::scalar(-3.7)).scalar_value();
  CHECK_THAT(sp + sm, Catch::Matchers::WithinAbs(1.0, 1e-12));
  CHECK_THAT(sigmoid(Tensor::scalar(10)).scalar_value(),
             Catch::Matchers::WithinAbs(0.9999546, 1e-7));
  // Extreme inputs stay finite.
  CHECK(sigmoid(Tensor::scalar(-1000)).scalar_value() == 0.0);
  CHECK(sigmoid(Tensor::scalar(1000)).scalar_value() == 1.0);
}

TEST_CASE("reduce hand cases") {
  CHECK(reduce_mean(vec({1, 2, 3}), {0}).scalar_value() == 2.0);
  CHECK(reduce_max(vec({1, 5, 2}), {0}).scalar_value() == 5.0);

  // 2x2x2x2 tensor, channel 0 holds 1..8: mean over (T,H,W) of channel 0 is 4.5.
  std::vector<double> v(16);
  for (int i = 0; i < 8; ++i) v[static_cast<std::size_t>(i)] = i + 1;
  for (int i = 8; i < 16; ++i) v[static_cast<std::size_t>(i)] = 100 + i;
  Tensor x = Tensor::from_values({2, 2, 2, 2}, v);
  Tensor m = reduce_mean(x, {1, 2, 3});
  REQUIRE(m.shape() == Shape{2, 1, 1, 1});
  double brute = 0;
  for (int i = 0; i < 8; ++i) brute += v[static_cast<std::size_t>(i)];
  brute /= 8;
  CHECK(m.values()[0] == brute);
  CHECK(brute == 4.5);

  SECTION("empty axis set is identity") {
    Tensor id = reduce_mean(x, {});
    CHECK(id.shape() == x.shape());
    CHECK(id.values() == x.values());
  }
  SECTION("axis out of range rejected") {
    CHECK_THROWS_AS(reduce_mean(x, {4}), std::invalid_argument);
  }
  SECTION("zero extents cannot be constructed") {
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), std::invalid_argument);
  }
}

TEST_CASE("elementwise ops and broadcasting") {
  Tensor a = vec({1, 2});
  Tensor b = vec({3, 4});
  CHECK(add(a, b).values() == std::vector<double>{4, 6});

  std::mt19937_64 rng(3);
  Tensor x = random_tensor({3, 2, 2, 2}, rng);
  SECTION("mul by ones is identity") {
    CHECK(mul(x, Tensor::full(x.shape(), 1.0)).values() == x.values());
  }
  SECTION("per-channel broadcast matches loop oracle") {
    Tensor att = random_tensor({3, 1, 1, 1}, rng);
    Tensor y = mul(att, x);
    REQUIRE(y.shape() == x.shape());
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t t = 0; t < 2; ++t)
        for (std::int64_t h = 0; h < 2; ++h)
          for (std::int64_t w = 0; w < 2; ++w)
            CHECK(y.at({c, t, h, w}) == att.at({c, 0, 0, 0}) * x.at({c, t, h, w}));
  }
  SECTION("non-broadcastable shapes rejected") {
    CHECK_THROWS_AS(add(vec({1, 2}), vec({1, 2, 3})), std::invalid_argument);
  }
  SECTION("scalar broadcasts against anything") {
    Tensor y = add(x, Tensor::scalar(1.0));
    CHECK(y.at({0, 0, 0, 0}) == x.at({0, 0, 0, 0}) + 1.0);
  }
}

TEST_CASE("reduce-mean then broadcast-mul is idempotent on constants") {
  Tensor x = Tensor::full({2, 3, 4, 5}, 0.7);
  Tensor m = reduce_mean(x, {1, 2, 3});
  Tensor y = mul(m, Tensor::full(x.shape(), 1.0));
  REQUIRE(y.shape() == x.shape());
  for (double v : y.values()) CHECK_THAT(v, Catch::Matchers::WithinAbs(0.7, 1e-15));
}

TEST_CASE("backward hand cases") {
  SECTION("power rule") {
    Tensor x = Tensor::parameter({1}, {3.0});
    Tape tape;
    Tensor loss = mul(x, x);
    tape.backward(loss);
    CHECK_THAT(x.grad()[0], Catch::Matchers::WithinAbs(6.0, 1e-12));
  }
  SECTION("sigmoid slope at zero") {
    Tensor x = Tensor::parameter({4}, {0, 0, 0, 0});
    Tape tape;
    Tensor loss = reduce_sum(sigmoid(x), {0});
    tape.backward(loss);
    for (double g : x.grad()) CHECK_THAT(g, Catch::Matchers::WithinAbs(0.25, 1e-12));
  }
  SECTION("non-scalar loss rejected") {
    Tensor x = Tensor::parameter({2}, {1, 2});
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
  SECTION("backward without tape rejected") {
    Tensor x = Tensor::parameter({1}, {1});
    CHECK_THROWS_AS(backward(x), std::invalid_argument);
  }
}

TEST_CASE("grad_check on affine program is near machine precision") {
  std::mt19937_64 rng(5);
  Tensor w = random_parameter({3, 3}, rng);
  Tensor x = random_tensor({3}, rng);
  auto program = [&] { return reduce_sum(dense(x, w), {0}); };
  CHECK(grad_check(program, std::vector<Tensor>{w}) < 1e-8);
}

TEST_CASE("grad_check across the op vocabulary") {
  std::mt19937_64 rng(7);

  SECTION("conv1d -> leaky_relu -> mean pipeline") {
    Tensor x = random_parameter({2, 7}, rng);
    Tensor k = random_parameter({2, 2, 3}, rng);
    auto program = [&] {
      return reduce_mean(leaky_relu(conv1d(x, k)), {0, 1});
    };
    CHECK(grad_check(program, std::vector<Tensor>{x, k}) < 1e-4);
  }
  SECTION("conv2d batched") {
    Tensor x = random_parameter({2, 3, 4, 5}, rng);
    Tensor k = random_parameter({2, 2, 3, 3}, rng);
    auto program = [&] { return reduce_mean(conv2d(x, k), {0, 1, 2, 3}); };
    CHECK(grad_check(program, std::vector<Tensor>{x, k}) < 1e-4);
  }
  SECTION("sigmoid/exp/log/sqrt chain") {
    Tensor x = random_parameter({6}, rng, 0.5, 2.0);
    auto program = [&] {
      return reduce_sum(metagait::sqrt(metagait::log(add_scalar(metagait::exp(sigmoid(x)), 1.0))),
                        {0});
    };
    CHECK(grad_check(program, std::vector<Tensor>{x}) < 1e-4);
  }
  SECTION("pow with tensor exponent") {
    Tensor x = random_parameter({5}, rng, 0.5, 2.0);
    Tensor p = Tensor::parameter({1}, {2.7});
    auto program = [&] { return reduce_mean(metagait::pow(x, p), {0}); };
    CHECK(grad_check(program, std::vector<Tensor>{x, p}) < 1e-4);
  }
  SECTION("reduce max routes to first maximal entry") {
    Tensor x = Tensor::parameter({4}, {1.0, 5.0, 5.0, 2.0});
    Tape tape;
    Tensor y = reduce_max(x, {0});
    tape.backward(y);
    CHECK(x.grad() == std::vector<double>{0, 1, 0, 0});
  }
  SECTION("max away from ties") {
    Tensor x = random_parameter({3, 4}, rng);
    auto program = [&] { return reduce_sum(reduce_max(x, {1}), {0, 1}); };
    CHECK(grad_check(program, std::vector<Tensor>{x}) < 1e-4);
  }
  SECTION("broadcast add/mul/sub") {
    Tensor a = random_parameter({3, 1, 2}, rng);
    Tensor b = random_parameter({1, 4, 2}, rng);
    auto program = [&] {
      return reduce_sum(mul(sub(a, b), add(a, b)), {0, 1, 2});
    };
    CHECK(grad_check(program, std::vector<Tensor>{a, b}) < 1e-4);
  }
  SECTION("reshape, slice, permute, stack") {
    Tensor a = random_parameter({2, 6}, rng);
    Tensor b = random_parameter({3, 4}, rng);
    auto program = [&] {
      Tensor ra = reshape(a, {3, 4});
      Tensor sa = slice(ra, 1, 1, 2);
      Tensor pb = permute(slice(b, 1, 0, 2), {1, 0});
      std::vector<Tensor> parts{sa, permute(pb, {1, 0})};
      return reduce_sum(stack0(parts), {0, 1, 2});
    };
    CHECK(grad_check(program, std::vector<Tensor>{a, b}) < 1e-4);
  }
  SECTION("max_pool2x2") {
    Tensor x = random_parameter({2, 2, 5, 6}, rng);
    auto program = [&] { return reduce_mean(max_pool2x2(x), {0, 1, 2, 3}); };
    CHECK(grad_check(program, std::vector<Tensor>{x}) < 1e-4);
    Tensor y = max_pool2x2(x);
    CHECK(y.shape() == Shape{2, 2, 2, 3});
  }
  SECTION("clamp_min and relu") {
    Tensor x = random_parameter({8}, rng);
    auto program = [&] {
      return reduce_sum(add(relu(x), clamp_min(x, 0.25)), {0});
    };
    CHECK(grad_check(program, std::vector<Tensor>{x}) < 1e-4);
  }
  SECTION("entry subsampling returns an error from the sampled subset") {
    Tensor w = random_parameter({10, 10}, rng);
    Tensor x = random_tensor({10}, rng);
    auto program = [&] { return reduce_sum(dense(x, w), {0}); };
    GradCheckOptions opt;
    opt.max_entries_per_param = 7;
    CHECK(grad_check(program, std::vector<Tensor>{w}, opt) < 1e-8);
  }
}

TEST_CASE("forward evaluation is bitwise deterministic") {
  std::mt19937_64 rng(23);
  Tensor x = random_tensor({3, 2, 6, 5}, rng);
  Tensor k = random_tensor({4, 3, 3, 3}, rng);
  auto run = [&] {
    return reduce_mean(sigmoid(conv2d(x, k)), {0, 1, 2, 3}).scalar_value();
  };
  const double a = run();
  const double b = run();
  CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
}

TEST_CASE("repeated backward on the same tape is rejected") {
  Tensor x = Tensor::parameter({1}, {2.0});
  Tape tape;
  Tensor loss = mul(x, x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::invalid_argument);
}

TEST_CASE("grad accumulates across fresh tapes deterministically") {
  Tensor x = Tensor::parameter({1}, {3.0});
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    Tensor loss = mul(x, x);
    tape.backward(loss);
  }
  CHECK_THAT(x.grad()[0], Catch::Matchers::WithinAbs(12.0, 1e-12));
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}
