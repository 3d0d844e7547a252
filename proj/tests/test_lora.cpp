#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "bigtex/lora.hpp"
#include "bigtex/tensor.hpp"

using namespace bigtex;

TEST_CASE("fresh adapter leaves the base weight untouched") {
  std::mt19937_64 rng(1);
  auto base = TensorD::randn({8, 6}, 1.0, rng);
  auto adapter = init_adapter<double>(8, 6, 2, 16.0, rng, "w");
  auto eff = effective_weight(base, adapter);
  CHECK(eff.values() == base.values());  // bitwise, B = 0
}

TEST_CASE("adapter rank is validated") {
  std::mt19937_64 rng(2);
  CHECK_THROWS_AS(init_adapter<double>(8, 6, 4, 16.0, rng), ContractError);
  CHECK_THROWS_AS(init_adapter<double>(8, 6, 0, 16.0, rng), ContractError);
  auto ok = init_adapter<double>(16, 16, 8, 16.0, rng);
  CHECK(ok.rank == 8);
  CHECK(ok.trainable_params() == 8 * (16 + 16));
}

TEST_CASE("hand-set rank-1 delta") {
  std::mt19937_64 rng(3);
  auto base = TensorD::from_values({2, 2}, {1, 2, 3, 4});
  auto adapter = init_adapter<double>(2, 2, 1, 1.0, rng);
  adapter.b.values() = {1, 0};
  adapter.a.values() = {2, 0};
  auto eff = effective_weight(base, adapter);
  // base + [[2,0],[0,0]] with alpha = r = 1
  CHECK(eff.values()[0] == doctest::Approx(3.0));
  CHECK(eff.values()[1] == doctest::Approx(2.0));
  CHECK(eff.values()[2] == doctest::Approx(3.0));
  CHECK(eff.values()[3] == doctest::Approx(4.0));
}

TEST_CASE("base receives no gradient, adapters do") {
  std::mt19937_64 rng(4);
  auto base = TensorD::randn({6, 4}, 1.0, rng);
  auto adapter = init_adapter<double>(6, 4, 2, 16.0, rng);
  adapter.b.values() = TensorD::randn({6, 2}, 0.1, rng).values();

  TapeD tape;
  TapeD::Scope scope(tape);
  auto x = TensorD::randn({3, 6}, 1.0, rng);
  auto loss = sum_all(matmul(x, effective_weight(base, adapter)));
  tape.backward(loss);

  CHECK(!base.has_grad());
  CHECK(adapter.a.has_grad());
  CHECK(adapter.b.has_grad());
}

TEST_CASE("adapter gradients match finite differences") {
  std::mt19937_64 rng(5);
  auto base = TensorD::randn({6, 4}, 1.0, rng);
  auto adapter = init_adapter<double>(6, 4, 2, 16.0, rng);
  adapter.b.values() = TensorD::randn({6, 2}, 0.1, rng).values();
  auto x = TensorD::randn({3, 6}, 1.0, rng);

  auto f = [&]() {
    auto w = effective_weight(base, adapter);
    auto y = matmul(x, w);
    return sum_all(mul(y, y));
  };
  CHECK(grad_check_params<double>(f, {adapter.a, adapter.b}, 1e-5) < 1e-6);
}

TEST_CASE("effective weight shape mismatch is rejected") {
  std::mt19937_64 rng(6);
  auto adapter = init_adapter<double>(6, 4, 2, 16.0, rng);
  CHECK_THROWS_AS(effective_weight(TensorD::zeros({4, 6}), adapter), DimensionError);
}
