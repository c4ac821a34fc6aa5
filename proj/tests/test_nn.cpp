#include <doctest.h>

#include <cmath>

#include "ciseg/nn.hpp"

using namespace ciseg;

TEST_CASE("ParamStore rejects duplicates and unknown names") {
  ParamStore<float> store;
  store.add("w", Tensor<float>({2, 2}));
  CHECK_THROWS_AS(store.add("w", Tensor<float>({1})), std::invalid_argument);
  CHECK_THROWS_AS(store.get("missing"), std::invalid_argument);
  CHECK(store.total_scalars() == 4);
  CHECK(store.names().size() == 1);
}

TEST_CASE("initializers are deterministic per seed") {
  SplitMix64 a(42), b(42), c(43);
  auto wa = xavier_uniform<float>({4, 4}, 4, 4, a);
  auto wb = xavier_uniform<float>({4, 4}, 4, 4, b);
  auto wc = xavier_uniform<float>({4, 4}, 4, 4, c);
  CHECK(std::memcmp(wa.data(), wb.data(), 16 * sizeof(float)) == 0);
  CHECK(std::memcmp(wa.data(), wc.data(), 16 * sizeof(float)) != 0);
  float bound = std::sqrt(6.0f / 8.0f);
  for (int i = 0; i < 16; ++i) CHECK(std::abs(wa[i]) <= bound);
}

TEST_CASE("AdamW drives a quadratic to its minimum") {
  Tensor<float> p({3}, {5.0f, -3.0f, 1.0f});
  AdamW<float>::Config cfg;
  cfg.lr = 0.05f;
  cfg.weight_decay = 0.0f;
  AdamW<float> opt(cfg);
  opt.register_param("p", &p);
  for (int it = 0; it < 600; ++it) {
    std::map<std::string, Tensor<float>> grads;
    Tensor<float> grad({3});
    for (int i = 0; i < 3; ++i) grad[i] = 2.0f * (p[i] - 1.0f);  // (p-1)^2
    grads["p"] = grad;
    opt.step(grads);
  }
  for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(1.0f).epsilon(1e-3));
}

TEST_CASE("AdamW rejects missing gradients") {
  Tensor<float> p({1});
  AdamW<float> opt({});
  opt.register_param("p", &p);
  std::map<std::string, Tensor<float>> grads;
  CHECK_THROWS_AS(opt.step(grads), std::invalid_argument);
}

TEST_CASE("decoupled weight decay shrinks parameters with zero gradient") {
  Tensor<float> p({1}, {1.0f});
  AdamW<float>::Config cfg;
  cfg.lr = 0.1f;
  cfg.weight_decay = 0.5f;
  AdamW<float> opt(cfg);
  opt.register_param("p", &p);
  std::map<std::string, Tensor<float>> grads;
  grads["p"] = Tensor<float>({1});
  opt.step(grads);
  CHECK(p[0] == doctest::Approx(1.0f - 0.1f * 0.5f * 1.0f));
}
