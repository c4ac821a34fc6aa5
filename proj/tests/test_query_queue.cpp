#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "ciseg/query_queue.hpp"

using namespace ciseg;

TEST_CASE("first extension: no groups frozen") {
  QueryQueue<float> q(16);
  q.extend({0, 1, 2, 3}, TaskMode::kSemantic, 7);
  CHECK(q.groups().size() == 1);
  CHECK(q.group(0).query_count == 4);
  CHECK_FALSE(q.group(0).frozen);
  CHECK(q.current_step() == 0);
  CHECK(q.frozen_index_set().empty());
  q.check_invariants();
}

TEST_CASE("base 100 plus ten extensions of 5 reaches 150 queries") {
  QueryQueue<float> q(8);
  std::vector<int> base(100);
  std::iota(base.begin(), base.end(), 0);
  q.extend(base, TaskMode::kSemantic, 1);
  for (int s = 0; s < 10; ++s) {
    std::vector<int> step(5);
    std::iota(step.begin(), step.end(), 100 + 5 * s);
    q.extend(step, TaskMode::kSemantic, uint64_t(s + 2));
  }
  CHECK(q.total_queries() == 150);
  CHECK(q.groups().size() == 11);
  CHECK(q.current_step() == 10);
  for (int gi = 0; gi < 10; ++gi) CHECK(q.group(gi).frozen);
  CHECK_FALSE(q.group(10).frozen);
  q.check_invariants();
}

TEST_CASE("instance mode uses two and a half queries per class") {
  QueryQueue<float> q(8);
  q.extend({3, 7}, TaskMode::kInstance, 0);
  CHECK(q.group(0).query_count == 5);  // round(2.5 * 2)
  q.extend({1, 2, 4, 5}, TaskMode::kInstance, 1);
  CHECK(q.group(1).query_count == 10);
}

TEST_CASE("overlapping class ids are rejected with the duplicates named") {
  QueryQueue<float> q(8);
  q.extend({0, 1}, TaskMode::kSemantic, 0);
  try {
    q.extend({1, 2, 0}, TaskMode::kSemantic, 1);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("1") != std::string::npos);
    CHECK(msg.find("0") != std::string::npos);
  }
  // queue unchanged enough to keep working
  CHECK(q.groups().size() == 1);
}

TEST_CASE("frozen_index_set matches the group layout") {
  QueryQueue<float> q(4);
  CHECK_THROWS_AS(q.frozen_index_set(), std::invalid_argument);

  q.extend({0, 1, 2, 3}, TaskMode::kSemantic, 0);
  CHECK(q.frozen_index_set().empty());

  q.extend({4, 5}, TaskMode::kSemantic, 1);
  CHECK(q.frozen_index_set() == std::vector<int>{0, 1, 2, 3});

  QueryQueue<float> big(4);
  std::vector<int> base(100);
  std::iota(base.begin(), base.end(), 0);
  big.extend(base, TaskMode::kSemantic, 0);
  std::vector<int> s1{100, 101, 102, 103, 104};
  std::vector<int> s2{105, 106, 107, 108, 109};
  big.extend(s1, TaskMode::kSemantic, 1);
  big.extend(s2, TaskMode::kSemantic, 2);
  auto frozen = big.frozen_index_set();
  REQUIRE(frozen.size() == 105);
  CHECK(frozen.front() == 0);
  CHECK(frozen.back() == 104);
}

TEST_CASE("param_delta arithmetic") {
  CHECK(param_delta(50, 256, 2) == 25600);
  CHECK(param_delta(0, 256, 2) == 0);
  CHECK(param_delta(10, 64, 2) == 1280);
  CHECK_THROWS_AS(param_delta(1, 0, 2), std::invalid_argument);
}

TEST_CASE("extend is deterministic in (state, ids, seed)") {
  QueryQueue<float> a(32), b(32);
  a.extend({0, 1, 2}, TaskMode::kSemantic, 9);
  b.extend({0, 1, 2}, TaskMode::kSemantic, 9);
  CHECK(std::memcmp(a.group(0).content.data(), b.group(0).content.data(),
                    sizeof(float) * size_t(a.group(0).content.numel())) == 0);
  CHECK(std::memcmp(a.group(0).position.data(), b.group(0).position.data(),
                    sizeof(float) * size_t(a.group(0).position.numel())) == 0);

  QueryQueue<float> c(32);
  c.extend({0, 1, 2}, TaskMode::kSemantic, 10);
  CHECK(std::memcmp(a.group(0).content.data(), c.group(0).content.data(),
                    sizeof(float) * size_t(a.group(0).content.numel())) != 0);
}

TEST_CASE("embedding init scale tracks 1/sqrt(d_q)") {
  QueryQueue<double> q(256);
  std::vector<int> ids(64);
  std::iota(ids.begin(), ids.end(), 0);
  q.extend(ids, TaskMode::kSemantic, 123);
  double ss = 0;
  const auto& t = q.group(0).content;
  for (int64_t i = 0; i < t.numel(); ++i) ss += t[i] * t[i];
  double var = ss / double(t.numel());
  CHECK(var == doctest::Approx(1.0 / 256).epsilon(0.15));
}

TEST_CASE("global index to (group, class) mapping is a bijection") {
  QueryQueue<float> q(8);
  q.extend({4, 9}, TaskMode::kSemantic, 0);
  q.extend({2, 7, 5}, TaskMode::kSemantic, 1);
  CHECK(q.total_queries() == 5);
  std::vector<std::pair<int, int>> seen;
  for (int i = 0; i < q.total_queries(); ++i) {
    auto info = q.query_info(i);
    seen.emplace_back(info.group_index, info.slot);
  }
  std::sort(seen.begin(), seen.end());
  CHECK(std::unique(seen.begin(), seen.end()) == seen.end());
  CHECK(q.query_info(0).class_id == 4);
  CHECK(q.query_info(2).class_id == 2);
  CHECK(q.query_info(4).class_id == 5);
  CHECK_THROWS_AS(q.query_info(5), std::invalid_argument);
  CHECK(q.classes_in_order() == std::vector<int>{4, 9, 2, 7, 5});
}
