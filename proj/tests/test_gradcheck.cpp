#include "doctest.h"
#include "pmss/framework/gradcheck_suite.hpp"

using namespace pmss::framework;

TEST_CASE("scope tags round trip") {
  for (auto s : {CheckScope::layers, CheckScope::spm, CheckScope::pipeline}) CHECK(check_scope_from(to_string(s)) == s);
  CHECK_THROWS_AS(check_scope_from("everything"), std::invalid_argument);
  CHECK(default_rel_tol(CheckScope::layers) == 1e-4);
  CHECK(default_rel_tol(CheckScope::pipeline) == 1e-3);
}

TEST_CASE("layer and spm suites pass on twenty seeds") {
  for (auto scope : {CheckScope::layers, CheckScope::spm}) {
    const SuiteReport r = run_gradcheck_suite(scope, {.seed = 0, .seeds = 20});
    INFO(to_string(scope) << " max rel " << r.max_rel_error);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-4);
    CHECK(r.failing().empty());
  }
}

TEST_CASE("pipeline suite passes") {
  const SuiteReport r = run_gradcheck_suite(CheckScope::pipeline, {.seed = 0, .seeds = 2});
  INFO("max rel " << r.max_rel_error);
  CHECK(r.passed);
  CHECK(r.cases.size() == 2);
}

TEST_CASE("a corrupted rule fails and is named") {
  const SuiteReport r = run_gradcheck_suite(CheckScope::layers, {.seed = 0, .seeds = 1, .corrupt_op = "softmax_channels"});
  CHECK_FALSE(r.passed);
  const auto bad = r.failing();
  REQUIRE_FALSE(bad.empty());
  CHECK(bad.front() == "softmax_channels");
  const SuiteReport s = run_gradcheck_suite(CheckScope::spm, {.seed = 0, .seeds = 1, .corrupt_op = "mul"});
  CHECK_FALSE(s.passed);
}
