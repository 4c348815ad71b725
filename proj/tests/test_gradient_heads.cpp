#include <gtest/gtest.h>

#include "dspm/gradient_heads.hpp"

using namespace dspm;

TEST(HeadGradients, EveryHeadPassesOnFiveInstances) {
  SuiteOptions opt;
  const auto report = run_gradient_suite(opt, head_gradient_cases());
  for (const auto& r : report.results) EXPECT_TRUE(r.passed) << r.name << " rel " << r.max_rel_error;
  EXPECT_EQ(report.results.size(), head_gradient_cases().size());
}

TEST(HeadGradients, CoverageIncludesBothHeads) {
  std::vector<std::string> names;
  for (const auto& c : all_gradient_cases()) names.push_back(c.name);
  for (const char* want : {"plane_flow_decoder", "mixture_branch", "regularized_regression", "group_correlation"})
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end()) << want;
  EXPECT_GT(names.size(), primitive_gradient_cases().size());
}

TEST(HeadGradients, DifferentSeedsStillPass) {
  SuiteOptions opt;
  opt.seed = 77;
  opt.instances = 2;
  opt.filter = "plane_flow";
  const auto report = run_gradient_suite(opt, head_gradient_cases());
  ASSERT_EQ(report.results.size(), 1u);
  EXPECT_TRUE(report.passed());
}
