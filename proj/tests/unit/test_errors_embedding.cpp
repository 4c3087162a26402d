#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "r2p/embedding.hpp"
#include "r2p/errors.hpp"

using namespace r2p;

TEST(ErrorCodes, NamesAreUpperSnake) {
  EXPECT_EQ(error_code_name(ErrorCode::kDuplicateName), "DUPLICATE_NAME");
  EXPECT_EQ(error_code_name(ErrorCode::kUnknownTargetConcept), "UNKNOWN_TARGET_CONCEPT");
  EXPECT_EQ(error_code_name(ErrorCode::kEnrollmentParseFailure), "ENROLLMENT_PARSE_FAILURE");
}

TEST(ErrorCodes, ParseErrorCarriesStageAndRaw) {
  const ParseError e(ParseStage::kSchema, "raw text", "bad");
  EXPECT_EQ(e.code(), ErrorCode::kParseFailure);
  EXPECT_EQ(e.stage(), ParseStage::kSchema);
  EXPECT_EQ(e.raw(), "raw text");
}

TEST(Embedding, NormalizesToUnitLength) {
  const auto e = Embedding::normalized({3.0, 4.0});
  EXPECT_NEAR(e.values()[0], 0.6, 1e-15);
  EXPECT_NEAR(e.values()[1], 0.8, 1e-15);
  EXPECT_NEAR(e.norm(), 1.0, 1e-15);
  EXPECT_EQ(e.dim(), 2u);
}

TEST(Embedding, RejectsEmptyAndZeroVectors) {
  EXPECT_THROW(Embedding::normalized({}), Error);
  EXPECT_THROW(Embedding::normalized({0.0, 0.0}), Error);
}

TEST(Embedding, FromUnitChecksNorm) {
  EXPECT_NO_THROW(Embedding::from_unit({1.0, 0.0}));
  try {
    Embedding::from_unit({1.0, 0.1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCorruptRecord);
  }
}

TEST(Embedding, RandomVectorsNormalizeWithinTolerance) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  for (int i = 0; i < 500; ++i) {
    std::vector<double> v(1 + i % 800);
    for (auto& x : v) x = u(rng);
    EXPECT_NEAR(Embedding::normalized(v).norm(), 1.0, kUnitNormTolerance);
  }
}
