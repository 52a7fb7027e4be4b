#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"
#include "worldlm/tensor.hpp"

namespace worldlm {
namespace {

using testing::random_params;
using testing::test_rng;

ParamSet vec_set(std::vector<std::vector<float>> values) {
  ParamSet p(ParamRole::model);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Shape shape{values[i].size()};
    p.add(Tensor("t" + std::to_string(i), shape, values[i]));
  }
  return p;
}

TEST(Tensor, ConstructorRejectsWrongLength) {
  EXPECT_THROW(Tensor("x", {2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_NO_THROW(Tensor("x", {2, 2}, {1, 2, 3, 4}));
}

TEST(ParamSet, DuplicateNamesRejected) {
  ParamSet p;
  p.add(Tensor("a", {1}));
  EXPECT_THROW(p.add(Tensor("a", {2})), std::invalid_argument);
}

TEST(ParamSet, CongruenceNeedsNamesAndShapes) {
  ParamSet a, b, c;
  a.add(Tensor("w", {2}));
  b.add(Tensor("w", {2}));
  c.add(Tensor("v", {2}));
  EXPECT_TRUE(a.congruent(b));
  EXPECT_FALSE(a.congruent(c));
  EXPECT_THROW(axpy(1.0, a, c), ShapeError);
}

TEST(Axpy, HandArithmetic) {
  const auto r = axpy(2.0, vec_set({{1, 2}}), vec_set({{3, 4}}));
  EXPECT_EQ(r[0].data, (std::vector<float>{5, 8}));
}

TEST(Axpy, ZeroScaleIsIdentity) {
  auto rng = test_rng(1);
  const auto x = random_params({{"a", {3, 4}}, {"b", {5}}}, rng);
  const auto y = random_params({{"a", {3, 4}}, {"b", {5}}}, rng);
  EXPECT_EQ(axpy(0.0, x, y), y);
}

TEST(Axpy, PseudoGradientIsDifference) {
  auto rng = test_rng(2);
  const auto parent = random_params({{"a", {4}}}, rng);
  const auto child = random_params({{"a", {4}}}, rng);
  const auto delta = axpy(-1.0, parent, child);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_FLOAT_EQ(delta[0].data[i], child[0].data[i] - parent[0].data[i]);
  }
}

TEST(Axpy, RoundTripReproducesInputExactly) {
  auto rng = test_rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_params({{"a", {7, 3}}, {"b", {11}}}, rng);
    const auto zero = x.zeros_like(ParamRole::model);
    EXPECT_EQ(axpy(1.0, x, axpy(-1.0, x, zero)).names(), x.names());
    const auto back = axpy(1.0, x, zero);
    EXPECT_EQ(back, x);
  }
}

TEST(Axpy, NonFiniteResultRaises) {
  const auto big = vec_set({{3e38f}});
  EXPECT_THROW(axpy(10.0, big, big), NumericError);
}

TEST(Flatten, RowMajor) {
  EXPECT_EQ(flatten(Tensor("x", {2, 2}, {1, 2, 3, 4})), (std::vector<float>{1, 2, 3, 4}));
  EXPECT_EQ(flatten(Tensor("x", {1}, {7})), (std::vector<float>{7}));
}

TEST(Flatten, MatchesIndexArithmetic) {
  auto rng = test_rng(4);
  const auto t = testing::random_tensor("m", {2, 3}, rng);
  const auto flat = flatten(t);
  ASSERT_EQ(flat.size(), 6u);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(flat[i * 3 + j], t.data[i * 3 + j]);
  }
}

TEST(Reductions, HandValues) {
  const std::vector<float> e1{1, 0}, e2{0, 1}, zero{0, 0};
  EXPECT_DOUBLE_EQ(cosine(e1, e1), 1.0);
  EXPECT_DOUBLE_EQ(cosine(e1, e2), 0.0);
  EXPECT_DOUBLE_EQ(cosine(e1, zero), 0.0);
  EXPECT_DOUBLE_EQ(l2_norm(vec_set({{3}, {4}})), 5.0);
  EXPECT_DOUBLE_EQ(dot(std::vector<float>{1, 2, 3}, std::vector<float>{4, 5, 6}), 32.0);
}

TEST(Reductions, CosineSymmetricAndScaleInvariant) {
  auto rng = test_rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = testing::random_tensor("a", {17}, rng);
    const auto b = testing::random_tensor("b", {17}, rng);
    const double c = cosine(a.data, b.data);
    EXPECT_DOUBLE_EQ(c, cosine(b.data, a.data));
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
    Tensor scaled = a;
    for (auto& v : scaled.data) v *= 3.5f;
    EXPECT_LT(testing::rel_err(cosine(scaled.data, b.data), c), 1e-6);
  }
}

TEST(Serialization, BitExactRoundTrip) {
  auto rng = test_rng(6);
  auto p = random_params({{"embed", {5, 3}}, {"w", {2, 2, 2}}, {"b", {1}}}, rng, ParamRole::keys);
  p[0].data[0] = -0.0f;
  p[0].data[1] = 1e-40f;  // subnormal
  const auto stem = std::filesystem::temp_directory_path() / "worldlm_tensor_roundtrip";
  save_params(p, stem, R"({"note": 1})");
  const auto back = load_params(stem);
  EXPECT_EQ(back.role(), ParamRole::keys);
  EXPECT_EQ(encode_payload(back), encode_payload(p));
  EXPECT_EQ(back.names(), p.names());
  EXPECT_EQ(load_params_meta(stem), R"({"note":1})");
}

TEST(Serialization, TruncatedPayloadRejected) {
  auto rng = test_rng(7);
  const auto p = random_params({{"w", {4, 4}}}, rng);
  const auto stem = std::filesystem::temp_directory_path() / "worldlm_tensor_truncated";
  save_params(p, stem);
  std::filesystem::resize_file(stem.string() + ".bin", 10);
  EXPECT_ANY_THROW(load_params(stem));
}

TEST(Fingerprint, ChangesWithData) {
  auto rng = test_rng(8);
  auto p = random_params({{"w", {3}}}, rng);
  const auto before = fingerprint(p);
  EXPECT_EQ(before, fingerprint(p));
  p[0].data[2] += 1.0f;
  EXPECT_NE(before, fingerprint(p));
}

}  // namespace
}  // namespace worldlm
