#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "smac/param_store.hpp"
#include "smac/rng.hpp"

using smac::GradientMap;
using smac::ParamStore;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::filesystem::path tmp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "smac_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("sgd arithmetic", "[param_store]") {
  ParamStore p;
  p.add("w", {1, 1}, {1.0});
  GradientMap g{{"w", {2.0}}};
  smac::sgd_step(p, g, 0.1);
  CHECK(p.values("w")[0] == Catch::Approx(0.8));
  CHECK(p.step_count() == 1);

  GradientMap zero{{"w", {0.0}}};
  smac::sgd_step(p, zero, 0.1);
  CHECK(p.values("w")[0] == Catch::Approx(0.8));
}

TEST_CASE("sgd contract errors", "[param_store]") {
  ParamStore p;
  p.add("w", {2}, {1.0, 2.0});
  GradientMap missing;
  CHECK_THROWS_AS(smac::sgd_step(p, missing, 0.1), smac::ContractError);
  GradientMap wrong{{"w", {1.0}}};
  CHECK_THROWS_AS(smac::sgd_step(p, wrong, 0.1), smac::DimensionError);
  GradientMap nan_grad{{"w", {std::nan(""), 0.0}}};
  CHECK_THROWS_AS(smac::sgd_step(p, nan_grad, 0.1), smac::NumericError);
}

TEST_CASE("zero-gradient step leaves values bit-identical", "[param_store]") {
  ParamStore p;
  smac::Rng rng(7);
  std::vector<double> vals(12);
  for (double& v : vals) v = rng.uniform(-3, 3);
  p.add("w", {3, 4}, vals);
  const ParamStore before = p;

  GradientMap zero{{"w", std::vector<double>(12, 0.0)}};
  smac::sgd_step(p, zero, 1e-4);
  CHECK(p.values_equal(before));

  const auto f1 = tmp_file("zg1.ckpt"), f2 = tmp_file("zg2.ckpt");
  ParamStore a = before, b = p;
  a.set_step_count(0);
  b.set_step_count(0);
  smac::save_checkpoint(a, f1.string());
  smac::save_checkpoint(b, f2.string());
  CHECK(slurp(f1.string()) == slurp(f2.string()));
}

TEST_CASE("checkpoint round-trip is value-exact", "[param_store]") {
  ParamStore p;
  smac::Rng rng(42);
  std::vector<double> a(7), b(10);
  for (double& v : a) v = rng.normal() * 1e3;
  for (double& v : b) v = rng.normal() * 1e-7;
  a[0] = 0.1 + 0.2;  // not exactly representable as 0.3
  b[1] = -0.0;
  p.add("first", {7}, a);
  p.add("second", {2, 5}, b);
  p.set_step_count(123456789);

  const auto path = tmp_file("roundtrip.ckpt");
  smac::save_checkpoint(p, path.string());
  ParamStore q = smac::load_checkpoint(path.string());

  REQUIRE(q.step_count() == 123456789);
  REQUIRE(q.entries().size() == 2);
  CHECK(q.entries()[0].name == "first");
  CHECK(q.entries()[1].name == "second");
  CHECK(q.shape("second") == std::vector<int>{2, 5});
  CHECK(q.values_equal(p));
}

TEST_CASE("duplicate names and shape mismatches are rejected", "[param_store]") {
  ParamStore p;
  p.add("w", {2}, {1.0, 2.0});
  CHECK_THROWS_AS(p.add("w", {1}, {0.0}), smac::ContractError);
  CHECK_THROWS_AS(p.add("v", {3}, {0.0}), smac::DimensionError);
  CHECK_THROWS_AS(p.values("nope"), smac::ContractError);
}

TEST_CASE("soft update blends and validates layout", "[param_store]") {
  ParamStore target, online;
  target.add("w", {2}, {0.0, 10.0});
  online.add("w", {2}, {1.0, 10.0});

  SECTION("tau = 1 copies online") {
    smac::soft_update(target, online, 1.0);
    CHECK(target.values("w")[0] == 1.0);
  }
  SECTION("tau = 0 is a no-op") {
    smac::soft_update(target, online, 0.0);
    CHECK(target.values("w")[0] == 0.0);
  }
  SECTION("default rate blend") {
    smac::soft_update(target, online, 5e-3);
    CHECK(target.values("w")[0] == Catch::Approx(0.005));
    CHECK(target.values("w")[1] == Catch::Approx(10.0));
  }
  SECTION("layout mismatch throws") {
    ParamStore other;
    other.add("v", {2}, {1.0, 2.0});
    CHECK_THROWS_AS(smac::soft_update(target, other, 0.5), smac::ContractError);
  }
}

TEST_CASE("missing checkpoint file raises a file error", "[param_store]") {
  CHECK_THROWS_AS(smac::load_checkpoint("/nonexistent/nope.ckpt"), smac::FileError);
}
