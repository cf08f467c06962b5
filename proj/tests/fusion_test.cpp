#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "knnfuse/fusion.hpp"
#include "test_support.hpp"

using namespace knnfuse;
using testsup::make_record;

namespace {

FusionContext random_context(Eigen::Index n_ctx, Eigen::Index d_key, Eigen::Index d_value,
                             uint64_t seed) {
  FusionContext ctx;
  Rng rng(seed);
  ctx.k_c.resize(n_ctx, d_key);
  ctx.v_c.resize(n_ctx, d_value);
  for (Eigen::Index i = 0; i < n_ctx; ++i) {
    ctx.record_ids.push_back(static_cast<uint64_t>(i));
    for (Eigen::Index j = 0; j < d_key; ++j) ctx.k_c(i, j) = rng.normal();
    for (Eigen::Index j = 0; j < d_value; ++j) ctx.v_c(i, j) = rng.normal();
  }
  return ctx;
}

FrameBatch random_frames(Eigen::Index n, Eigen::Index d, uint64_t seed) {
  FrameBatch a(n, d);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) a(i, j) = rng.normal();
  }
  return a;
}

}  // namespace

TEST_CASE("layer_norm matches hand-computed values", "[fusion]") {
  Eigen::VectorXd x(3);
  x << 1.0, 2.0, 3.0;
  Eigen::VectorXd ones = Eigen::VectorXd::Ones(3);
  Eigen::VectorXd zeros = Eigen::VectorXd::Zero(3);

  Eigen::VectorXd y = layer_norm(x, ones, zeros, 1e-12);
  double s = std::sqrt(1.5);  // (x - 2) / sqrt(2/3)
  CHECK_THAT(y(0), Catch::Matchers::WithinAbs(-s, 1e-6));
  CHECK_THAT(y(1), Catch::Matchers::WithinAbs(0.0, 1e-12));
  CHECK_THAT(y(2), Catch::Matchers::WithinAbs(s, 1e-6));

  SECTION("gamma scales and beta shifts") {
    Eigen::VectorXd g = Eigen::VectorXd::Constant(3, 2.0);
    Eigen::VectorXd b = Eigen::VectorXd::Constant(3, 1.0);
    Eigen::VectorXd z = layer_norm(x, g, b, 1e-12);
    CHECK_THAT(z(0), Catch::Matchers::WithinAbs(1.0 - 2.0 * s, 1e-6));
    CHECK_THAT(z(1), Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK_THAT(z(2), Catch::Matchers::WithinAbs(1.0 + 2.0 * s, 1e-6));
  }
  SECTION("constant input maps to beta") {
    Eigen::VectorXd c = Eigen::VectorXd::Constant(3, 4.0);
    Eigen::VectorXd z = layer_norm(c, ones, zeros, 1e-5);
    CHECK(z.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("validation") {
    CHECK_THROWS_AS(layer_norm(Eigen::VectorXd(), ones, zeros, 1e-5), InvalidArgumentError);
    CHECK_THROWS_AS(layer_norm(x, ones, zeros, 0.0), InvalidArgumentError);
    CHECK_THROWS_AS(layer_norm(x, Eigen::VectorXd::Ones(2), zeros, 1e-5), ShapeError);
  }
}

TEST_CASE("layer_norm output is statistically normalized", "[fusion]") {
  const Eigen::Index n = 1000, d = 64;
  Rng rng(91);
  Eigen::VectorXd gamma = Eigen::VectorXd::Ones(d);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d);
  double worst_mean = 0.0, worst_std = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd x(d);
    double spread = 0.1 + 5.0 * rng.uniform();
    double offset = rng.uniform(-10.0, 10.0);
    for (Eigen::Index j = 0; j < d; ++j) x(j) = offset + spread * rng.normal();
    Eigen::VectorXd y = layer_norm(x, gamma, beta, 1e-5);
    double mean = y.mean();
    double stddev = std::sqrt((y.array() - mean).square().mean());
    worst_mean = std::max(worst_mean, std::abs(mean));
    worst_std = std::max(worst_std, std::abs(stddev - 1.0));
  }
  CHECK(worst_mean < 1e-2);
  CHECK(worst_std < 1e-2);
}

TEST_CASE("gather_context deduplicates per-frame retrievals", "[fusion]") {
  // 1-d keys placed so the neighbor sets are known exactly.
  ExternalMemory mem(1, 2);
  mem.append(make_record(5, {0.0f}, {1.0f, 0.0f}));
  mem.append(make_record(3, {0.2f}, {2.0f, 0.0f}));
  mem.append(make_record(9, {1.0f}, {3.0f, 0.0f}));
  mem.append(make_record(7, {5.0f}, {4.0f, 0.0f}));
  ExactIndex idx(mem);

  SECTION("identical frames collapse to m rows") {
    FrameBatch a(3, 1);
    a << 0.0, 0.0, 0.0;
    FusionContext ctx = gather_context(a, idx, 2);
    REQUIRE(ctx.n_ctx() == 2);
    CHECK(ctx.record_ids == std::vector<uint64_t>{5, 3});
  }
  SECTION("union keeps first-seen order across frames") {
    FrameBatch a(2, 1);
    a << 0.0, 1.0;
    FusionContext ctx = gather_context(a, idx, 2);
    REQUIRE(ctx.n_ctx() == 3);
    CHECK(ctx.record_ids == std::vector<uint64_t>{5, 3, 9});
    // Rows are pulled from the memory in that order.
    CHECK(ctx.k_c(0, 0) == 0.0);
    CHECK(ctx.k_c(1, 0) == Catch::Approx(0.2).margin(1e-7));
    CHECK(ctx.v_c(2, 0) == 3.0);
  }
  SECTION("disjoint neighborhoods contribute 2m rows") {
    FrameBatch a(2, 1);
    a << 0.0, 5.0;
    FusionContext ctx = gather_context(a, idx, 1);
    CHECK(ctx.record_ids == std::vector<uint64_t>{5, 7});
  }
  SECTION("empty memory gives the empty context") {
    ExternalMemory none(1, 2);
    ExactIndex nidx(none);
    FrameBatch a(2, 1);
    a << 0.0, 1.0;
    FusionContext ctx = gather_context(a, nidx, 4);
    CHECK(ctx.empty());
    CHECK(ctx.k_c.rows() == 0);
    CHECK(ctx.v_c.rows() == 0);
  }
  SECTION("validation") {
    FrameBatch bad(1, 3);
    bad << 0.0, 0.0, 0.0;
    CHECK_THROWS_AS(gather_context(bad, idx, 2), ShapeError);
    FrameBatch a(1, 1);
    a << 0.0;
    CHECK_THROWS_AS(gather_context(a, idx, 0), InvalidArgumentError);
    CHECK_THROWS_AS(gather_context(FrameBatch(0, 1), idx, 2), InvalidArgumentError);
  }
}

TEST_CASE("gather_context over the approximate index", "[fusion]") {
  ExternalMemory mem(8, 2);
  Rng rng(41);
  for (size_t i = 0; i < 60; ++i) {
    mem.append(make_record(i, testsup::random_vec(rng, 8), {float(i), 0.0f}));
  }
  AnnParams params;
  params.d_target = 8;
  params.n_subspaces = 4;
  params.M = 6;
  params.ef_construction = 40;
  params.n_centroids = 8;
  params.kmeans_iters = 4;
  AnnIndex index = build_ann(mem, params);

  FrameBatch a = random_frames(3, 8, 17);
  FusionContext ctx = gather_context(a, index, mem, 4, 60);
  CHECK(ctx.n_ctx() >= 4);
  CHECK(ctx.n_ctx() <= 12);
  for (uint64_t id : ctx.record_ids) CHECK(mem.has_id(id));
  CHECK(ctx.k_c.rows() == static_cast<Eigen::Index>(ctx.n_ctx()));
  CHECK(ctx.v_c.cols() == 2);

  SECTION("empty index answers the empty context") {
    ExternalMemory none(8, 2);
    AnnIndex blank;
    FusionContext empty_ctx = gather_context(a, blank, none, 4, 16);
    CHECK(empty_ctx.empty());
  }
}

TEST_CASE("fusion with empty context adds only the layer-norm bias", "[fusion]") {
  FusionParams p = init_fusion_params(4, 4, 3, 7);
  for (Eigen::Index i = 0; i < 4; ++i) p.ln_beta(i) = 0.1 * double(i + 1);
  FrameBatch a = random_frames(3, 4, 23);
  FusionContext empty_ctx;

  auto [out, tape] = fusion_forward(a, empty_ctx, p);
  REQUIRE(out.rows() == 3);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      CHECK(out(i, j) == a(i, j) + p.ln_beta(j));
    }
  }
  CHECK(tape.empty_context);
}

TEST_CASE("fusion reduces to identity when the value path is zeroed", "[fusion]") {
  FusionParams p = init_fusion_params(5, 5, 4, 11);
  p.w_v.setZero();
  p.ln_beta.setZero();
  FrameBatch a = random_frames(4, 5, 29);
  FusionContext ctx = random_context(6, 5, 4, 31);

  auto [out, tape] = fusion_forward(a, ctx, p);
  CHECK(out.cwiseEqual(a).all());

  SECTION("and the residual passes the output gradient straight through") {
    Eigen::MatrixXd d_out = random_frames(4, 5, 37);
    p.w_q.setZero();
    auto [out2, tape2] = fusion_forward(a, ctx, p);
    FusionGrads g = fusion_backward(tape2, d_out);
    CHECK(g.d_a.cwiseEqual(d_out).all());
    CHECK(g.d_w_q.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.d_w_v.cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("attention probabilities are a proper distribution", "[fusion]") {
  FusionParams p = init_fusion_params(6, 6, 3, 43);
  FrameBatch a = random_frames(4, 6, 47);
  FusionContext ctx = random_context(5, 6, 3, 53);
  auto [out, tape] = fusion_forward(a, ctx, p);

  for (Eigen::Index i = 0; i < tape.probs.rows(); ++i) {
    CHECK_THAT(tape.probs.row(i).sum(), Catch::Matchers::WithinAbs(1.0, 1e-6));
    CHECK(tape.probs.row(i).minCoeff() >= 0.0);
  }

  SECTION("duplicate context keys split the mass evenly") {
    FusionContext dup;
    dup.record_ids = {1, 2};
    dup.k_c.resize(2, 6);
    dup.k_c.row(0) = ctx.k_c.row(0);
    dup.k_c.row(1) = ctx.k_c.row(0);
    dup.v_c.resize(2, 3);
    dup.v_c.row(0) = ctx.v_c.row(0);
    dup.v_c.row(1) = ctx.v_c.row(1);
    auto [out2, tape2] = fusion_forward(a, dup, p);
    for (Eigen::Index i = 0; i < tape2.probs.rows(); ++i) {
      CHECK(tape2.probs(i, 0) == 0.5);
      CHECK(tape2.probs(i, 1) == 0.5);
    }
  }
}

TEST_CASE("fusion output is invariant to context row order", "[fusion]") {
  FusionParams p = init_fusion_params(6, 6, 4, 59);
  FrameBatch a = random_frames(3, 6, 61);
  FusionContext ctx = random_context(7, 6, 4, 67);

  std::vector<Eigen::Index> perm{3, 0, 6, 1, 5, 2, 4};
  FusionContext shuffled;
  shuffled.k_c.resize(7, 6);
  shuffled.v_c.resize(7, 4);
  for (size_t i = 0; i < perm.size(); ++i) {
    shuffled.k_c.row(static_cast<Eigen::Index>(i)) = ctx.k_c.row(perm[i]);
    shuffled.v_c.row(static_cast<Eigen::Index>(i)) = ctx.v_c.row(perm[i]);
    shuffled.record_ids.push_back(ctx.record_ids[static_cast<size_t>(perm[i])]);
  }

  auto [out1, t1] = fusion_forward(a, ctx, p);
  auto [out2, t2] = fusion_forward(a, shuffled, p);
  CHECK((out1 - out2).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("fusion output does not depend on memory insertion order", "[fusion]") {
  Rng rng(71);
  std::vector<MemoryRecord> records;
  for (size_t i = 0; i < 20; ++i) {
    records.push_back(make_record(i, testsup::random_vec(rng, 4), testsup::random_vec(rng, 3)));
  }
  ExternalMemory fwd(4, 3), rev(4, 3);
  for (const auto& r : records) fwd.append(r);
  for (auto it = records.rbegin(); it != records.rend(); ++it) rev.append(*it);

  ExactIndex fidx(fwd), ridx(rev);
  FrameBatch a = random_frames(3, 4, 73);
  FusionContext cf = gather_context(a, fidx, 3);
  FusionContext cr = gather_context(a, ridx, 3);
  CHECK(cf.record_ids == cr.record_ids);

  FusionParams p = init_fusion_params(4, 4, 3, 79);
  auto [of, tf] = fusion_forward(a, cf, p);
  auto [orv, tr] = fusion_forward(a, cr, p);
  CHECK(of.cwiseEqual(orv).all());
}

TEST_CASE("fusion validates shapes and data", "[fusion]") {
  FusionParams p = init_fusion_params(4, 4, 3, 83);
  FrameBatch a = random_frames(2, 4, 89);
  FusionContext ctx = random_context(3, 4, 3, 97);

  SECTION("frame width must match d_model") {
    CHECK_THROWS_AS(fusion_forward(random_frames(2, 5, 1), ctx, p), ShapeError);
  }
  SECTION("context dims must match the parameters") {
    FusionContext bad = random_context(3, 5, 3, 1);
    CHECK_THROWS_AS(fusion_forward(a, bad, p), ShapeError);
    FusionContext badv = random_context(3, 4, 2, 1);
    CHECK_THROWS_AS(fusion_forward(a, badv, p), ShapeError);
  }
  SECTION("non-finite frames are rejected") {
    FrameBatch nan_a = a;
    nan_a(1, 2) = std::nan("");
    CHECK_THROWS_AS(fusion_forward(nan_a, ctx, p), DataError);
  }
  SECTION("non-finite context is rejected") {
    FusionContext nan_ctx = ctx;
    nan_ctx.v_c(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(fusion_forward(a, nan_ctx, p), DataError);
  }
  SECTION("inconsistent parameters are rejected") {
    FusionParams bad = p;
    bad.ln_gamma.resize(5);
    bad.ln_gamma.setOnes();
    CHECK_THROWS_AS(fusion_forward(a, ctx, bad), ShapeError);
    FusionParams badm = p;
    badm.m = 0;
    CHECK_THROWS_AS(fusion_forward(a, ctx, badm), InvalidArgumentError);
  }
  SECTION("backward rejects a mismatched upstream gradient") {
    auto [out, tape] = fusion_forward(a, ctx, p);
    CHECK_THROWS_AS(fusion_backward(tape, Eigen::MatrixXd::Zero(2, 5)), ShapeError);
  }
}

TEST_CASE("zero upstream gradient produces zero parameter gradients", "[fusion]") {
  FusionParams p = init_fusion_params(5, 5, 3, 101);
  FrameBatch a = random_frames(3, 5, 103);
  FusionContext ctx = random_context(4, 5, 3, 107);
  auto [out, tape] = fusion_forward(a, ctx, p);

  Eigen::MatrixXd d_v_c;
  FusionGrads g = fusion_backward(tape, Eigen::MatrixXd::Zero(3, 5), &d_v_c);
  CHECK(g.d_a.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.d_w_q.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.d_w_v.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.d_ln_gamma.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.d_ln_beta.cwiseAbs().maxCoeff() == 0.0);
  CHECK(d_v_c.rows() == 4);
  CHECK(d_v_c.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("value-row gradient matches finite differences", "[fusion]") {
  FusionParams p = init_fusion_params(4, 4, 3, 109);
  FrameBatch a = random_frames(2, 4, 113);
  FusionContext ctx = random_context(3, 4, 3, 127);
  Eigen::MatrixXd c = random_frames(2, 4, 131);

  auto [out, tape] = fusion_forward(a, ctx, p);
  Eigen::MatrixXd d_v_c;
  fusion_backward(tape, c, &d_v_c);

  const double step = 1e-5;
  for (Eigen::Index i = 0; i < ctx.v_c.rows(); ++i) {
    for (Eigen::Index j = 0; j < ctx.v_c.cols(); ++j) {
      double orig = ctx.v_c(i, j);
      ctx.v_c(i, j) = orig + step;
      auto [up, t1] = fusion_forward(a, ctx, p);
      ctx.v_c(i, j) = orig - step;
      auto [dn, t2] = fusion_forward(a, ctx, p);
      ctx.v_c(i, j) = orig;
      double fd = ((up.array() * c.array()).sum() - (dn.array() * c.array()).sum()) / (2 * step);
      CHECK_THAT(d_v_c(i, j), Catch::Matchers::WithinAbs(fd, 1e-6));
    }
  }
}

TEST_CASE("analytic gradients agree with finite differences across seeds", "[fusion]") {
  GradCheckReport r = run_gradcheck(20, 1234);
  INFO("worst entry: " << r.worst_entry << " rel err " << r.max_rel_err);
  CHECK(r.pass);
  CHECK(r.max_rel_err < 1e-4);
  CHECK(r.n_seeds == 20);
}

TEST_CASE("gradcheck harness detects corrupted gradients", "[fusion]") {
  GradCheckReport wq = run_gradcheck(5, 1234, 1e-5, 1e-4, GradCorrupt::kWq);
  CHECK_FALSE(wq.pass);
  CHECK(wq.max_rel_err > 0.1);
  GradCheckReport lg = run_gradcheck(5, 1234, 1e-5, 1e-4, GradCorrupt::kLnGamma);
  CHECK_FALSE(lg.pass);
  CHECK(lg.max_rel_err > 0.1);
}

TEST_CASE("parameter initialization is seeded", "[fusion]") {
  FusionParams a = init_fusion_params(8, 16, 4, 5);
  FusionParams b = init_fusion_params(8, 16, 4, 5);
  FusionParams c = init_fusion_params(8, 16, 4, 6);
  CHECK(a.w_q.cwiseEqual(b.w_q).all());
  CHECK(a.w_v.cwiseEqual(b.w_v).all());
  CHECK_FALSE(a.w_q.cwiseEqual(c.w_q).all());
  CHECK(a.ln_gamma.cwiseAbs().minCoeff() == 1.0);
  CHECK(a.ln_beta.cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.d_model() == 8);
  CHECK(a.d_key() == 16);
  CHECK(a.d_value() == 4);
}
