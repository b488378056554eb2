#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "setr/features.hpp"
#include "setr/model.hpp"

#include <cmath>

using namespace setr;

namespace {

constexpr double kPi = 3.14159265358979323846;

FlowField uniform_flow(Index h, Index w, double u, double v) {
  return FlowField{Grid::Constant(h, w, u), Grid::Constant(h, w, v)};
}

double bin_center_angle(int bin) { return -kPi + (bin + 0.5) * 2.0 * kPi / kOrientationBins; }

}  // namespace

TEST_CASE("zero flow maps to the zero descriptor") {
  const Eigen::RowVectorXd d = flow_descriptor(uniform_flow(16, 16, 0.0, 0.0));
  CHECK(d.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("uniform rightward flow concentrates in the zero-radian bin of every cell") {
  const Eigen::RowVectorXd d = flow_descriptor(uniform_flow(16, 16, 1.0, 0.0));
  CHECK(std::abs(d.norm() - 1.0) < 1e-12);
  // angle 0 falls at the start of bin 8
  const int expected_bin = kOrientationBins / 2;
  for (int cell = 0; cell < kGridCells * kGridCells; ++cell) {
    for (int bin = 0; bin < kOrientationBins; ++bin) {
      const Index base = (cell * kOrientationBins + bin) * 2;
      if (bin == expected_bin) {
        CHECK(d(base) > 0.0);
        CHECK(d(base + 1) > 0.0);
      } else {
        CHECK(d(base) == 0.0);
        CHECK(d(base + 1) == 0.0);
      }
    }
  }
  // all cells identical
  const int stride = kOrientationBins * 2;
  for (int cell = 1; cell < kGridCells * kGridCells; ++cell) {
    CHECK((d.segment(cell * stride, stride) - d.segment(0, stride)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("rotational flow spreads orientation mass nearly uniformly") {
  // (u, v) = (-y, x) around the image center: orientation is uniform over
  // angle on any disc. On the full square the per-angle mass goes as
  // sec^2 within each octant, so adjacent bins integrate to tan(pi/8) vs
  // 1 - tan(pi/8): max/min about 1.414, below the 1.5 gate.
  const Index n = 64;
  FlowField f{Grid(n, n), Grid(n, n)};
  const double c = (n - 1) / 2.0;
  for (Index y = 0; y < n; ++y) {
    for (Index x = 0; x < n; ++x) {
      f.u(y, x) = -(static_cast<double>(y) - c);
      f.v(y, x) = static_cast<double>(x) - c;
    }
  }
  const Eigen::RowVectorXd d = flow_descriptor(f);

  // aggregate count-weighted mass per orientation bin; 64 divides evenly
  // into the 4x4 grid so cells carry equal pixel counts
  Eigen::ArrayXd bins = Eigen::ArrayXd::Zero(kOrientationBins);
  for (int cell = 0; cell < kGridCells * kGridCells; ++cell) {
    for (int bin = 0; bin < kOrientationBins; ++bin) {
      bins(bin) += d((cell * kOrientationBins + bin) * 2);
    }
  }
  CHECK(bins.minCoeff() > 0.0);
  CHECK(bins.maxCoeff() / bins.minCoeff() < 1.5);

  // numeric oracle: integrate the orientation of (-y, x) over the grid
  Eigen::ArrayXd oracle = Eigen::ArrayXd::Zero(kOrientationBins);
  for (Index y = 0; y < n; ++y) {
    for (Index x = 0; x < n; ++x) {
      const double du = -(static_cast<double>(y) - c), dv = static_cast<double>(x) - c;
      int bin = static_cast<int>(std::floor((std::atan2(dv, du) + kPi) / (2.0 * kPi) * 16));
      oracle(std::min(bin, 15)) += 1.0;
    }
  }
  CHECK(oracle.maxCoeff() / oracle.minCoeff() < 1.5);
  // implementation histogram is proportional to the oracle histogram
  const Eigen::ArrayXd got = bins / bins.sum();
  const Eigen::ArrayXd want = oracle / oracle.sum();
  CHECK((got - want).abs().maxCoeff() < 1e-9);
}

TEST_CASE("rotating the field by 90 degrees shifts orientation bins by 4") {
  for (int bin = 0; bin < kOrientationBins; ++bin) {
    const double a = bin_center_angle(bin);
    const FlowField f = uniform_flow(16, 16, std::cos(a), std::sin(a));
    // rotation of positions and vectors; uniform fields make the positional
    // part invisible
    const FlowField r = uniform_flow(16, 16, -std::sin(a), std::cos(a));
    const Eigen::RowVectorXd df = flow_descriptor(f);
    const Eigen::RowVectorXd dr = flow_descriptor(r);
    for (int cell = 0; cell < kGridCells * kGridCells; ++cell) {
      for (int b = 0; b < kOrientationBins; ++b) {
        const int shifted = (b + 4) % kOrientationBins;
        CHECK(df((cell * kOrientationBins + b) * 2) ==
              dr((cell * kOrientationBins + shifted) * 2));
        CHECK(df((cell * kOrientationBins + b) * 2 + 1) ==
              dr((cell * kOrientationBins + shifted) * 2 + 1));
      }
    }
  }
}

TEST_CASE("the descriptor is magnitude aware") {
  // doubling flow magnitudes moves mass between the count and magnitude
  // statistics, so the normalized descriptor changes
  Rng rng(21);
  FlowField f{Grid(16, 16), Grid(16, 16)};
  for (Index i = 0; i < f.u.size(); ++i) {
    f.u.data()[i] = rng.uniform(-2, 2);
    f.v.data()[i] = rng.uniform(-2, 2);
  }
  FlowField doubled{Grid(2.0 * f.u), Grid(2.0 * f.v)};
  const Eigen::RowVectorXd a = flow_descriptor(f);
  const Eigen::RowVectorXd b = flow_descriptor(doubled);
  CHECK((a - b).cwiseAbs().maxCoeff() > 1e-3);
}

TEST_CASE("descriptors are unit length for nonzero flow") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    FlowField f{Grid(24, 24), Grid(24, 24)};
    for (Index i = 0; i < f.u.size(); ++i) {
      f.u.data()[i] = rng.uniform(-3, 3);
      f.v.data()[i] = rng.uniform(-3, 3);
    }
    CHECK(std::abs(flow_descriptor(f).norm() - 1.0) < 1e-12);
  }
}

TEST_CASE("extract_spatial_features stacks one row per field") {
  std::vector<FlowField> flows{uniform_flow(16, 16, 1, 0), uniform_flow(16, 16, 0, 1)};
  const Mat feats = extract_spatial_features(flows);
  CHECK(feats.rows() == 2);
  CHECK(feats.cols() == kFeatureDim);
  CHECK_THROWS_AS(extract_spatial_features({}), std::invalid_argument);
}

TEST_CASE("sample_frames stride-two case") {
  const auto idx = sample_frames(128, 64);
  REQUIRE(idx.size() == 64);
  for (Index i = 0; i < 64; ++i) CHECK(idx[static_cast<size_t>(i)] == 2 * i);
}

TEST_CASE("sample_frames identity case") {
  const auto idx = sample_frames(64, 64);
  for (Index i = 0; i < 64; ++i) CHECK(idx[static_cast<size_t>(i)] == i);
}

TEST_CASE("sample_frames oversampling repeats indices evenly") {
  const auto idx = sample_frames(30, 64);
  REQUIRE(idx.size() == 64);
  std::vector<int> counts(30, 0);
  for (Index i : idx) counts[static_cast<size_t>(i)]++;
  for (int c : counts) CHECK((c == 2 || c == 3));  // floor/ceil of 64/30
  int total = 0;
  for (int c : counts) total += c;
  CHECK(total == 64);
  for (size_t i = 0; i < 64; ++i) {
    CHECK(idx[i] == static_cast<Index>(i) * 30 / 64);
  }
}

TEST_CASE("sample_frames is monotone and in range") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const Index prefix = rng.uniform_int(1, 300);
    const Index n = rng.uniform_int(1, 128);
    const auto idx = sample_frames(prefix, n);
    CHECK(idx.size() == static_cast<size_t>(n));
    CHECK(idx.front() >= 0);
    CHECK(idx.back() < prefix);
    for (size_t i = 1; i < idx.size(); ++i) CHECK(idx[i] >= idx[i - 1]);
  }
}

TEST_CASE("tokenize produces the documented shape with the class token last") {
  SetrConfig cfg;  // defaults: 64 tokens, 256 hidden
  Rng rng(5);
  SetrParams params = SetrParams::init(cfg, rng);

  Tape tape;
  BoundParams bound = bind(tape, params);
  const Mat feats = Mat::Zero(64, kFeatureDim);
  const Value tokens = tokenize(tape, feats, bound, cfg);
  CHECK(tokens.rows() == 65);
  CHECK(tokens.cols() == 256);
}

TEST_CASE("tokenize with zero everything gives bias-only rows") {
  SetrConfig cfg;
  cfg.tokens = 4;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  Rng rng(6);
  SetrParams params = SetrParams::init(cfg, rng);
  params.class_embed.setZero();
  params.pos_embed.setZero();
  params.b_embed = Mat::Constant(1, 8, 0.25);

  Tape tape;
  BoundParams bound = bind(tape, params);
  const Mat out = tokenize(tape, Mat::Zero(4, kFeatureDim), bound, cfg).data();
  for (Index r = 0; r < 4; ++r) {
    CHECK((out.row(r).array() == 0.25).all());
  }
  CHECK(out.row(4).cwiseAbs().maxCoeff() == 0.0);  // class token row
}

TEST_CASE("tokenize permutes motion-token rows with its input when pos is zero") {
  SetrConfig cfg;
  cfg.tokens = 6;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  Rng rng(7);
  SetrParams params = SetrParams::init(cfg, rng);
  params.pos_embed.setZero();

  Mat feats(6, kFeatureDim);
  for (Index i = 0; i < feats.size(); ++i) feats.data()[i] = rng.uniform(-1, 1);
  std::vector<Index> perm{3, 1, 5, 0, 4, 2};
  Mat permuted(6, kFeatureDim);
  for (Index r = 0; r < 6; ++r) permuted.row(r) = feats.row(perm[static_cast<size_t>(r)]);

  Tape tape;
  BoundParams bound = bind(tape, params);
  const Mat a = tokenize(tape, feats, bound, cfg).data();
  const Mat b = tokenize(tape, permuted, bound, cfg).data();
  for (Index r = 0; r < 6; ++r) {
    CHECK((b.row(r) - a.row(perm[static_cast<size_t>(r)])).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK((b.row(6) - a.row(6)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("tokenize is affine in its features") {
  SetrConfig cfg;
  cfg.tokens = 5;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  Rng rng(8);
  SetrParams params = SetrParams::init(cfg, rng);

  Mat f1(5, kFeatureDim), f2(5, kFeatureDim);
  for (Index i = 0; i < f1.size(); ++i) {
    f1.data()[i] = rng.uniform(-1, 1);
    f2.data()[i] = rng.uniform(-1, 1);
  }
  const double a = 0.3;
  Tape tape;
  BoundParams bound = bind(tape, params);
  const Mat left = tokenize(tape, Mat(a * f1 + (1 - a) * f2), bound, cfg).data();
  const Mat t1 = tokenize(tape, f1, bound, cfg).data();
  const Mat t2 = tokenize(tape, f2, bound, cfg).data();
  const Mat right = a * t1 + (1 - a) * t2;
  // rows 0..N-1 are affine in the features; row N is the class token
  CHECK((left.topRows(5) - right.topRows(5)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tokenize rejects row-count mismatches") {
  SetrConfig cfg;
  cfg.tokens = 6;
  cfg.dim = 8;
  cfg.heads = 2;
  Rng rng(9);
  SetrParams params = SetrParams::init(cfg, rng);
  Tape tape;
  BoundParams bound = bind(tape, params);
  CHECK_THROWS_AS(tokenize(tape, Mat::Zero(5, kFeatureDim), bound, cfg), std::invalid_argument);
  CHECK_THROWS_AS(tokenize(tape, Mat::Zero(6, 100), bound, cfg), std::invalid_argument);
}

TEST_CASE("gather_sampled_features truncates to prefix and samples") {
  SampleRecord rec;
  rec.features = Mat::Zero(10, kFeatureDim);
  for (Index r = 0; r < 10; ++r) rec.features(r, 0) = static_cast<double>(r);
  const Mat got = gather_sampled_features(rec, 5, 10);
  // indices floor(i*5/10) = 0,0,1,1,2,2,3,3,4,4
  for (Index i = 0; i < 10; ++i) CHECK(got(i, 0) == static_cast<double>(i / 2));
  CHECK_THROWS_AS(gather_sampled_features(rec, 11, 4), std::invalid_argument);
}
