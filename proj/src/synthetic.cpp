#include "setr/harness.hpp"

#include <cmath>

namespace setr {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

enum StreamTag : uint64_t { kDataStream = 11 };

Eigen::RowVectorXd random_unit_vector(Index dim, Rng& rng) {
  Eigen::RowVectorXd v(dim);
  for (Index i = 0; i < dim; ++i) v(i) = rng.gaussian();
  return v / v.norm();
}

}  // namespace

void SyntheticSpec::validate() const {
  if (patients < 1) throw ConfigError("synthetic: patients must be >= 1");
  if (samples_per_patient < 1) throw ConfigError("synthetic: samples per patient must be >= 1");
  if (classes != 2) throw ConfigError("synthetic: only 2 classes supported");
  if (frames_min < 2 || frames_max < frames_min) {
    throw ConfigError("synthetic: invalid frame range");
  }
  if (fps <= 0.0) throw ConfigError("synthetic: fps must be positive");
  if (noise < 0.0) throw ConfigError("synthetic: noise must be >= 0");
  if (normal_burst_min > normal_burst_max || tcs_burst_min > tcs_burst_max ||
      drift_amp_min > drift_amp_max || burst_freq_min > burst_freq_max) {
    throw ConfigError("synthetic: inverted parameter range");
  }
  if (burst_base < 0.0 || burst_base > 1.0) {
    throw ConfigError("synthetic: burst_base must be in [0, 1]");
  }
  // The classes must differ somewhere, otherwise the task is undefined.
  if (normal_burst_min == tcs_burst_min && normal_burst_max == tcs_burst_max) {
    throw ConfigError("synthetic: class burst amplitude ranges are identical");
  }
  if (flow_mode && (flow_width < 8 || flow_height < 8)) {
    throw ConfigError("synthetic: flow fields must be at least 8x8");
  }
}

std::vector<SyntheticSample> generate_synthetic_samples(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, {kDataStream}));

  // Class-archetype directions in feature space, shared across the dataset.
  // The burst lives in a plane and rotates with progression, so early and
  // late segments express the signal through different features.
  const Eigen::RowVectorXd u_drift = random_unit_vector(kFeatureDim, rng);
  Eigen::RowVectorXd u_burst_a = random_unit_vector(kFeatureDim, rng);
  u_burst_a -= u_burst_a.dot(u_drift) * u_drift;
  u_burst_a /= u_burst_a.norm();
  Eigen::RowVectorXd u_burst_b = random_unit_vector(kFeatureDim, rng);
  u_burst_b -= u_burst_b.dot(u_drift) * u_drift;
  u_burst_b -= u_burst_b.dot(u_burst_a) * u_burst_a;
  u_burst_b /= u_burst_b.norm();
  const double rotation_rad = spec.burst_rotation_deg * kTwoPi / 360.0;

  std::vector<SyntheticSample> out;
  out.reserve(static_cast<size_t>(spec.patients * spec.samples_per_patient));

  char buf[64];
  for (int p = 0; p < spec.patients; ++p) {
    std::snprintf(buf, sizeof(buf), "p%03d", p);
    const std::string patient_id = buf;
    for (int s = 0; s < spec.samples_per_patient; ++s) {
      // Alternating labels; with one sample per patient, patient parity
      // decides the class so the dataset stays balanced.
      const int label = spec.samples_per_patient == 1 ? p % 2 : s % 2;
      const Index frames = rng.uniform_int(spec.frames_min, spec.frames_max);

      const double drift_amp = rng.uniform(spec.drift_amp_min, spec.drift_amp_max);
      const double burst_amp = label == 1 ? rng.uniform(spec.tcs_burst_min, spec.tcs_burst_max)
                                          : rng.uniform(spec.normal_burst_min, spec.normal_burst_max);
      const double freq = rng.uniform(spec.burst_freq_min, spec.burst_freq_max);
      const double drift_phase = rng.uniform(0.0, 1.0);
      const double burst_phase = rng.uniform(0.0, 1.0);

      SyntheticSample sample;
      SampleRecord& rec = sample.record;
      std::snprintf(buf, sizeof(buf), "s%03d_%02d", p, s);
      rec.sample_id = buf;
      rec.patient_id = patient_id;
      rec.label = label;
      rec.duration_s = static_cast<double>(frames) / spec.fps;

      if (spec.flow_mode) {
        // Uniform flow fields whose direction wobbles with the drift and
        // whose magnitude carries the class signal; the descriptor sees the
        // same temporal envelopes through orientation/magnitude histograms.
        sample.flows.reserve(static_cast<size_t>(frames));
        for (Index t = 0; t < frames; ++t) {
          const double prog = static_cast<double>(t) / static_cast<double>(frames - 1);
          const double angle = kTwoPi * (drift_phase + 0.25 * prog);
          const double envelope =
              spec.burst_base + (1.0 - spec.burst_base) * std::pow(prog, spec.ramp_power);
          const double burst = burst_amp * envelope *
                               std::abs(std::sin(kTwoPi * (freq * prog + burst_phase)));
          const double mag = 0.5 * drift_amp + burst;
          FlowField f;
          f.u = Grid::Constant(spec.flow_height, spec.flow_width, mag * std::cos(angle));
          f.v = Grid::Constant(spec.flow_height, spec.flow_width, mag * std::sin(angle));
          if (spec.noise > 0.0) {
            for (Index y = 0; y < f.u.rows(); ++y) {
              for (Index x = 0; x < f.u.cols(); ++x) {
                f.u(y, x) += spec.noise * rng.gaussian();
                f.v(y, x) += spec.noise * rng.gaussian();
              }
            }
          }
          sample.flows.push_back(std::move(f));
        }
        rec.features = extract_spatial_features(sample.flows);
      } else {
        rec.features.resize(frames, kFeatureDim);
        for (Index t = 0; t < frames; ++t) {
          const double prog = static_cast<double>(t) / static_cast<double>(frames - 1);
          const double drift =
              drift_amp * (0.8 + 0.2 * std::sin(kTwoPi * (0.25 * prog + drift_phase)));
          const double envelope =
              spec.burst_base + (1.0 - spec.burst_base) * std::pow(prog, spec.ramp_power);
          const double burst = burst_amp * envelope *
                               std::abs(std::sin(kTwoPi * (freq * prog + burst_phase)));
          const double angle = rotation_rad * prog;
          rec.features.row(t) =
              drift * u_drift +
              burst * (std::cos(angle) * u_burst_a + std::sin(angle) * u_burst_b);
          if (spec.noise > 0.0) {
            for (Index c = 0; c < kFeatureDim; ++c) {
              rec.features(t, c) += spec.noise * rng.gaussian();
            }
          }
        }
      }
      out.push_back(std::move(sample));
    }
  }
  return out;
}

std::vector<SampleRecord> generate_synthetic_dataset(const SyntheticSpec& spec) {
  std::vector<SyntheticSample> samples = generate_synthetic_samples(spec);
  std::vector<SampleRecord> records;
  records.reserve(samples.size());
  for (SyntheticSample& s : samples) records.push_back(std::move(s.record));
  return records;
}

}  // namespace setr
