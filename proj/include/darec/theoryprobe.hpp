#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "darec/matrix.hpp"

namespace darec {

// Exact discrete joint P(D, D', Y), stored row-major as p[(a*|D'| + b)*|Y| + y].
struct JointDistribution {
    std::uint32_t card_d = 0;
    std::uint32_t card_dp = 0;
    std::uint32_t card_y = 0;
    std::vector<double> p;

    double at(std::uint32_t a, std::uint32_t b, std::uint32_t y) const {
        return p[(static_cast<std::size_t>(a) * card_dp + b) * card_y + y];
    }
    void validate() const;  // nonnegative, sums to 1 within 1e-9
};

enum class ProbeScenario { MaxGap, ZeroGap, Interpolated };

// max_gap: Y uniform binary, D = Y, D' independent. zero_gap: D' = D = Y.
// interpolated(alpha): D' copies Y with probability alpha, else uniform noise.
JointDistribution build_joint(ProbeScenario scenario, double alpha = 1.0);
ProbeScenario scenario_from_string(const std::string& s);

enum class MiPair { DY, DpY, DDp };

// I in nats with the 0*ln(0) := 0 convention.
double exact_mi(const JointDistribution& joint, MiPair pair);

// H(Y | D, D') in nats.
double conditional_entropy_y(const JointDistribution& joint);

enum class ProbeMode { HardAligned, Disentangled };

struct ProbeConfig {
    std::size_t n_train = 20000;
    std::size_t n_test = 5000;
    std::uint32_t emb_dim = 4;
    std::uint32_t d_h = 8;
    // Budget calibrated so the mu-penalty stays binding in the aligned arm;
    // with unbounded head growth the penalty can be slowly traded away.
    std::uint32_t iters = 200;
    double lr = 0.02;
    double mu = 100.0;        // alignment penalty weight (hard mode)
    double lambda_or = 0.1;   // orthogonality weight (disentangled mode)
};

struct ProbeResult {
    double i_d_y = 0.0;
    double i_dp_y = 0.0;
    double delta_p = 0.0;
    double h_y_given_both = 0.0;
    double ce_aligned = 0.0;
    double ce_free = 0.0;
};

// Test cross-entropy of one arm: encoders into R^emb_dim, linear head on the
// pair of representations, plus the mode's regularizer.
double run_probe_mode(const JointDistribution& joint, ProbeMode mode,
                      const ProbeConfig& cfg, std::uint64_t seed);

// Both arms plus the exact information quantities.
ProbeResult run_probe(const JointDistribution& joint, const ProbeConfig& cfg,
                      std::uint64_t seed);

}  // namespace darec
