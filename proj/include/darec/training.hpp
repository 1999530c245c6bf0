#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "darec/backbone.hpp"
#include "darec/dataio.hpp"
#include "darec/disentangle.hpp"
#include "darec/structalign.hpp"

namespace darec {

struct TrainConfig {
    double lambda = 0.1;
    double lr = 1e-3;
    std::uint32_t epochs = 30;
    std::uint32_t bpr_batch = 256;
    std::uint32_t n_hat = 4096;
    std::uint32_t K = 8;
    std::uint32_t d = 32;
    std::uint32_t d_h = 0;  // 0 = same as the encoder input width
    std::uint32_t n_layers = 1;
    double l2 = 1e-4;
    std::uint64_t seed = 0;
    std::uint32_t uni_sample = 256;
    std::uint32_t eval_every = 0;
    bool use_or = true;
    bool use_uni = true;
    bool use_glo = true;
    bool use_loc = true;

    void validate() const;
};

// JSON object with keys named exactly like the fields above. Unknown keys are
// rejected; missing keys keep their defaults.
TrainConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const TrainConfig& cfg);

struct AdamState {
    std::vector<Mat> m, v;
    std::uint64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void init(const std::vector<Mat*>& params);
};

// Bias-corrected Adam update, in place.
void adam_step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
               AdamState& state, double lr);

// Gradients for every trainable tensor, in param_list order.
struct ParamGrads {
    Mat d_user, d_item;
    MlpGrads g_sp_c, g_sh_c, g_sp_l, g_sh_l;

    void init_like(const BackboneModel& backbone, const EncoderSet& enc);
    std::vector<const Mat*> list() const;
};

std::vector<Mat*> param_list(BackboneModel& backbone, EncoderSet& enc);

// Per-epoch frozen clustering state: row assignments on both sides plus the
// center matching. Centers themselves are recomputed from the live shared
// representations at every step so gradients flow through the means.
struct EpochClusters {
    std::vector<std::uint32_t> assign_c;
    std::vector<std::uint32_t> assign_l;
    CenterMatching matching;
};

struct JointTerms {
    double l_base = 0.0, l_or = 0.0, l_uni = 0.0, l_glo = 0.0, l_loc = 0.0;
    double total = 0.0;
};

// total = L_base + lambda * (L_or + L_uni + L_glo + L_loc), with disabled
// terms contributing exactly zero. Throws on a non-finite term, naming it.
JointTerms joint_loss_and_grads(const BackboneModel& backbone,
                                const BipartiteGraph& graph, const EncoderSet& enc,
                                const Mat& e_l, const EpochClusters& clusters,
                                const TrainConfig& cfg, const BprBatch& batch,
                                const std::vector<std::uint32_t>& glo_idx,
                                const std::vector<std::uint32_t>& uni_idx,
                                ParamGrads& grads);

struct StepLog {
    std::uint32_t epoch = 0, step = 0;
    double l_base = 0.0, l_or = 0.0, l_uni = 0.0, l_glo = 0.0, l_loc = 0.0;
    double total = 0.0;
};

struct TrainedState {
    BackboneModel backbone;
    EncoderSet encoders;
    std::vector<StepLog> history;
    std::uint32_t epochs_run = 0;
    Mat enhanced;  // final propagated collaborative representations
};

struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invoked every cfg.eval_every epochs (when nonzero) with the current
// propagated representations.
using EpochCallback = std::function<void(std::uint32_t epoch, const Mat& enhanced)>;

TrainedState train(const SplitDataset& split, const EmbeddingMatrix& e_l_user,
                   const EmbeddingMatrix& e_l_item, const TrainConfig& cfg,
                   const EpochCallback& on_eval = {});

// Uniform sample without replacement, sorted ascending. n_hat > n_total is
// clamped with a warning on stderr.
std::vector<std::uint32_t> sample_alignment_indices(std::size_t n_total,
                                                    std::size_t n_hat, Rng& rng);

// Central-difference check of `analytic` against `eval` on `trials` random
// coordinates; returns the worst relative error.
double grad_check(const std::function<double()>& eval, const std::vector<Mat*>& params,
                  const std::vector<const Mat*>& analytic, double eps,
                  std::size_t trials, Rng& rng);

struct GradSuiteReport {
    struct Entry {
        std::string term;
        double max_rel_err = 0.0;
        bool pass = false;
    };
    std::vector<Entry> entries;
    bool all_pass = false;
};

// Finite-difference validation of every loss term on small random instances
// (n=8, d=5, K=3). `inject_bug` corrupts one analytic coordinate so the
// harness can prove its own sensitivity.
GradSuiteReport run_gradient_suite(bool inject_bug = false, double tolerance = 1e-4);

std::string encoders_to_json_text(const EncoderSet& enc);
EncoderSet encoders_from_json_text(const std::string& text);

std::string history_to_csv(const std::vector<StepLog>& history);

}  // namespace darec
