#pragma once

// Capability-suppression (unlearning) methods. Each transforms a trained base
// model into a series of evenly spaced checkpoints. Full fine-tuning for the
// activation/meta methods (random-misdirection family, representation
// noising, tamper-resistance meta-training, projection fitting); low-rank
// adapters for gradient-difference, option-entropy, and representation-
// rerouting training.

#include "tb/corpus.hpp"
#include "tb/model.hpp"
#include "tb/optim.hpp"

#include <optional>
#include <string>
#include <vector>

namespace tb {

enum class UnlearnMethod { GradDiff, Rmu, RmuLat, RepNoise, Elm, Rr, Tar, Pbj };

const char* method_name(UnlearnMethod m);
UnlearnMethod method_from_name(const std::string& s);
std::vector<UnlearnMethod> all_methods();

struct LoraSpec {
    int rank = 8;
    double alpha = 16.0;
    double dropout = 0.0;  // carried for config fidelity; not applied
};

struct UnlearnConfig {
    UnlearnMethod method = UnlearnMethod::Rmu;
    int steps = 64;
    int batch_size = 8;
    int checkpoint_count = 8;
    double lr = 1e-3;
    uint64_t seed = 0;

    // GradDiff
    double gd_beta = 14.0;
    // adapter methods
    LoraSpec lora;
    // random-misdirection family
    std::vector<int> rmu_layers = {5, 6, 7};
    double rmu_alpha = 90.0;
    double rmu_steer = 20.0;
    // latent adversary (RmuLat)
    double lat_epsilon = 2.0;
    int lat_steps = 4;
    int lat_layer = 3;
    double lat_lr = 0.5;
    // representation noising
    double rn_alpha = 2.0;
    double rn_beta = 0.01;
    std::vector<int> rn_layers = {4, 5, 6, 7};
    // option-entropy (ELM-style)
    double elm_retain_coeff = 1.0;
    double elm_unlearn_coeff = 6.0;
    // representation rerouting
    std::vector<int> rr_layers = {3, 6};
    double rr_lorra_alpha = 10.0;
    // tamper-resistance meta-training
    int tar_inner_steps = 4;
    double tar_inner_lr = 1e-2;
    double tar_rep_coeff = 1.0;
    double tar_nll_coeff = 1.0;
    // projection fitting
    std::vector<int> pbj_layers = {2, 3, 4, 5};
    int pbj_iterations = 8;
    double pbj_damping = 1e-5;

    static UnlearnConfig defaults_for(UnlearnMethod m);
};

struct UnlearnData {
    std::vector<TokenSeq> forget_corpus;
    std::vector<TokenSeq> retain_corpus;   // benign text, preserves utility
    std::vector<QAItem> forget_qa;         // QA contexts for ELM / projection fitting
};

struct CheckpointSeries {
    std::string method;
    std::vector<int> step_indices;      // strictly increasing, evenly spaced
    std::vector<std::string> blobs;     // snapshot per checkpoint
    std::vector<double> losses;         // per training step
    bool aborted = false;               // divergence produced a partial series
    std::string abort_reason;
};

CheckpointSeries run_unlearning(const Model& base, const UnlearnConfig& cfg,
                                const UnlearnData& data);

// argmax unlearning score; ties break to the earliest step index
int select_best_checkpoint(const CheckpointSeries& series, const std::vector<double>& scores);

// --------------------------------------------------- method loss primitives

// retain NLL minus beta-weighted forget NLL (value only)
double loss_grad_diff(const Model& m, const TokenBatch& forget_batch,
                      const TokenBatch& retain_batch, double beta);

// residual-stream activation after block `layer` for every sequence
std::vector<Mat<float>> activations_after(const Model& m, const ForwardResult<float>& fwd,
                                          int layer);

struct RmuStepStats {
    double forget_term = 0.0;
    double retain_term = 0.0;
    double loss = 0.0;
};
// one optimizer step; updates only the parameters of the target layers.
// control is the fixed random unit direction for the run; perturb, when
// given, is a per-sequence latent injection applied to the forget branch.
RmuStepStats rmu_step(Model& m, const Model& frozen_base, AdamW& opt,
                      const TokenBatch& forget_batch, const TokenBatch& retain_batch,
                      const std::vector<int>& layers, double alpha, double steer_coeff,
                      const Vec<float>& control,
                      const std::vector<Injection<float>>& forget_perturb = {});

struct LatentAttackResult {
    std::vector<Injection<float>> perturbations;  // one per sequence
    double nll_before = 0.0;
    double nll_after = 0.0;
    double max_norm = 0.0;  // largest per-sequence norm observed post-projection
};
// projected gradient ascent on forget NLL at a latent hook; every
// perturbation keeps l2 norm <= epsilon after every projection
LatentAttackResult lat_inner_attack(const Model& m, const TokenBatch& forget_batch, int layer,
                                    double epsilon, int n_steps, double step_size);

struct RepNoiseParts {
    double retain_nll = 0.0;
    double noise_div = 0.0;   // diagonal-moment divergence to a standard Gaussian
    double forget_nll = 0.0;  // ascent term enters negatively
    double total(double alpha, double beta) const {
        return retain_nll + alpha * noise_div - beta * forget_nll;
    }
    bool jitter_applied = false;
};
RepNoiseParts repnoise_parts(const Model& m, const TokenBatch& forget_batch,
                             const TokenBatch& retain_batch, const std::vector<int>& layers);
double repnoise_loss(const Model& m, const TokenBatch& forget_batch,
                     const TokenBatch& retain_batch, const std::vector<int>& layers, double alpha,
                     double beta);

// KL(answer-option distribution || uniform over the 4 options), averaged over
// QA contexts, plus retain NLL
struct ElmParts {
    double unlearn_kl = 0.0;
    double retain_nll = 0.0;
    double total(double uc, double rc) const { return uc * unlearn_kl + rc * retain_nll; }
};
ElmParts elm_parts(const Model& m, const std::vector<QAItem>& forget_qa,
                   const TokenBatch& retain_batch);
double elm_loss(const Model& m, const std::vector<QAItem>& forget_qa,
                const TokenBatch& retain_batch, double unlearn_coeff, double retain_coeff);

struct RrParts {
    double forget_cos = 0.0;    // mean ReLU(cosine) to frozen-base activations
    double retain_dist = 0.0;   // mean distance to frozen-base activations
    int skipped_tokens = 0;     // zero-norm activations skipped
};
RrParts rr_parts(const Model& m, const Model& frozen_base, const TokenBatch& forget_batch,
                 const TokenBatch& retain_batch, const std::vector<int>& layers);
double rr_loss(const Model& m, const Model& frozen_base, const TokenBatch& forget_batch,
               const TokenBatch& retain_batch, const std::vector<int>& layers,
               double lorra_alpha, double progress);

struct TarStepStats {
    double post_adversary_forget_nll = 0.0;
    double retain_nll = 0.0;
    double retain_rep = 0.0;
    bool adversary_restarted = false;
};
TarStepStats tar_meta_step(Model& m, const Model& frozen_base, AdamW& opt,
                           const TokenBatch& forget_batch, const TokenBatch& retain_batch,
                           int inner_steps, double inner_lr, double retain_rep_coeff,
                           double retain_nll_coeff, Rng& rng);

struct PbjIterationLog {
    int layer = -1;
    double ratio = 0.0;
    double harm = 0.0;
    double denom = 0.0;
    int rejected_candidates = 0;
};
// Rank-1 activation-space projection selection: maximize first-order forget
// margin harm per unit retain second-moment disturbance (damped Rayleigh
// quotient, solved as a generalized eigenproblem). One projection per
// iteration, merged into the model's latent projections.
std::vector<PbjIterationLog> pbj_fit(Model& m, const std::vector<QAItem>& forget_qa,
                                     const std::vector<TokenSeq>& retain_corpus,
                                     const std::vector<int>& layers, int iterations,
                                     double damping);

// forget-margin harm / retain-moment matrices for one layer (exposed for the
// brute-force direction oracle)
void pbj_objective_matrices(const Model& m, const std::vector<QAItem>& forget_qa,
                            const std::vector<TokenSeq>& retain_corpus, int layer,
                            Mat<float>& harm, Mat<float>& retain_moment);

}  // namespace tb
