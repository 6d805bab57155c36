#pragma once

#include "tb/model.hpp"

#include <map>
#include <string>
#include <vector>

namespace tb {

// Named references into a model's trainable matrices, including adapter
// factors addressed as adapter[i].A / adapter[i].B.
using ParamRefs = std::vector<std::pair<std::string, Mat<float>*>>;

ParamRefs resolve_trainables(Model& m, const std::vector<std::string>& names);
std::vector<std::string> all_param_names(const Model& m);
std::vector<std::string> layer_param_names(const Model& m, const std::vector<int>& layers);
std::vector<std::string> adapter_param_names(const Model& m);

// merge src gradients into dst (dst += scale * src), creating missing keys
void accumulate_grads(std::map<std::string, Mat<float>>& dst,
                      const std::map<std::string, Mat<float>>& src, float scale = 1.0f);

class AdamW {
public:
    explicit AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                   double weight_decay = 0.0)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

    void step(const ParamRefs& params, const std::map<std::string, Mat<float>>& grads);
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

private:
    double lr_, b1_, b2_, eps_, wd_;
    int64_t t_ = 0;
    std::map<std::string, std::pair<Mat<float>, Mat<float>>> state_;
};

// plain SGD, used by inner adversaries
void sgd_step(const ParamRefs& params, const std::map<std::string, Mat<float>>& grads, float lr);

// mask selecting every predictable position (all but the first token)
std::vector<std::vector<uint8_t>> lm_mask(const TokenBatch& batch);

// cycling mini-batch sampler over a corpus, deterministic in the rng
class BatchSampler {
public:
    BatchSampler(const std::vector<TokenSeq>& corpus, int batch_size, Rng rng)
        : corpus_(&corpus), batch_size_(batch_size), rng_(rng) {
        reshuffle();
    }
    TokenBatch next();

private:
    void reshuffle();
    const std::vector<TokenSeq>* corpus_;
    int batch_size_;
    Rng rng_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
};

struct TrainStats {
    std::vector<double> losses;  // one per step
    double final_loss = 0.0;
};

// plain LM fine-tuning on a corpus; trains exactly the given refs (or all
// parameters when refs is empty). One forward + one backward per step.
TrainStats train_lm(Model& m, const std::vector<TokenSeq>& corpus, int steps, int batch_size,
                    double lr, Rng rng, const std::vector<std::string>& trainable = {});

}  // namespace tb
