#include "tb/optim.hpp"

namespace tb {

ParamRefs resolve_trainables(Model& m, const std::vector<std::string>& names) {
    ParamRefs refs;
    for (const auto& n : names) {
        if (n.rfind("adapter[", 0) == 0) {
            size_t idx = std::stoul(n.substr(8));
            if (idx >= m.adapters.size())
                throw std::invalid_argument("resolve_trainables: no adapter " + n);
            if (n.size() < 2) throw std::invalid_argument("bad adapter ref " + n);
            char which = n.back();
            refs.emplace_back(n, which == 'A' ? &m.adapters[idx].A : &m.adapters[idx].B);
        } else {
            Mat<float>* p = m.find_param(n);
            if (!p) throw std::invalid_argument("resolve_trainables: unknown parameter " + n);
            refs.emplace_back(n, p);
        }
    }
    return refs;
}

std::vector<std::string> all_param_names(const Model& m) {
    std::vector<std::string> names;
    for (auto& [n, p] : m.named_params()) names.push_back(n);
    return names;
}

std::vector<std::string> layer_param_names(const Model& m, const std::vector<int>& layers) {
    std::vector<std::string> names;
    for (int l : layers) {
        if (l < 0 || l >= m.config.n_layers)
            throw std::invalid_argument("layer_param_names: layer out of range");
        std::string p = "layer" + std::to_string(l) + ".";
        for (const char* tail :
             {"attn_norm.g", "wq", "wk", "wv", "wo", "mlp_norm.g", "w1", "w2"})
            names.push_back(p + tail);
    }
    return names;
}

std::vector<std::string> adapter_param_names(const Model& m) {
    std::vector<std::string> names;
    for (size_t i = 0; i < m.adapters.size(); ++i) {
        names.push_back("adapter[" + std::to_string(i) + "].A");
        names.push_back("adapter[" + std::to_string(i) + "].B");
    }
    return names;
}

void accumulate_grads(std::map<std::string, Mat<float>>& dst,
                      const std::map<std::string, Mat<float>>& src, float scale) {
    for (const auto& [name, g] : src) {
        auto it = dst.find(name);
        if (it == dst.end())
            dst[name] = scale * g;
        else
            it->second += scale * g;
    }
}

void AdamW::step(const ParamRefs& params, const std::map<std::string, Mat<float>>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Mat<float>& g = git->second;
        auto [it, fresh] = state_.try_emplace(name, std::make_pair(Mat<float>(), Mat<float>()));
        auto& [mm, vv] = it->second;
        if (fresh) {
            mm = Mat<float>::Zero(p->rows(), p->cols());
            vv = Mat<float>::Zero(p->rows(), p->cols());
        }
        mm = static_cast<float>(b1_) * mm + static_cast<float>(1.0 - b1_) * g;
        vv = static_cast<float>(b2_) * vv +
             static_cast<float>(1.0 - b2_) * g.cwiseProduct(g);
        Mat<float> mhat = mm / static_cast<float>(bc1);
        Mat<float> vhat = vv / static_cast<float>(bc2);
        if (wd_ != 0.0) *p -= static_cast<float>(lr_ * wd_) * (*p);
        p->array() -= static_cast<float>(lr_) * mhat.array() /
                      (vhat.array().sqrt() + static_cast<float>(eps_));
    }
}

void sgd_step(const ParamRefs& params, const std::map<std::string, Mat<float>>& grads, float lr) {
    for (auto& [name, p] : params) {
        auto it = grads.find(name);
        if (it != grads.end()) *p -= lr * it->second;
    }
}

std::vector<std::vector<uint8_t>> lm_mask(const TokenBatch& batch) {
    std::vector<std::vector<uint8_t>> m(batch.size());
    for (size_t s = 0; s < batch.size(); ++s) {
        m[s].assign(batch[s].size(), 1);
        m[s][0] = 0;
    }
    return m;
}

TokenBatch BatchSampler::next() {
    TokenBatch batch;
    batch.reserve(batch_size_);
    for (int i = 0; i < batch_size_; ++i) {
        if (cursor_ >= order_.size()) reshuffle();
        batch.push_back((*corpus_)[order_[cursor_++]]);
    }
    return batch;
}

void BatchSampler::reshuffle() {
    order_.resize(corpus_->size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_);
    cursor_ = 0;
}

TrainStats train_lm(Model& m, const std::vector<TokenSeq>& corpus, int steps, int batch_size,
                    double lr, Rng rng, const std::vector<std::string>& trainable) {
    if (corpus.empty()) throw std::invalid_argument("train_lm: empty corpus");
    std::vector<std::string> names = trainable.empty() ? all_param_names(m) : trainable;
    ParamRefs refs = resolve_trainables(m, names);
    GradSelector sel = trainable.empty() ? GradSelector::all() : GradSelector::subset(names);
    AdamW opt(lr);
    BatchSampler sampler(corpus, batch_size, rng);
    TrainStats stats;
    for (int step = 0; step < steps; ++step) {
        TokenBatch batch = sampler.next();
        auto mask = lm_mask(batch);
        auto fwd = m.forward(batch, {}, true);
        double loss = m.nll_from_logits(fwd.logits, batch, mask);
        auto seeds = m.nll_seeds(fwd.logits, batch, mask);
        auto grads = m.backward(fwd, seeds, sel);
        opt.step(refs, grads.params);
        stats.losses.push_back(loss);
    }
    stats.final_loss = stats.losses.empty() ? 0.0 : stats.losses.back();
    return stats;
}

}  // namespace tb
