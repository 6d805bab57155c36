#include "tb/unlearn.hpp"

#include "tb/checkpoint.hpp"
#include "tb/eval.hpp"

#include <algorithm>
#include <cmath>

namespace tb {

const char* method_name(UnlearnMethod m) {
    switch (m) {
        case UnlearnMethod::GradDiff: return "grad_diff";
        case UnlearnMethod::Rmu: return "rmu";
        case UnlearnMethod::RmuLat: return "rmu_lat";
        case UnlearnMethod::RepNoise: return "rep_noise";
        case UnlearnMethod::Elm: return "elm";
        case UnlearnMethod::Rr: return "rr";
        case UnlearnMethod::Tar: return "tar";
        case UnlearnMethod::Pbj: return "pbj";
    }
    return "?";
}

UnlearnMethod method_from_name(const std::string& s) {
    for (auto m : all_methods())
        if (s == method_name(m)) return m;
    throw std::invalid_argument("unknown unlearning method: " + s);
}

std::vector<UnlearnMethod> all_methods() {
    return {UnlearnMethod::GradDiff, UnlearnMethod::Rmu,  UnlearnMethod::RmuLat,
            UnlearnMethod::RepNoise, UnlearnMethod::Elm,  UnlearnMethod::Rr,
            UnlearnMethod::Tar,      UnlearnMethod::Pbj};
}

UnlearnConfig UnlearnConfig::defaults_for(UnlearnMethod m) {
    UnlearnConfig c;
    c.method = m;
    switch (m) {
        case UnlearnMethod::GradDiff:
            c.lora = {8, 4.0, 0.05};
            c.lr = 1e-2;
            c.batch_size = 16;
            break;
        case UnlearnMethod::Rmu:
        case UnlearnMethod::RmuLat:
            c.lr = 8e-3;
            break;
        case UnlearnMethod::RepNoise:
            c.lr = 2e-3;
            break;
        case UnlearnMethod::Elm:
            c.lora = {8, 2.0, 0.05};
            c.lr = 1e-2;
            break;
        case UnlearnMethod::Rr:
            c.lora = {8, 8.0, 0.05};
            c.lr = 1e-2;
            break;
        case UnlearnMethod::Tar:
            c.lr = 1e-3;
            break;
        case UnlearnMethod::Pbj:
            break;
    }
    return c;
}

// ----------------------------------------------------------------- utilities

std::vector<Mat<float>> activations_after(const Model& m, const ForwardResult<float>& fwd,
                                          int layer) {
    if (fwd.traces.empty())
        throw std::invalid_argument("activations_after: forward was not traced");
    if (layer < 0 || layer >= m.config.n_layers)
        throw std::invalid_argument("activations_after: layer out of range");
    std::vector<Mat<float>> out;
    out.reserve(fwd.traces.size());
    for (const auto& tr : fwd.traces) {
        if (layer + 1 == m.config.n_layers)
            out.push_back(tr.xf_in);
        else
            out.push_back(tr.layers[layer + 1].h_in);
    }
    return out;
}

namespace {

// dL/dh contribution on the activation after `layer` for sequence s
HookSeed<float> act_seed(int s, int layer, Mat<float> d) {
    HookSeed<float> hs;
    hs.seq = s;
    hs.point.kind = HookKind::Latent;
    hs.point.layer = layer + 1;  // n_layers addresses the final hidden state
    hs.point.pos_begin = 0;
    hs.point.pos_end = static_cast<int>(d.rows());
    hs.d = std::move(d);
    return hs;
}

int64_t total_tokens(const TokenBatch& b) {
    int64_t n = 0;
    for (const auto& s : b) n += static_cast<int64_t>(s.size());
    return n;
}

std::vector<std::string> add_lora_everywhere(Model& m, const LoraSpec& spec, uint64_t seed) {
    int idx = 0;
    for (int l = 0; l < m.config.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        for (const char* tail : {"wq", "wk", "wv", "wo", "w1", "w2"})
            m.add_adapter(p + tail, spec.rank, spec.alpha, seed + 1000 * idx++);
    }
    return adapter_param_names(m);
}

struct QaSampler {
    const std::vector<QAItem>* items;
    Rng rng;
    std::vector<size_t> order;
    size_t cursor = 0;
    QaSampler(const std::vector<QAItem>& it, Rng r) : items(&it), rng(r) { reshuffle(); }
    void reshuffle() {
        order.resize(items->size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        cursor = 0;
    }
    std::vector<QAItem> next(int n) {
        std::vector<QAItem> out;
        for (int i = 0; i < n; ++i) {
            if (cursor >= order.size()) reshuffle();
            out.push_back((*items)[order[cursor++]]);
        }
        return out;
    }
};

}  // namespace

// ----------------------------------------------------------------- GradDiff

double loss_grad_diff(const Model& m, const TokenBatch& forget_batch,
                      const TokenBatch& retain_batch, double beta) {
    if (forget_batch.empty() || retain_batch.empty())
        throw std::invalid_argument("loss_grad_diff: empty batch");
    double f = m.nll_loss(forget_batch, lm_mask(forget_batch));
    double r = m.nll_loss(retain_batch, lm_mask(retain_batch));
    return r - beta * f;
}

// ---------------------------------------------------------------- RMU family

RmuStepStats rmu_step(Model& m, const Model& frozen_base, AdamW& opt,
                      const TokenBatch& forget_batch, const TokenBatch& retain_batch,
                      const std::vector<int>& layers, double alpha, double steer_coeff,
                      const Vec<float>& control,
                      const std::vector<Injection<float>>& forget_perturb) {
    for (int l : layers)
        if (l < 0 || l >= m.config.n_layers)
            throw std::invalid_argument("rmu_step: target layer out of range");
    const int d = m.config.d_model;
    RowVec<float> target = static_cast<float>(steer_coeff) * control.transpose();

    auto fwd_f = m.forward(forget_batch, forget_perturb, true);
    auto fwd_r = m.forward(retain_batch, {}, true);
    auto fwd_r0 = frozen_base.forward(retain_batch, {}, true);

    const double nf = static_cast<double>(total_tokens(forget_batch)) * d * layers.size();
    const double nr = static_cast<double>(total_tokens(retain_batch)) * d * layers.size();

    RmuStepStats stats;
    BackwardSeeds<float> seeds_f, seeds_r;
    for (int l : layers) {
        auto acts_f = activations_after(m, fwd_f, l);
        auto acts_r = activations_after(m, fwd_r, l);
        auto acts_r0 = activations_after(frozen_base, fwd_r0, l);
        for (size_t s = 0; s < acts_f.size(); ++s) {
            Mat<float> diff = acts_f[s].rowwise() - target;
            stats.forget_term += diff.squaredNorm() / nf;
            seeds_f.dhidden.push_back(act_seed((int)s, l, (float)(2.0 / nf) * diff));
        }
        for (size_t s = 0; s < acts_r.size(); ++s) {
            Mat<float> diff = acts_r[s] - acts_r0[s];
            stats.retain_term += diff.squaredNorm() / nr;
            seeds_r.dhidden.push_back(act_seed((int)s, l, (float)(alpha * 2.0 / nr) * diff));
        }
    }
    stats.loss = stats.forget_term + alpha * stats.retain_term;

    auto names = layer_param_names(m, layers);
    auto sel = GradSelector::subset(names);
    auto g = m.backward(fwd_f, seeds_f, sel);
    auto g2 = m.backward(fwd_r, seeds_r, sel);
    accumulate_grads(g.params, g2.params);
    opt.step(resolve_trainables(m, names), g.params);
    return stats;
}

LatentAttackResult lat_inner_attack(const Model& m, const TokenBatch& forget_batch, int layer,
                                    double epsilon, int n_steps, double step_size) {
    if (epsilon <= 0.0) throw std::invalid_argument("lat_inner_attack: epsilon must be > 0");
    if (layer < 0 || layer >= m.config.n_layers)
        throw std::invalid_argument("lat_inner_attack: layer out of range");
    LatentAttackResult res;
    const int d = m.config.d_model;
    std::vector<Injection<float>> cur;
    for (size_t s = 0; s < forget_batch.size(); ++s) {
        Injection<float> inj;
        inj.point = {HookKind::Latent, layer, 0, static_cast<int>(forget_batch[s].size())};
        inj.delta = Mat<float>::Zero(forget_batch[s].size(), d);
        inj.seq = static_cast<int>(s);
        cur.push_back(std::move(inj));
    }
    if (n_steps == 0) {
        res.perturbations = cur;
        return res;
    }

    auto mask = lm_mask(forget_batch);
    std::vector<Injection<float>> best = cur;
    double best_loss = -1e300;
    for (int step = 0; step < n_steps; ++step) {
        auto fwd = m.forward(forget_batch, cur, true);
        double loss = m.nll_from_logits(fwd.logits, forget_batch, mask);
        if (step == 0) res.nll_before = loss;
        if (loss > best_loss) {
            best_loss = loss;
            best = cur;
        }
        auto seeds = m.nll_seeds(fwd.logits, forget_batch, mask);
        auto g = m.backward(fwd, seeds, GradSelector::embedding_input());
        for (size_t i = 0; i < cur.size(); ++i) {
            cur[i].delta += static_cast<float>(step_size) * g.d_injections[i];  // ascent
            float norm = cur[i].delta.norm();
            if (norm > epsilon) cur[i].delta *= static_cast<float>(epsilon) / norm;
            res.max_norm = std::max(res.max_norm, (double)cur[i].delta.norm());
        }
    }
    res.nll_after = best_loss;
    res.perturbations = std::move(best);
    return res;
}

// ----------------------------------------------------------------- RepNoise

namespace {

struct MomentSeeds {
    double divergence = 0.0;
    bool jitter = false;
    std::vector<HookSeed<float>> seeds;  // unscaled; caller applies alpha
};

MomentSeeds moment_divergence(const Model& m, const ForwardResult<float>& fwd,
                              const std::vector<int>& layers) {
    MomentSeeds out;
    const int d = m.config.d_model;
    for (int l : layers) {
        auto acts = activations_after(m, fwd, l);
        int64_t n = 0;
        for (const auto& a : acts) n += a.rows();
        RowVec<float> mu = RowVec<float>::Zero(d);
        for (const auto& a : acts) mu += a.colwise().sum();
        mu /= static_cast<float>(n);
        RowVec<float> var = RowVec<float>::Zero(d);
        for (const auto& a : acts)
            var += (a.rowwise() - mu).array().square().colwise().sum().matrix();
        var /= static_cast<float>(n);
        const float jit = 1e-8f;
        if ((var.array() < 1e-6f).any()) out.jitter = true;
        RowVec<float> vj = var.array() + jit;
        // mean-per-dimension KL(N(mu, diag(var)) || N(0, I))
        double kl = 0.0;
        for (int j = 0; j < d; ++j)
            kl += 0.5 * (vj(j) + mu(j) * mu(j) - 1.0 - std::log(vj(j)));
        kl /= d;
        out.divergence += kl / layers.size();
        for (size_t s = 0; s < acts.size(); ++s) {
            Mat<float> g(acts[s].rows(), d);
            for (int j = 0; j < d; ++j) {
                float dmu = mu(j) / d;
                float dvar = 0.5f * (1.0f - 1.0f / vj(j)) / d;
                for (int t = 0; t < acts[s].rows(); ++t)
                    g(t, j) = (dmu + dvar * 2.0f * (acts[s](t, j) - mu(j))) /
                              static_cast<float>(n) / layers.size();
            }
            out.seeds.push_back(act_seed((int)s, l, std::move(g)));
        }
    }
    return out;
}

}  // namespace

RepNoiseParts repnoise_parts(const Model& m, const TokenBatch& forget_batch,
                             const TokenBatch& retain_batch, const std::vector<int>& layers) {
    RepNoiseParts parts;
    auto fwd_f = m.forward(forget_batch, {}, true);
    parts.forget_nll = m.nll_from_logits(fwd_f.logits, forget_batch, lm_mask(forget_batch));
    parts.retain_nll = m.nll_loss(retain_batch, lm_mask(retain_batch));
    auto mom = moment_divergence(m, fwd_f, layers);
    parts.noise_div = mom.divergence;
    parts.jitter_applied = mom.jitter;
    return parts;
}

double repnoise_loss(const Model& m, const TokenBatch& forget_batch,
                     const TokenBatch& retain_batch, const std::vector<int>& layers, double alpha,
                     double beta) {
    return repnoise_parts(m, forget_batch, retain_batch, layers).total(alpha, beta);
}

// ---------------------------------------------------------------------- ELM

ElmParts elm_parts(const Model& m, const std::vector<QAItem>& forget_qa,
                   const TokenBatch& retain_batch) {
    if (forget_qa.empty()) throw std::invalid_argument("elm: empty QA batch");
    ElmParts parts;
    auto fwd = m.forward(qa_question_batch(forget_qa), {}, false);
    for (size_t i = 0; i < forget_qa.size(); ++i) {
        const auto& it = forget_qa[i];
        int last = static_cast<int>(it.question.size()) - 1;
        Eigen::Vector4f z;
        for (int o = 0; o < 4; ++o) z(o) = fwd.logits[i](last, it.options[o][0]);
        Eigen::Vector4f q = (z.array() - z.maxCoeff()).exp();
        q /= q.sum();
        double kl = 0.0;
        for (int o = 0; o < 4; ++o)
            if (q(o) > 0) kl += q(o) * std::log(4.0 * q(o));
        parts.unlearn_kl += kl / forget_qa.size();
    }
    parts.retain_nll = m.nll_loss(retain_batch, lm_mask(retain_batch));
    return parts;
}

double elm_loss(const Model& m, const std::vector<QAItem>& forget_qa,
                const TokenBatch& retain_batch, double unlearn_coeff, double retain_coeff) {
    return elm_parts(m, forget_qa, retain_batch).total(unlearn_coeff, retain_coeff);
}

namespace {

// dlogits seeds for the option-distribution KL term (mean over items)
std::pair<double, BackwardSeeds<float>> elm_kl_value_and_seeds(const std::vector<QAItem>& items,
                                                               const ForwardResult<float>& fwd,
                                                               float scale) {
    BackwardSeeds<float> seeds;
    seeds.dlogits.resize(items.size());
    const float w = scale / static_cast<float>(items.size());
    double total_kl = 0.0;
    for (size_t i = 0; i < items.size(); ++i) {
        const auto& it = items[i];
        int last = static_cast<int>(it.question.size()) - 1;
        seeds.dlogits[i] = Mat<float>::Zero(fwd.logits[i].rows(), fwd.logits[i].cols());
        Eigen::Vector4f z;
        for (int o = 0; o < 4; ++o) z(o) = fwd.logits[i](last, it.options[o][0]);
        Eigen::Vector4f q = (z.array() - z.maxCoeff()).exp();
        q /= q.sum();
        double kl = 0.0;
        for (int o = 0; o < 4; ++o)
            if (q(o) > 0) kl += q(o) * std::log(4.0 * q(o));
        total_kl += kl / items.size();
        for (int o = 0; o < 4; ++o) {
            float dz = q(o) * (std::log(4.0f * std::max(q(o), 1e-30f)) - (float)kl);
            seeds.dlogits[i](last, it.options[o][0]) += w * dz;
        }
    }
    return {total_kl, std::move(seeds)};
}

}  // namespace

// ----------------------------------------------------------------------- RR

RrParts rr_parts(const Model& m, const Model& frozen_base, const TokenBatch& forget_batch,
                 const TokenBatch& retain_batch, const std::vector<int>& layers) {
    RrParts parts;
    auto fwd_f = m.forward(forget_batch, {}, true);
    auto fwd_r = m.forward(retain_batch, {}, true);
    auto fwd_f0 = frozen_base.forward(forget_batch, {}, true);
    auto fwd_r0 = frozen_base.forward(retain_batch, {}, true);
    int64_t nf = 0, nr = 0;
    for (int l : layers) {
        auto af = activations_after(m, fwd_f, l);
        auto af0 = activations_after(frozen_base, fwd_f0, l);
        for (size_t s = 0; s < af.size(); ++s) {
            for (int t = 0; t < af[s].rows(); ++t) {
                float na = af[s].row(t).norm(), nb = af0[s].row(t).norm();
                if (na < 1e-12f || nb < 1e-12f) {
                    ++parts.skipped_tokens;
                    continue;
                }
                parts.forget_cos += std::max(0.0f, af[s].row(t).dot(af0[s].row(t)) / (na * nb));
                ++nf;
            }
        }
        auto ar = activations_after(m, fwd_r, l);
        auto ar0 = activations_after(frozen_base, fwd_r0, l);
        for (size_t s = 0; s < ar.size(); ++s) {
            for (int t = 0; t < ar[s].rows(); ++t) {
                parts.retain_dist += (ar[s].row(t) - ar0[s].row(t)).norm();
                ++nr;
            }
        }
    }
    if (nf > 0) parts.forget_cos /= nf;
    if (nr > 0) parts.retain_dist /= nr;
    return parts;
}

double rr_loss(const Model& m, const Model& frozen_base, const TokenBatch& forget_batch,
               const TokenBatch& retain_batch, const std::vector<int>& layers,
               double lorra_alpha, double progress) {
    auto parts = rr_parts(m, frozen_base, forget_batch, retain_batch, layers);
    double cf = lorra_alpha * (1.0 - progress);
    double cr = lorra_alpha * progress;
    return cf * parts.forget_cos + cr * parts.retain_dist;
}

// ----------------------------------------------------------------------- TAR

TarStepStats tar_meta_step(Model& m, const Model& frozen_base, AdamW& opt,
                           const TokenBatch& forget_batch, const TokenBatch& retain_batch,
                           int inner_steps, double inner_lr, double retain_rep_coeff,
                           double retain_nll_coeff, Rng& rng) {
    (void)rng;  // adversary is deterministic; kept for interface stability
    TarStepStats stats;
    auto f_mask = lm_mask(forget_batch);
    auto r_mask = lm_mask(retain_batch);
    auto all_names = all_param_names(m);

    auto run_adversary = [&](double lr) {
        Model adv = m;
        auto refs = resolve_trainables(adv, all_names);
        for (int k = 0; k < inner_steps; ++k) {
            auto fwd = adv.forward(forget_batch, {}, true);
            auto seeds = adv.nll_seeds(fwd.logits, forget_batch, f_mask);
            auto g = adv.backward(fwd, seeds, GradSelector::all());
            sgd_step(refs, g.params, static_cast<float>(lr));
        }
        return adv;
    };
    Model adv = run_adversary(inner_lr);
    auto fwd_adv = adv.forward(forget_batch, {}, true);
    stats.post_adversary_forget_nll = adv.nll_from_logits(fwd_adv.logits, forget_batch, f_mask);
    if (!std::isfinite(stats.post_adversary_forget_nll)) {
        stats.adversary_restarted = true;
        adv = run_adversary(inner_lr * 0.1);
        fwd_adv = adv.forward(forget_batch, {}, true);
        stats.post_adversary_forget_nll =
            adv.nll_from_logits(fwd_adv.logits, forget_batch, f_mask);
        if (!std::isfinite(stats.post_adversary_forget_nll))
            throw std::runtime_error("tar_meta_step: inner adversary diverged twice");
    }
    // first-order tamper-resistance gradient: ascend the adversary's final
    // forget NLL, evaluated at the post-adversary weights
    auto adv_seeds = adv.nll_seeds(fwd_adv.logits, forget_batch, f_mask, -1.0);
    auto tamper_grads = adv.backward(fwd_adv, adv_seeds, GradSelector::all());

    auto fwd_r = m.forward(retain_batch, {}, true);
    stats.retain_nll = m.nll_from_logits(fwd_r.logits, retain_batch, r_mask);
    auto seeds_r = m.nll_seeds(fwd_r.logits, retain_batch, r_mask, retain_nll_coeff);

    auto fwd_r0 = frozen_base.forward(retain_batch, {}, true);
    const int d = m.config.d_model;
    const double nr = static_cast<double>(total_tokens(retain_batch)) * d * m.config.n_layers;
    for (int l = 0; l < m.config.n_layers; ++l) {
        auto a = activations_after(m, fwd_r, l);
        auto a0 = activations_after(frozen_base, fwd_r0, l);
        for (size_t s = 0; s < a.size(); ++s) {
            Mat<float> diff = a[s] - a0[s];
            stats.retain_rep += diff.squaredNorm() / nr;
            seeds_r.dhidden.push_back(
                act_seed((int)s, l, (float)(retain_rep_coeff * 2.0 / nr) * diff));
        }
    }
    auto grads = m.backward(fwd_r, seeds_r, GradSelector::all());
    accumulate_grads(grads.params, tamper_grads.params);
    opt.step(resolve_trainables(m, all_names), grads.params);
    return stats;
}

// ---------------------------------------------------------------------- PBJ

void pbj_objective_matrices(const Model& m, const std::vector<QAItem>& forget_qa,
                            const std::vector<TokenSeq>& retain_corpus, int layer,
                            Mat<float>& harm, Mat<float>& retain_moment) {
    const int d = m.config.d_model;
    // forget margin = correct-option logit minus log-sum-exp of distractor
    // logits, averaged over items; gradient taken at the target latent hook
    auto batch = qa_question_batch(forget_qa);
    auto fwd = m.forward(batch, {}, true);
    BackwardSeeds<float> seeds;
    seeds.dlogits.resize(batch.size());
    const float w = 1.0f / static_cast<float>(forget_qa.size());
    for (size_t i = 0; i < forget_qa.size(); ++i) {
        const auto& it = forget_qa[i];
        int last = static_cast<int>(it.question.size()) - 1;
        seeds.dlogits[i] = Mat<float>::Zero(fwd.logits[i].rows(), fwd.logits[i].cols());
        Eigen::Vector3f zd;
        int k = 0;
        for (int o = 0; o < 4; ++o)
            if (o != it.correct_index) zd(k++) = fwd.logits[i](last, it.options[o][0]);
        Eigen::Vector3f sd = (zd.array() - zd.maxCoeff()).exp();
        sd /= sd.sum();
        seeds.dlogits[i](last, it.options[it.correct_index][0]) += w;
        k = 0;
        for (int o = 0; o < 4; ++o)
            if (o != it.correct_index) seeds.dlogits[i](last, it.options[o][0]) -= w * sd(k++);
    }
    auto g = m.backward(fwd, seeds, GradSelector::latent(layer));

    harm = Mat<float>::Zero(d, d);
    for (size_t s = 0; s < batch.size(); ++s) {
        const Mat<float>& h = fwd.traces[s].layers[layer].h_in;
        const Mat<float>& gs = g.d_latent[s];
        harm.noalias() += h.transpose() * gs;
    }
    harm = (0.5f * (harm + harm.transpose().eval())).eval();

    auto fwd_r = m.forward(retain_corpus, {}, true);
    retain_moment = Mat<float>::Zero(d, d);
    int64_t n = 0;
    for (const auto& tr : fwd_r.traces) {
        const Mat<float>& h = tr.layers[layer].h_in;
        retain_moment.noalias() += h.transpose() * h;
        n += h.rows();
    }
    retain_moment /= static_cast<float>(n);
}

std::vector<PbjIterationLog> pbj_fit(Model& m, const std::vector<QAItem>& forget_qa,
                                     const std::vector<TokenSeq>& retain_corpus,
                                     const std::vector<int>& layers, int iterations,
                                     double damping) {
    for (int l : layers)
        if (l < 0 || l >= m.config.n_layers)
            throw std::invalid_argument("pbj_fit: layer out of range");
    if (forget_qa.empty() || retain_corpus.empty())
        throw std::invalid_argument("pbj_fit: empty inputs");
    const int d = m.config.d_model;
    std::vector<PbjIterationLog> logs;
    for (int it = 0; it < iterations; ++it) {
        PbjIterationLog best;
        Vec<float> best_u;
        for (int layer : layers) {
            Mat<float> S, A;
            pbj_objective_matrices(m, forget_qa, retain_corpus, layer, S, A);
            Mat<float> B = A + static_cast<float>(damping) * Mat<float>::Identity(d, d);
            Eigen::GeneralizedSelfAdjointEigenSolver<Mat<float>> es(S, B);
            if (es.info() != Eigen::Success) continue;
            int rejected = 0;
            for (int k = d - 1; k >= 0; --k) {  // eigenvalues ascending; best last
                Vec<float> u = es.eigenvectors().col(k);
                float norm = u.norm();
                if (norm < 1e-12f) {
                    ++rejected;
                    continue;
                }
                u /= norm;
                double denom_raw = u.dot(A * u);
                if (denom_raw < damping) {  // retain estimate below the damping floor
                    ++rejected;
                    continue;
                }
                double h = u.dot(S * u);
                double ratio = h / (denom_raw + damping);
                if (ratio > best.ratio) {
                    best.ratio = ratio;
                    best.harm = h;
                    best.denom = denom_raw + damping;
                    best.layer = layer;
                    best.rejected_candidates = rejected;
                    best_u = u;
                }
                break;  // keep only the top acceptable direction per layer
            }
        }
        if (best.layer < 0 || best.harm <= 0.0) {
            best.layer = -1;  // no helpful direction remains
            logs.push_back(best);
            break;
        }
        m.latent_projections[best.layer].push_back(best_u);
        logs.push_back(best);
    }
    return logs;
}

// ------------------------------------------------------------------- runner

int select_best_checkpoint(const CheckpointSeries& series, const std::vector<double>& scores) {
    if (series.blobs.empty()) throw std::invalid_argument("select_best_checkpoint: empty series");
    if (scores.size() != series.blobs.size())
        throw std::invalid_argument("select_best_checkpoint: score count mismatch");
    int best = 0;
    for (size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = static_cast<int>(i);
    return best;
}

CheckpointSeries run_unlearning(const Model& base, const UnlearnConfig& cfg,
                                const UnlearnData& data) {
    if (data.forget_corpus.empty() || data.retain_corpus.empty())
        throw std::invalid_argument("run_unlearning: empty corpus");
    if (cfg.checkpoint_count < 2)
        throw std::invalid_argument("run_unlearning: checkpoint_count must be >= 2");

    CheckpointSeries series;
    series.method = method_name(cfg.method);

    Model m = base;
    const Model& frozen = base;
    Rng rng(cfg.seed ^ fnv1a(series.method));

    if (cfg.method == UnlearnMethod::Pbj) {
        if (data.forget_qa.empty()) throw std::invalid_argument("pbj needs forget QA contexts");
        int iters = cfg.pbj_iterations;
        int C = std::min(cfg.checkpoint_count, iters);
        if (iters % C != 0)
            throw std::invalid_argument("pbj: iterations must be divisible by checkpoint count");
        int per = iters / C;
        std::vector<TokenSeq> retain_sample = data.retain_corpus;
        if (retain_sample.size() > 64) retain_sample.resize(64);
        for (int c = 0; c < C; ++c) {
            auto logs =
                pbj_fit(m, data.forget_qa, retain_sample, cfg.pbj_layers, per, cfg.pbj_damping);
            for (const auto& lg : logs) series.losses.push_back(lg.ratio);
            series.step_indices.push_back((c + 1) * per);
            series.blobs.push_back(snapshot(m));
        }
        return series;
    }

    const int T = cfg.steps;
    const int C = cfg.checkpoint_count;
    if (T == 0) {
        for (int c = 0; c < C; ++c) {
            series.step_indices.push_back(0);
            series.blobs.push_back(snapshot(m));
        }
        return series;
    }
    if (T % C != 0)
        throw std::invalid_argument("run_unlearning: steps must be divisible by checkpoint_count");

    std::vector<std::string> trainable;
    switch (cfg.method) {
        case UnlearnMethod::GradDiff:
        case UnlearnMethod::Elm:
        case UnlearnMethod::Rr:
            trainable = add_lora_everywhere(m, cfg.lora, cfg.seed ^ 0xADULL);
            break;
        default:
            break;
    }

    AdamW opt(cfg.lr);
    BatchSampler forget_sampler(data.forget_corpus, cfg.batch_size, rng.fork(1));
    BatchSampler retain_sampler(data.retain_corpus, cfg.batch_size, rng.fork(2));
    std::optional<QaSampler> qa_sampler;
    if (cfg.method == UnlearnMethod::Elm) {
        if (data.forget_qa.empty()) throw std::invalid_argument("elm needs forget QA contexts");
        qa_sampler.emplace(data.forget_qa, rng.fork(3));
    }
    Vec<float> control;
    if (cfg.method == UnlearnMethod::Rmu || cfg.method == UnlearnMethod::RmuLat) {
        control = Vec<float>::Zero(m.config.d_model);
        Rng crng = rng.fork(4);
        for (int i = 0; i < control.size(); ++i) control(i) = (float)crng.normal();
        control.normalize();
    }
    Rng step_rng = rng.fork(5);

    for (int step = 0; step < T; ++step) {
        double loss = 0.0;
        TokenBatch fb = forget_sampler.next();
        TokenBatch rb = retain_sampler.next();
        switch (cfg.method) {
            case UnlearnMethod::GradDiff: {
                auto f_mask = lm_mask(fb);
                auto r_mask = lm_mask(rb);
                auto fwd_f = m.forward(fb, {}, true);
                auto fwd_r = m.forward(rb, {}, true);
                double fn = m.nll_from_logits(fwd_f.logits, fb, f_mask);
                double rn = m.nll_from_logits(fwd_r.logits, rb, r_mask);
                loss = rn - cfg.gd_beta * fn;
                auto sel = GradSelector::subset(trainable);
                auto gf =
                    m.backward(fwd_f, m.nll_seeds(fwd_f.logits, fb, f_mask, -cfg.gd_beta), sel);
                auto gr = m.backward(fwd_r, m.nll_seeds(fwd_r.logits, rb, r_mask, 1.0), sel);
                accumulate_grads(gr.params, gf.params);
                opt.step(resolve_trainables(m, trainable), gr.params);
                break;
            }
            case UnlearnMethod::Rmu: {
                loss = rmu_step(m, frozen, opt, fb, rb, cfg.rmu_layers, cfg.rmu_alpha,
                                cfg.rmu_steer, control)
                           .loss;
                break;
            }
            case UnlearnMethod::RmuLat: {
                auto lat = lat_inner_attack(m, fb, cfg.lat_layer, cfg.lat_epsilon, cfg.lat_steps,
                                            cfg.lat_lr);
                loss = rmu_step(m, frozen, opt, fb, rb, cfg.rmu_layers, cfg.rmu_alpha,
                                cfg.rmu_steer, control, lat.perturbations)
                           .loss;
                break;
            }
            case UnlearnMethod::RepNoise: {
                auto f_mask = lm_mask(fb);
                auto r_mask = lm_mask(rb);
                auto fwd_f = m.forward(fb, {}, true);
                auto fwd_r = m.forward(rb, {}, true);
                double fn = m.nll_from_logits(fwd_f.logits, fb, f_mask);
                double rn = m.nll_from_logits(fwd_r.logits, rb, r_mask);
                auto mom = moment_divergence(m, fwd_f, cfg.rn_layers);
                loss = rn + cfg.rn_alpha * mom.divergence - cfg.rn_beta * fn;
                auto seeds_f = m.nll_seeds(fwd_f.logits, fb, f_mask, -cfg.rn_beta);
                for (auto& hs : mom.seeds) {
                    hs.d *= static_cast<float>(cfg.rn_alpha);
                    seeds_f.dhidden.push_back(std::move(hs));
                }
                auto gf = m.backward(fwd_f, seeds_f, GradSelector::all());
                auto gr = m.backward(fwd_r, m.nll_seeds(fwd_r.logits, rb, r_mask, 1.0),
                                     GradSelector::all());
                accumulate_grads(gr.params, gf.params);
                opt.step(resolve_trainables(m, all_param_names(m)), gr.params);
                break;
            }
            case UnlearnMethod::Elm: {
                auto qa = qa_sampler->next(cfg.batch_size);
                auto r_mask = lm_mask(rb);
                auto fwd_q = m.forward(qa_question_batch(qa), {}, true);
                auto fwd_r = m.forward(rb, {}, true);
                auto [kl, kl_seeds] =
                    elm_kl_value_and_seeds(qa, fwd_q, (float)cfg.elm_unlearn_coeff);
                double rn = m.nll_from_logits(fwd_r.logits, rb, r_mask);
                loss = cfg.elm_unlearn_coeff * kl + cfg.elm_retain_coeff * rn;
                auto sel = GradSelector::subset(trainable);
                auto gq = m.backward(fwd_q, kl_seeds, sel);
                auto gr = m.backward(
                    fwd_r, m.nll_seeds(fwd_r.logits, rb, r_mask, cfg.elm_retain_coeff), sel);
                accumulate_grads(gr.params, gq.params);
                opt.step(resolve_trainables(m, trainable), gr.params);
                break;
            }
            case UnlearnMethod::Rr: {
                double progress = static_cast<double>(step) / T;
                double cf = cfg.rr_lorra_alpha * (1.0 - progress);
                double cr = cfg.rr_lorra_alpha * progress;
                auto fwd_f = m.forward(fb, {}, true);
                auto fwd_r = m.forward(rb, {}, true);
                auto fwd_f0 = frozen.forward(fb, {}, true);
                auto fwd_r0 = frozen.forward(rb, {}, true);
                const double nf = (double)total_tokens(fb) * cfg.rr_layers.size();
                const double nr = (double)total_tokens(rb) * cfg.rr_layers.size();
                BackwardSeeds<float> seeds_f, seeds_r;
                double fcos = 0.0, rdist = 0.0;
                for (int l : cfg.rr_layers) {
                    auto af = activations_after(m, fwd_f, l);
                    auto af0 = activations_after(frozen, fwd_f0, l);
                    for (size_t s = 0; s < af.size(); ++s) {
                        Mat<float> g = Mat<float>::Zero(af[s].rows(), af[s].cols());
                        for (int t = 0; t < af[s].rows(); ++t) {
                            float na = af[s].row(t).norm(), nb = af0[s].row(t).norm();
                            if (na < 1e-12f || nb < 1e-12f) continue;  // skipped, logged upstream
                            RowVec<float> ahat = af[s].row(t) / na;
                            RowVec<float> bhat = af0[s].row(t) / nb;
                            float c = ahat.dot(bhat);
                            if (c > 0) {
                                fcos += c / nf;
                                g.row(t) = (float)(cf / nf) * ((bhat - c * ahat) / na);
                            }
                        }
                        seeds_f.dhidden.push_back(act_seed((int)s, l, std::move(g)));
                    }
                    auto ar = activations_after(m, fwd_r, l);
                    auto ar0 = activations_after(frozen, fwd_r0, l);
                    for (size_t s = 0; s < ar.size(); ++s) {
                        Mat<float> g = Mat<float>::Zero(ar[s].rows(), ar[s].cols());
                        for (int t = 0; t < ar[s].rows(); ++t) {
                            RowVec<float> diff = ar[s].row(t) - ar0[s].row(t);
                            float dn = diff.norm();
                            if (dn > 1e-12f) {
                                rdist += dn / nr;
                                g.row(t) = (float)(cr / nr) * (diff / dn);
                            }
                        }
                        seeds_r.dhidden.push_back(act_seed((int)s, l, std::move(g)));
                    }
                }
                loss = cf * fcos + cr * rdist;
                auto sel = GradSelector::subset(trainable);
                auto gf = m.backward(fwd_f, seeds_f, sel);
                auto gr = m.backward(fwd_r, seeds_r, sel);
                accumulate_grads(gr.params, gf.params);
                opt.step(resolve_trainables(m, trainable), gr.params);
                break;
            }
            case UnlearnMethod::Tar: {
                auto st = tar_meta_step(m, frozen, opt, fb, rb, cfg.tar_inner_steps,
                                        cfg.tar_inner_lr, cfg.tar_rep_coeff, cfg.tar_nll_coeff,
                                        step_rng);
                loss = -st.post_adversary_forget_nll + cfg.tar_nll_coeff * st.retain_nll +
                       cfg.tar_rep_coeff * st.retain_rep;
                break;
            }
            case UnlearnMethod::Pbj:
                break;  // handled above
        }
        series.losses.push_back(loss);
        if (!std::isfinite(loss)) {
            series.aborted = true;
            series.abort_reason = "loss diverged (non-finite) at step " + std::to_string(step);
            break;
        }
        if ((step + 1) % (T / C) == 0) {
            series.step_indices.push_back(step + 1);
            series.blobs.push_back(snapshot(m));
        }
    }
    return series;
}

}  // namespace tb
