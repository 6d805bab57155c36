#pragma once

// Minimal autoregressive transformer with a hand-written backward pass,
// tampering hook points (embedding input, per-layer latents, logits),
// low-rank adapters, and latent-space projections. Pre-norm blocks with
// RMSNorm, causal multi-head attention, GELU MLP, learned absolute
// positional embeddings, untied unembedding, no biases.
//
// Templated on scalar so the same code runs in float (pipeline default) and
// double (finite-difference gradient checks).

#include "tb/common.hpp"
#include "tb/ledger.hpp"
#include "tb/model_config.hpp"

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tb {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

enum class HookKind { EmbeddingInput, Latent, Logits };

// A tap/injection location. Latent(l) is the residual stream entering block
// l, after any stored projections at that layer. Position range is
// [pos_begin, pos_end) over token indices.
struct HookPoint {
    HookKind kind = HookKind::EmbeddingInput;
    int layer = 0;  // Latent only
    int pos_begin = 0;
    int pos_end = 0;
};

template <class S>
struct Injection {
    HookPoint point;
    Mat<S> delta;  // (pos_end - pos_begin) x d_model, or x vocab for Logits
    int seq = -1;  // apply to every sequence (-1, universal payloads) or one
};

// Low-rank adapter on one named weight matrix. Effective update to the
// (in x out) weight is scale * (B*A)^T with scale = alpha / rank; B starts at
// zero so a fresh adapter is the identity modification.
template <class S>
struct Adapter {
    std::string target;
    int rank = 0;
    double alpha = 0.0;
    Mat<S> A;  // rank x in_dim
    Mat<S> B;  // out_dim x rank
    S scale() const { return static_cast<S>(alpha / static_cast<double>(rank)); }
};

struct GradSelector {
    enum class Kind { AllParams, NamedSubset, EmbeddingInput, Latent, OneHotToken };
    Kind kind = Kind::AllParams;
    std::vector<std::string> names;  // NamedSubset: base params and/or adapter[i].A / .B
    int layer = 0;                   // Latent
    static GradSelector all() { return {}; }
    static GradSelector subset(std::vector<std::string> n) {
        GradSelector s;
        s.kind = Kind::NamedSubset;
        s.names = std::move(n);
        return s;
    }
    static GradSelector embedding_input() {
        GradSelector s;
        s.kind = Kind::EmbeddingInput;
        return s;
    }
    static GradSelector latent(int layer) {
        GradSelector s;
        s.kind = Kind::Latent;
        s.layer = layer;
        return s;
    }
    static GradSelector one_hot() {
        GradSelector s;
        s.kind = Kind::OneHotToken;
        return s;
    }
};

template <class S>
struct SeqTrace {
    Mat<S> x0;  // post-injection embedding input
    struct Layer {
        Mat<S> h_in;  // post-projection, post-injection block input
        Mat<S> a, q, k, v, att, x_mid, b, m1, m2;
        std::vector<Mat<S>> attn;  // per-head softmax matrices
    };
    std::vector<Layer> layers;
    Mat<S> xf_in, xf;
    Mat<S> logits;
};

template <class S>
struct ForwardResult {
    std::vector<Mat<S>> logits;  // per sequence, n x vocab
    // below are populated only when the forward was run with need_trace
    std::vector<SeqTrace<S>> traces;
    TokenBatch tokens;
    std::vector<Injection<S>> injections;
};

// Extra dL/dh contribution at a hook, one per (sequence, hook).
template <class S>
struct HookSeed {
    int seq = 0;
    HookPoint point;
    Mat<S> d;
};

template <class S>
struct BackwardSeeds {
    std::vector<Mat<S>> dlogits;       // per sequence; empty matrix = no direct logits term
    std::vector<HookSeed<S>> dhidden;  // latent / embedding-input loss terms
};

template <class S>
struct Gradients {
    std::map<std::string, Mat<S>> params;   // includes adapter[i].A / adapter[i].B keys
    std::vector<Mat<S>> d_embedding_input;  // per sequence (n x d)
    std::vector<Mat<S>> d_latent;           // per sequence at requested layer
    std::vector<Mat<S>> d_one_hot;          // per sequence (n x vocab)
    std::vector<Mat<S>> d_injections;       // aligned with forward injections
};

namespace detail {

template <class S>
inline S gelu(S x) {
    const S c = static_cast<S>(0.7978845608028654);
    const S k = static_cast<S>(0.044715);
    return static_cast<S>(0.5) * x * (S(1) + std::tanh(c * (x + k * x * x * x)));
}

template <class S>
inline S gelu_grad(S x) {
    const S c = static_cast<S>(0.7978845608028654);
    const S k = static_cast<S>(0.044715);
    S t = std::tanh(c * (x + k * x * x * x));
    return static_cast<S>(0.5) * (S(1) + t) +
           static_cast<S>(0.5) * x * (S(1) - t * t) * c * (S(1) + S(3) * k * x * x);
}

constexpr double kRmsEps = 1e-6;

// y = g .* x / rms(x), rowwise
template <class S>
inline void rms_norm(const Mat<S>& x, const Mat<S>& g, Mat<S>& y) {
    const int n = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    y.resize(n, d);
    for (int t = 0; t < n; ++t) {
        S r = std::sqrt(x.row(t).squaredNorm() / static_cast<S>(d) + static_cast<S>(kRmsEps));
        y.row(t) = x.row(t).cwiseProduct(g.row(0)) / r;
    }
}

// dx from dy; accumulates into *dg when given
template <class S>
inline void rms_norm_backward(const Mat<S>& x, const Mat<S>& g, const Mat<S>& dy, Mat<S>& dx,
                              Mat<S>* dg) {
    const int n = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    dx.resize(n, d);
    for (int t = 0; t < n; ++t) {
        S r = std::sqrt(x.row(t).squaredNorm() / static_cast<S>(d) + static_cast<S>(kRmsEps));
        RowVec<S> xhat = x.row(t) / r;
        RowVec<S> u = dy.row(t).cwiseProduct(g.row(0));
        S proj = u.cwiseProduct(xhat).sum() / static_cast<S>(d);
        dx.row(t) = (u - xhat * proj) / r;
        if (dg) dg->row(0) += dy.row(t).cwiseProduct(xhat);
    }
}

}  // namespace detail

template <class S>
class ModelT {
public:
    ModelConfig config;

    Mat<S> tok_embed;  // V x d
    Mat<S> pos_embed;  // max_seq x d
    struct Layer {
        Mat<S> attn_norm_g;  // 1 x d
        Mat<S> wq, wk, wv, wo;
        Mat<S> mlp_norm_g;
        Mat<S> w1, w2;
    };
    std::vector<Layer> layers;
    Mat<S> final_norm_g;
    Mat<S> unembed;  // d x V

    std::vector<Adapter<S>> adapters;
    // latent projections per layer: unit vectors applied in order as
    // h -> h - (h.u) u^T at the entry of the layer
    std::vector<std::vector<Vec<S>>> latent_projections;

    static constexpr const char* precision_tag() {
        return sizeof(S) == 4 ? "float32" : "float64";
    }

    static ModelT random_init(const ModelConfig& cfg) {
        cfg.validate_substrate();
        ModelT m;
        m.config = cfg;
        Rng rng(static_cast<uint64_t>(cfg.seed) ^ 0xA11CE5ULL);
        const int d = cfg.d_model, V = cfg.vocab_size, hid = cfg.mlp_hidden();
        auto fill = [&](Mat<S>& w, int r, int c, double sd) {
            w.resize(r, c);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) w(i, j) = static_cast<S>(rng.normal(0.0, sd));
        };
        const double sd = 0.08;
        fill(m.tok_embed, V, d, sd);
        fill(m.pos_embed, cfg.max_seq_len, d, sd);
        m.layers.resize(cfg.n_layers);
        for (auto& L : m.layers) {
            L.attn_norm_g = Mat<S>::Ones(1, d);
            fill(L.wq, d, d, sd);
            fill(L.wk, d, d, sd);
            fill(L.wv, d, d, sd);
            fill(L.wo, d, d, sd / std::sqrt(2.0 * cfg.n_layers));
            L.mlp_norm_g = Mat<S>::Ones(1, d);
            fill(L.w1, d, hid, sd);
            fill(L.w2, hid, d, sd / std::sqrt(2.0 * cfg.n_layers));
        }
        m.final_norm_g = Mat<S>::Ones(1, d);
        fill(m.unembed, d, V, sd);
        m.latent_projections.assign(cfg.n_layers, {});
        return m;
    }

    template <class F>
    void visit_params(F&& f) {
        f("tok_embed", tok_embed);
        f("pos_embed", pos_embed);
        for (size_t i = 0; i < layers.size(); ++i) {
            std::string p = "layer" + std::to_string(i) + ".";
            f(p + "attn_norm.g", layers[i].attn_norm_g);
            f(p + "wq", layers[i].wq);
            f(p + "wk", layers[i].wk);
            f(p + "wv", layers[i].wv);
            f(p + "wo", layers[i].wo);
            f(p + "mlp_norm.g", layers[i].mlp_norm_g);
            f(p + "w1", layers[i].w1);
            f(p + "w2", layers[i].w2);
        }
        f("final_norm.g", final_norm_g);
        f("unembed", unembed);
    }

    std::vector<std::pair<std::string, const Mat<S>*>> named_params() const {
        std::vector<std::pair<std::string, const Mat<S>*>> out;
        const_cast<ModelT*>(this)->visit_params(
            [&](const std::string& n, Mat<S>& m) { out.emplace_back(n, &m); });
        return out;
    }
    std::vector<std::pair<std::string, Mat<S>*>> named_params_mutable() {
        std::vector<std::pair<std::string, Mat<S>*>> out;
        visit_params([&](const std::string& n, Mat<S>& m) { out.emplace_back(n, &m); });
        return out;
    }

    Mat<S>* find_param(const std::string& name) {
        Mat<S>* hit = nullptr;
        visit_params([&](const std::string& n, Mat<S>& m) {
            if (n == name) hit = &m;
        });
        return hit;
    }
    const Mat<S>* find_param(const std::string& name) const {
        return const_cast<ModelT*>(this)->find_param(name);
    }

    static bool is_matmul_weight(const std::string& name) {
        if (name == "unembed") return true;
        auto tail = name.substr(name.rfind('.') + 1);
        return tail == "wq" || tail == "wk" || tail == "wv" || tail == "wo" || tail == "w1" ||
               tail == "w2";
    }

    void add_adapter(const std::string& target, int rank, double alpha, uint64_t seed) {
        const Mat<S>* w = find_param(target);
        if (!w) throw std::invalid_argument("add_adapter: unknown parameter " + target);
        if (!is_matmul_weight(target))
            throw std::invalid_argument("add_adapter: target must be a matmul weight: " + target);
        Adapter<S> a;
        a.target = target;
        a.rank = rank;
        a.alpha = alpha;
        Rng rng(seed);
        a.A.resize(rank, w->rows());
        for (int i = 0; i < a.A.rows(); ++i)
            for (int j = 0; j < a.A.cols(); ++j) a.A(i, j) = static_cast<S>(rng.normal(0.0, 0.02));
        a.B = Mat<S>::Zero(w->cols(), rank);
        adapters.push_back(std::move(a));
    }

    // ---------------------------------------------------------------- forward

    ForwardResult<S> forward(const TokenBatch& batch, const std::vector<Injection<S>>& injections,
                             bool need_trace) const {
        validate_inputs(batch, injections);
        count_forward_pass();

        WeightView W = make_weight_view();
        ForwardResult<S> res;
        res.logits.resize(batch.size());
        if (need_trace) {
            res.traces.resize(batch.size());
            res.tokens = batch;
            res.injections = injections;
        }
        for (size_t s = 0; s < batch.size(); ++s) {
            SeqTrace<S> scratch;
            SeqTrace<S>& tr = need_trace ? res.traces[s] : scratch;
            forward_one(batch[s], injections, static_cast<int>(s), W, tr, need_trace);
            res.logits[s] = std::move(tr.logits);
        }
        return res;
    }

    ForwardResult<S> forward(const TokenBatch& batch) const { return forward(batch, {}, false); }

    // Mean NLL over masked positions; mask[t] = 1 means token t is scored as
    // the prediction from position t-1. Position 0 cannot be masked.
    double nll_loss(const TokenBatch& batch, const std::vector<std::vector<uint8_t>>& mask) const {
        auto res = forward(batch, {}, false);
        return nll_from_logits(res.logits, batch, mask);
    }

    double nll_from_logits(const std::vector<Mat<S>>& logits, const TokenBatch& batch,
                           const std::vector<std::vector<uint8_t>>& mask) const {
        check_mask(batch, mask);
        double total = 0.0;
        int64_t count = 0;
        for (size_t s = 0; s < batch.size(); ++s) {
            for (size_t t = 0; t < batch[s].size(); ++t) {
                if (!mask[s][t]) continue;
                total += -log_softmax_at(logits[s], static_cast<int>(t) - 1, batch[s][t]);
                count += 1;
            }
        }
        if (count == 0) throw std::invalid_argument("nll_loss: mask selects no positions");
        return total / static_cast<double>(count);
    }

    // dL/dlogits seeds for loss_scale * mean-NLL
    BackwardSeeds<S> nll_seeds(const std::vector<Mat<S>>& logits, const TokenBatch& batch,
                               const std::vector<std::vector<uint8_t>>& mask,
                               double loss_scale = 1.0) const {
        check_mask(batch, mask);
        int64_t count = 0;
        for (size_t s = 0; s < batch.size(); ++s)
            for (size_t t = 0; t < batch[s].size(); ++t)
                if (mask[s][t]) ++count;
        if (count == 0) throw std::invalid_argument("nll_seeds: mask selects no positions");
        BackwardSeeds<S> seeds;
        seeds.dlogits.resize(batch.size());
        const S w = static_cast<S>(loss_scale / static_cast<double>(count));
        for (size_t s = 0; s < batch.size(); ++s) {
            seeds.dlogits[s] = Mat<S>::Zero(logits[s].rows(), logits[s].cols());
            for (size_t t = 0; t < batch[s].size(); ++t) {
                if (!mask[s][t]) continue;
                int row = static_cast<int>(t) - 1;
                RowVec<S> p = softmax_row(logits[s].row(row));
                seeds.dlogits[s].row(row) += w * p;
                seeds.dlogits[s](row, batch[s][t]) -= w;
            }
        }
        return seeds;
    }

    // --------------------------------------------------------------- backward

    Gradients<S> backward(const ForwardResult<S>& fwd, const BackwardSeeds<S>& seeds,
                          const GradSelector& sel) const {
        if (fwd.traces.empty())
            throw std::invalid_argument("backward: forward was run without need_trace");
        validate_selector(sel);
        count_backward_pass();

        const bool want_params = sel.kind == GradSelector::Kind::AllParams ||
                                 sel.kind == GradSelector::Kind::NamedSubset;
        WeightView W = make_weight_view();
        Gradients<S> g;
        GradStore store;
        if (want_params) init_store(store);

        for (size_t s = 0; s < fwd.traces.size(); ++s) {
            Mat<S> dlogits;
            if (s < seeds.dlogits.size() && seeds.dlogits[s].size() > 0)
                dlogits = seeds.dlogits[s];
            else
                dlogits = Mat<S>::Zero(fwd.logits[s].rows(), fwd.logits[s].cols());
            backward_one(fwd, static_cast<int>(s), dlogits, seeds, sel, want_params, W, store, g);
        }

        if (want_params) collect_store(store, sel, g);
        return g;
    }

    // forward + NLL backward in one step (counts one pass of each)
    Gradients<S> gradient_nll(const TokenBatch& batch,
                              const std::vector<std::vector<uint8_t>>& mask,
                              const GradSelector& sel,
                              const std::vector<Injection<S>>& injections = {}) const {
        auto fwd = forward(batch, injections, true);
        auto seeds = nll_seeds(fwd.logits, batch, mask);
        return backward(fwd, seeds, sel);
    }

    // -------------------------------------------------------------- utilities

    static RowVec<S> softmax_row(const RowVec<S>& z) {
        RowVec<S> e = (z.array() - z.maxCoeff()).exp();
        return e / e.sum();
    }

    double log_softmax_at(const Mat<S>& logits, int row, Token target) const {
        if (row < 0) throw std::invalid_argument("log_softmax_at: position 0 has no context");
        const RowVec<S> z = logits.row(row);
        S m = z.maxCoeff();
        S lse = std::log((z.array() - m).exp().sum()) + m;
        return static_cast<double>(z(target) - lse);
    }

private:
    // Effective weights for this call. Slots: layer*6 + {q,k,v,o,w1,w2},
    // then unembed last. Materialized only where adapters exist.
    struct WeightView {
        std::vector<const Mat<S>*> p;
        std::vector<Mat<S>> storage;
        const Mat<S>& wq(int l) const { return *p[l * 6 + 0]; }
        const Mat<S>& wk(int l) const { return *p[l * 6 + 1]; }
        const Mat<S>& wv(int l) const { return *p[l * 6 + 2]; }
        const Mat<S>& wo(int l) const { return *p[l * 6 + 3]; }
        const Mat<S>& w1(int l) const { return *p[l * 6 + 4]; }
        const Mat<S>& w2(int l) const { return *p[l * 6 + 5]; }
        const Mat<S>& unembed() const { return *p.back(); }
    };

    WeightView make_weight_view() const {
        WeightView w;
        const int L = config.n_layers;
        w.p.resize(L * 6 + 1);
        w.storage.reserve(adapters.size());
        auto slot = [&](int idx, const std::string& name, const Mat<S>& base) {
            bool any = false;
            for (const auto& a : adapters)
                if (a.target == name) any = true;
            if (!any) {
                w.p[idx] = &base;
                return;
            }
            w.storage.push_back(base);  // reserve above prevents reallocation
            Mat<S>& m = w.storage.back();
            for (const auto& a : adapters)
                if (a.target == name) m.noalias() += a.scale() * (a.B * a.A).transpose();
            w.p[idx] = &m;
        };
        for (int l = 0; l < L; ++l) {
            std::string pre = "layer" + std::to_string(l) + ".";
            slot(l * 6 + 0, pre + "wq", layers[l].wq);
            slot(l * 6 + 1, pre + "wk", layers[l].wk);
            slot(l * 6 + 2, pre + "wv", layers[l].wv);
            slot(l * 6 + 3, pre + "wo", layers[l].wo);
            slot(l * 6 + 4, pre + "w1", layers[l].w1);
            slot(l * 6 + 5, pre + "w2", layers[l].w2);
        }
        slot(L * 6, "unembed", unembed);
        return w;
    }

    struct GradStore {
        std::map<std::string, Mat<S>> base;
        std::vector<Mat<S>> adapterA, adapterB;
        std::map<std::string, std::vector<size_t>> adapters_by_target;
    };

    void init_store(GradStore& st) const {
        for (auto& [name, p] : named_params()) st.base[name] = Mat<S>::Zero(p->rows(), p->cols());
        st.adapterA.resize(adapters.size());
        st.adapterB.resize(adapters.size());
        for (size_t i = 0; i < adapters.size(); ++i) {
            st.adapterA[i] = Mat<S>::Zero(adapters[i].A.rows(), adapters[i].A.cols());
            st.adapterB[i] = Mat<S>::Zero(adapters[i].B.rows(), adapters[i].B.cols());
            st.adapters_by_target[adapters[i].target].push_back(i);
        }
    }

    void route_weight_grad(GradStore& st, const std::string& name, const Mat<S>& dW) const {
        st.base[name] += dW;
        auto it = st.adapters_by_target.find(name);
        if (it == st.adapters_by_target.end()) return;
        for (size_t idx : it->second) {
            const auto& a = adapters[idx];
            // dW is (in x out); delta = scale * (B A)^T  =>  d(BA) = scale * dW^T
            Mat<S> dBA = a.scale() * dW.transpose();
            st.adapterB[idx].noalias() += dBA * a.A.transpose();
            st.adapterA[idx].noalias() += a.B.transpose() * dBA;
        }
    }

    void collect_store(GradStore& st, const GradSelector& sel, Gradients<S>& g) const {
        auto want = [&](const std::string& n) {
            if (sel.kind == GradSelector::Kind::AllParams) return true;
            for (const auto& s : sel.names)
                if (s == n) return true;
            return false;
        };
        for (auto& [name, m] : st.base)
            if (want(name)) g.params[name] = std::move(m);
        for (size_t i = 0; i < adapters.size(); ++i) {
            std::string an = "adapter[" + std::to_string(i) + "].A";
            std::string bn = "adapter[" + std::to_string(i) + "].B";
            if (want(an)) g.params[an] = std::move(st.adapterA[i]);
            if (want(bn)) g.params[bn] = std::move(st.adapterB[i]);
        }
    }

    void validate_selector(const GradSelector& sel) const {
        if (sel.kind == GradSelector::Kind::NamedSubset) {
            if (sel.names.empty())
                throw std::invalid_argument("GradSelector: empty named subset targets nothing");
            for (const auto& n : sel.names) {
                if (n.rfind("adapter[", 0) == 0) {
                    size_t idx = std::stoul(n.substr(8));
                    if (idx >= adapters.size())
                        throw std::invalid_argument("GradSelector: no such adapter: " + n);
                } else if (!find_param(n)) {
                    throw std::invalid_argument("GradSelector: unknown parameter: " + n);
                }
            }
        }
        if (sel.kind == GradSelector::Kind::Latent &&
            (sel.layer < 0 || sel.layer >= config.n_layers))
            throw std::invalid_argument("GradSelector: latent layer out of range");
    }

    void validate_inputs(const TokenBatch& batch, const std::vector<Injection<S>>& inj) const {
        for (const auto& seq : batch) {
            if (seq.empty()) throw std::invalid_argument("forward: empty sequence");
            if (static_cast<int>(seq.size()) > config.max_seq_len)
                throw std::invalid_argument("forward: sequence exceeds max_seq_len");
            for (Token t : seq)
                if (t < 0 || t >= config.vocab_size)
                    throw std::invalid_argument("forward: token id out of range");
        }
        for (const auto& i : inj) {
            if (i.point.kind == HookKind::Latent &&
                (i.point.layer < 0 || i.point.layer >= config.n_layers))
                throw std::invalid_argument("injection: latent layer out of range");
            int span = i.point.pos_end - i.point.pos_begin;
            if (span <= 0 || i.point.pos_begin < 0)
                throw std::invalid_argument("injection: empty or negative position range");
            int want_cols = i.point.kind == HookKind::Logits ? config.vocab_size : config.d_model;
            if (i.delta.rows() != span || i.delta.cols() != want_cols)
                throw std::invalid_argument("injection: delta shape does not match hook");
            if (i.seq >= static_cast<int>(batch.size()))
                throw std::invalid_argument("injection: sequence index out of range");
            for (size_t s = 0; s < batch.size(); ++s) {
                if (i.seq >= 0 && i.seq != static_cast<int>(s)) continue;
                if (i.point.pos_end > static_cast<int>(batch[s].size()))
                    throw std::invalid_argument(
                        "injection: position range exceeds sequence length");
            }
        }
    }

    void check_mask(const TokenBatch& batch, const std::vector<std::vector<uint8_t>>& mask) const {
        if (mask.size() != batch.size()) throw std::invalid_argument("mask batch size mismatch");
        for (size_t s = 0; s < batch.size(); ++s) {
            if (mask[s].size() != batch[s].size())
                throw std::invalid_argument("mask length mismatch");
            if (!mask[s].empty() && mask[s][0])
                throw std::invalid_argument("mask may not select position 0");
        }
    }

    void apply_injections(Mat<S>& h, const std::vector<Injection<S>>& inj, HookKind kind,
                          int layer, int seq_idx) const {
        for (const auto& i : inj) {
            if (i.point.kind != kind) continue;
            if (kind == HookKind::Latent && i.point.layer != layer) continue;
            if (i.seq >= 0 && i.seq != seq_idx) continue;
            h.middleRows(i.point.pos_begin, i.point.pos_end - i.point.pos_begin) += i.delta;
        }
    }

    void forward_one(const TokenSeq& seq, const std::vector<Injection<S>>& inj, int seq_idx,
                     const WeightView& W, SeqTrace<S>& tr, bool keep) const {
        const int n = static_cast<int>(seq.size());
        const int d = config.d_model;
        const int H = config.n_heads;
        const int hdim = config.head_dim();
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hdim)));

        Mat<S> h(n, d);
        for (int t = 0; t < n; ++t) h.row(t) = tok_embed.row(seq[t]) + pos_embed.row(t);
        apply_injections(h, inj, HookKind::EmbeddingInput, 0, seq_idx);
        if (keep) tr.x0 = h;

        if (keep) tr.layers.resize(config.n_layers);
        for (int l = 0; l < config.n_layers; ++l) {
            for (const auto& u : latent_projections[l]) {
                Vec<S> c = h * u;
                h.noalias() -= c * u.transpose();
            }
            apply_injections(h, inj, HookKind::Latent, l, seq_idx);

            const auto& L = layers[l];
            Mat<S> a;
            detail::rms_norm(h, L.attn_norm_g, a);
            Mat<S> q = a * W.wq(l);
            Mat<S> k = a * W.wk(l);
            Mat<S> v = a * W.wv(l);

            Mat<S> att(n, d);
            std::vector<Mat<S>> attn(H);
            for (int hd = 0; hd < H; ++hd) {
                auto qh = q.middleCols(hd * hdim, hdim);
                auto kh = k.middleCols(hd * hdim, hdim);
                auto vh = v.middleCols(hd * hdim, hdim);
                Mat<S> scores = (qh * kh.transpose()) * scale;
                Mat<S>& A = attn[hd];
                A = Mat<S>::Zero(n, n);
                for (int t = 0; t < n; ++t) {
                    S m = scores.row(t).head(t + 1).maxCoeff();
                    RowVec<S> e = (scores.row(t).head(t + 1).array() - m).exp();
                    A.row(t).head(t + 1) = e / e.sum();
                }
                att.middleCols(hd * hdim, hdim).noalias() = A * vh;
            }
            if (keep) tr.layers[l].h_in = h;
            h.noalias() += att * W.wo(l);

            Mat<S> b;
            detail::rms_norm(h, L.mlp_norm_g, b);
            Mat<S> m1 = b * W.w1(l);
            Mat<S> m2 = m1.unaryExpr([](S x) { return detail::gelu(x); });
            if (keep) {
                auto& lt = tr.layers[l];
                lt.a = std::move(a);
                lt.q = std::move(q);
                lt.k = std::move(k);
                lt.v = std::move(v);
                lt.att = std::move(att);
                lt.attn = std::move(attn);
                lt.x_mid = h;
                lt.b = b;
                lt.m1 = std::move(m1);
                lt.m2 = m2;
            }
            h.noalias() += m2 * W.w2(l);
        }

        if (keep) tr.xf_in = h;
        Mat<S> xf;
        detail::rms_norm(h, final_norm_g, xf);
        tr.logits = xf * W.unembed();
        apply_injections(tr.logits, inj, HookKind::Logits, 0, seq_idx);
        if (keep) tr.xf = std::move(xf);
    }

    void backward_one(const ForwardResult<S>& fwd, int s, const Mat<S>& dlogits_in,
                      const BackwardSeeds<S>& seeds, const GradSelector& sel, bool want_params,
                      const WeightView& W, GradStore& store, Gradients<S>& g) const {
        const SeqTrace<S>& tr = fwd.traces[s];
        const TokenSeq& seq = fwd.tokens[s];
        const int n = static_cast<int>(seq.size());
        const int d = config.d_model;
        const int H = config.n_heads;
        const int hdim = config.head_dim();
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hdim)));

        Mat<S> dlogits = dlogits_in;
        for (const auto& hs : seeds.dhidden) {
            if (hs.seq == s && hs.point.kind == HookKind::Logits)
                dlogits.middleRows(hs.point.pos_begin, hs.point.pos_end - hs.point.pos_begin) +=
                    hs.d;
        }

        if (want_params) route_weight_grad(store, "unembed", tr.xf.transpose() * dlogits);
        Mat<S> dxf = dlogits * W.unembed().transpose();

        Mat<S> dh;
        detail::rms_norm_backward(tr.xf_in, final_norm_g, dxf, dh,
                                  want_params ? &store.base["final_norm.g"] : nullptr);
        // seeds at layer index n_layers address the final hidden state (the
        // residual stream after the last block); loss terms on activations
        // "after block l" use latent seed l+1 uniformly
        for (const auto& hs : seeds.dhidden) {
            if (hs.seq == s && hs.point.kind == HookKind::Latent &&
                hs.point.layer == config.n_layers)
                dh.middleRows(hs.point.pos_begin, hs.point.pos_end - hs.point.pos_begin) += hs.d;
        }

        for (int l = config.n_layers - 1; l >= 0; --l) {
            const auto& lt = tr.layers[l];
            const auto& L = layers[l];
            std::string p = "layer" + std::to_string(l) + ".";

            // MLP half
            Mat<S> dm2 = dh * W.w2(l).transpose();
            if (want_params) route_weight_grad(store, p + "w2", lt.m2.transpose() * dh);
            Mat<S> dm1 =
                dm2.cwiseProduct(lt.m1.unaryExpr([](S x) { return detail::gelu_grad(x); }));
            if (want_params) route_weight_grad(store, p + "w1", lt.b.transpose() * dm1);
            Mat<S> db = dm1 * W.w1(l).transpose();
            Mat<S> dx_mid;
            detail::rms_norm_backward(lt.x_mid, L.mlp_norm_g, db, dx_mid,
                                      want_params ? &store.base[p + "mlp_norm.g"] : nullptr);
            dx_mid += dh;

            // attention half
            Mat<S> datt = dx_mid * W.wo(l).transpose();
            if (want_params) route_weight_grad(store, p + "wo", lt.att.transpose() * dx_mid);
            Mat<S> dq(n, d), dk(n, d), dv(n, d);
            for (int hd = 0; hd < H; ++hd) {
                auto vh = lt.v.middleCols(hd * hdim, hdim);
                auto qh = lt.q.middleCols(hd * hdim, hdim);
                auto kh = lt.k.middleCols(hd * hdim, hdim);
                const Mat<S>& A = lt.attn[hd];
                Mat<S> dA = datt.middleCols(hd * hdim, hdim) * vh.transpose();
                dv.middleCols(hd * hdim, hdim).noalias() =
                    A.transpose() * datt.middleCols(hd * hdim, hdim);
                Mat<S> dS(n, n);
                for (int t = 0; t < n; ++t) {
                    S dot = A.row(t).cwiseProduct(dA.row(t)).sum();
                    dS.row(t) = A.row(t).cwiseProduct((dA.row(t).array() - dot).matrix());
                }
                dq.middleCols(hd * hdim, hdim).noalias() = dS * kh * scale;
                dk.middleCols(hd * hdim, hdim).noalias() = dS.transpose() * qh * scale;
            }
            if (want_params) {
                route_weight_grad(store, p + "wq", lt.a.transpose() * dq);
                route_weight_grad(store, p + "wk", lt.a.transpose() * dk);
                route_weight_grad(store, p + "wv", lt.a.transpose() * dv);
            }
            Mat<S> da = dq * W.wq(l).transpose() + dk * W.wk(l).transpose() +
                        dv * W.wv(l).transpose();
            Mat<S> dh_in;
            detail::rms_norm_backward(lt.h_in, L.attn_norm_g, da, dh_in,
                                      want_params ? &store.base[p + "attn_norm.g"] : nullptr);
            dh_in += dx_mid;

            for (const auto& hs : seeds.dhidden) {
                if (hs.seq == s && hs.point.kind == HookKind::Latent && hs.point.layer == l)
                    dh_in.middleRows(hs.point.pos_begin, hs.point.pos_end - hs.point.pos_begin) +=
                        hs.d;
            }
            if (sel.kind == GradSelector::Kind::Latent && sel.layer == l) {
                if (g.d_latent.size() < fwd.traces.size()) g.d_latent.resize(fwd.traces.size());
                g.d_latent[s] = dh_in;
            }
            capture_injection_grads(fwd, s, HookKind::Latent, l, dh_in, g);

            for (auto it = latent_projections[l].rbegin(); it != latent_projections[l].rend();
                 ++it) {
                Vec<S> c = dh_in * (*it);
                dh_in.noalias() -= c * it->transpose();
            }
            dh = std::move(dh_in);
        }

        for (const auto& hs : seeds.dhidden) {
            if (hs.seq == s && hs.point.kind == HookKind::EmbeddingInput)
                dh.middleRows(hs.point.pos_begin, hs.point.pos_end - hs.point.pos_begin) += hs.d;
        }
        if (sel.kind == GradSelector::Kind::EmbeddingInput) {
            if (g.d_embedding_input.size() < fwd.traces.size())
                g.d_embedding_input.resize(fwd.traces.size());
            g.d_embedding_input[s] = dh;
        }
        capture_injection_grads(fwd, s, HookKind::EmbeddingInput, 0, dh, g);
        if (sel.kind == GradSelector::Kind::OneHotToken) {
            if (g.d_one_hot.size() < fwd.traces.size()) g.d_one_hot.resize(fwd.traces.size());
            // token one-hot gradient through the embedding matrix product
            g.d_one_hot[s] = dh * tok_embed.transpose();
        }
        if (want_params) {
            auto& dE = store.base["tok_embed"];
            auto& dP = store.base["pos_embed"];
            for (int t = 0; t < n; ++t) {
                dE.row(seq[t]) += dh.row(t);
                dP.row(t) += dh.row(t);
            }
        }
    }

    void capture_injection_grads(const ForwardResult<S>& fwd, int s, HookKind kind, int layer,
                                 const Mat<S>& dh, Gradients<S>& g) const {
        if (fwd.injections.empty()) return;
        if (g.d_injections.size() != fwd.injections.size()) {
            g.d_injections.resize(fwd.injections.size());
            for (size_t i = 0; i < fwd.injections.size(); ++i)
                g.d_injections[i] = Mat<S>::Zero(fwd.injections[i].delta.rows(),
                                                 fwd.injections[i].delta.cols());
        }
        for (size_t i = 0; i < fwd.injections.size(); ++i) {
            const auto& pt = fwd.injections[i].point;
            if (pt.kind != kind) continue;
            if (kind == HookKind::Latent && pt.layer != layer) continue;
            if (fwd.injections[i].seq >= 0 && fwd.injections[i].seq != s) continue;
            g.d_injections[i] += dh.middleRows(pt.pos_begin, pt.pos_end - pt.pos_begin);
        }
    }
};

using Model = ModelT<float>;

}  // namespace tb
