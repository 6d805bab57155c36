#include <doctest.h>

#include "tb/checkpoint.hpp"
#include "tb/model.hpp"
#include "tb/updates.hpp"

#include <cmath>
#include <vector>

using namespace tb;

namespace {

// Straight-line reference forward pass, independent of the implementation:
// plain loops on std::vector<double>, mirroring the architecture definition.
using DVec = std::vector<double>;
using DMat = std::vector<DVec>;

DMat to_dmat(const Mat<double>& m) {
    DMat out(m.rows(), DVec(m.cols()));
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
    return out;
}

DMat matmul(const DMat& x, const DMat& w) {
    DMat y(x.size(), DVec(w[0].size(), 0.0));
    for (size_t i = 0; i < x.size(); ++i)
        for (size_t k = 0; k < w.size(); ++k)
            for (size_t j = 0; j < w[0].size(); ++j) y[i][j] += x[i][k] * w[k][j];
    return y;
}

DMat ref_rmsnorm(const DMat& x, const DVec& g) {
    const double eps = 1e-6;
    DMat y = x;
    for (size_t t = 0; t < x.size(); ++t) {
        double ss = 0.0;
        for (double v : x[t]) ss += v * v;
        double r = std::sqrt(ss / x[t].size() + eps);
        for (size_t i = 0; i < x[t].size(); ++i) y[t][i] = g[i] * x[t][i] / r;
    }
    return y;
}

double ref_gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

DMat ref_forward(const ModelT<double>& m, const TokenSeq& seq) {
    const int n = (int)seq.size(), d = m.config.d_model, H = m.config.n_heads;
    const int dh = d / H;
    DMat E = to_dmat(m.tok_embed), P = to_dmat(m.pos_embed);
    DMat h(n, DVec(d));
    for (int t = 0; t < n; ++t)
        for (int i = 0; i < d; ++i) h[t][i] = E[seq[t]][i] + P[t][i];

    for (int l = 0; l < m.config.n_layers; ++l) {
        const auto& L = m.layers[l];
        DVec g1(to_dmat(L.attn_norm_g)[0]), g2(to_dmat(L.mlp_norm_g)[0]);
        DMat a = ref_rmsnorm(h, g1);
        DMat q = matmul(a, to_dmat(L.wq)), k = matmul(a, to_dmat(L.wk)),
             v = matmul(a, to_dmat(L.wv));
        DMat att(n, DVec(d, 0.0));
        for (int hd = 0; hd < H; ++hd) {
            for (int t = 0; t < n; ++t) {
                DVec s(t + 1, 0.0);
                for (int t2 = 0; t2 <= t; ++t2)
                    for (int kk = 0; kk < dh; ++kk)
                        s[t2] += q[t][hd * dh + kk] * k[t2][hd * dh + kk];
                double mx = s[0];
                for (double x : s) mx = std::max(mx, x);
                double z = 0.0;
                for (int t2 = 0; t2 <= t; ++t2) {
                    s[t2] = std::exp(s[t2] / std::sqrt((double)dh) -
                                     mx / std::sqrt((double)dh));
                    z += s[t2];
                }
                for (int t2 = 0; t2 <= t; ++t2)
                    for (int kk = 0; kk < dh; ++kk)
                        att[t][hd * dh + kk] += s[t2] / z * v[t2][hd * dh + kk];
            }
        }
        DMat o = matmul(att, to_dmat(L.wo));
        for (int t = 0; t < n; ++t)
            for (int i = 0; i < d; ++i) h[t][i] += o[t][i];
        DMat b = ref_rmsnorm(h, g2);
        DMat m1 = matmul(b, to_dmat(L.w1));
        for (auto& row : m1)
            for (auto& x : row) x = ref_gelu(x);
        DMat m3 = matmul(m1, to_dmat(L.w2));
        for (int t = 0; t < n; ++t)
            for (int i = 0; i < d; ++i) h[t][i] += m3[t][i];
    }
    DMat xf = ref_rmsnorm(h, to_dmat(m.final_norm_g)[0]);
    return matmul(xf, to_dmat(m.unembed));
}

ModelConfig tiny_cfg(int vocab, int layers, int d, int heads, int maxlen, int seed) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.n_layers = layers;
    c.d_model = d;
    c.n_heads = heads;
    c.max_seq_len = maxlen;
    c.seed = seed;
    return c;
}

std::vector<std::vector<uint8_t>> full_mask(const TokenBatch& b) {
    std::vector<std::vector<uint8_t>> m(b.size());
    for (size_t s = 0; s < b.size(); ++s) {
        m[s].assign(b[s].size(), 1);
        m[s][0] = 0;
    }
    return m;
}

}  // namespace

TEST_CASE("forward matches independent straight-line oracle") {
    // 1-layer d=4 case from the contract plus a deeper random one
    for (auto cfg : {tiny_cfg(8, 1, 4, 2, 8, 7), tiny_cfg(16, 3, 8, 2, 10, 11)}) {
        auto m = ModelT<double>::random_init(cfg);
        TokenSeq seq = {1, 3, 2, 5, 0};
        auto got = m.forward({seq}).logits[0];
        auto want = ref_forward(m, seq);
        double max_diff = 0.0;
        for (int t = 0; t < got.rows(); ++t)
            for (int j = 0; j < got.cols(); ++j)
                max_diff = std::max(max_diff, std::abs(got(t, j) - want[t][j]));
        CHECK(max_diff < 1e-10);
    }
}

TEST_CASE("zero injection at any hook is the identity") {
    auto m = Model::random_init(tiny_cfg(16, 3, 8, 2, 10, 3));
    TokenSeq seq = {1, 2, 3, 4, 5, 6};
    auto base = m.forward({seq}).logits[0];
    for (int l = -1; l < 3; ++l) {
        Injection<float> inj;
        if (l < 0) {
            inj.point = {HookKind::EmbeddingInput, 0, 1, 4};
            inj.delta = Mat<float>::Zero(3, 8);
        } else {
            inj.point = {HookKind::Latent, l, 0, 6};
            inj.delta = Mat<float>::Zero(6, 8);
        }
        auto got = m.forward({seq}, {inj}, false).logits[0];
        CHECK((got - base).cwiseAbs().maxCoeff() == 0.0f);
    }
}

TEST_CASE("injection shape and range violations are rejected") {
    auto m = Model::random_init(tiny_cfg(16, 2, 8, 2, 10, 3));
    TokenSeq seq = {1, 2, 3};
    Injection<float> bad_shape{{HookKind::Latent, 1, 0, 2}, Mat<float>::Zero(2, 7)};
    CHECK_THROWS(m.forward({seq}, {bad_shape}, false));
    Injection<float> bad_range{{HookKind::Latent, 1, 0, 4}, Mat<float>::Zero(4, 8)};
    CHECK_THROWS(m.forward({seq}, {bad_range}, false));
    Injection<float> bad_layer{{HookKind::Latent, 5, 0, 2}, Mat<float>::Zero(2, 8)};
    CHECK_THROWS(m.forward({seq}, {bad_layer}, false));
    CHECK_THROWS(m.forward({TokenSeq{1, 99}}));  // token out of range
}

TEST_CASE("nll loss: uniform model gives ln(vocab), oracle agreement") {
    auto cfg = tiny_cfg(4, 1, 4, 1, 8, 5);
    auto m = ModelT<double>::random_init(cfg);
    // zero unembed makes all logits equal -> uniform distribution
    m.unembed.setZero();
    TokenBatch batch = {{0, 1, 2, 3}, {3, 2, 1, 0}};
    double loss = m.nll_loss(batch, full_mask(batch));
    CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // random model vs straight-line per-token -log softmax
    auto m2 = ModelT<double>::random_init(tiny_cfg(16, 2, 8, 2, 10, 9));
    TokenBatch b2 = {{1, 5, 9, 2}, {0, 3, 3, 7, 11}};
    auto mask = full_mask(b2);
    double got = m2.nll_loss(b2, mask);
    double want = 0.0;
    int cnt = 0;
    for (size_t s = 0; s < b2.size(); ++s) {
        auto logits = m2.forward({b2[s]}).logits[0];
        for (size_t t = 1; t < b2[s].size(); ++t) {
            double mx = logits.row(t - 1).maxCoeff();
            double z = 0.0;
            for (int j = 0; j < logits.cols(); ++j) z += std::exp(logits(t - 1, j) - mx);
            want += -(logits(t - 1, b2[s][t]) - mx - std::log(z));
            ++cnt;
        }
    }
    want /= cnt;
    CHECK(std::abs(got - want) < 1e-10);

    CHECK_THROWS(m2.nll_loss(b2, std::vector<std::vector<uint8_t>>{
                                     {0, 0, 0, 0}, {0, 0, 0, 0, 0}}));  // empty mask
}

TEST_CASE("deterministic predictor has ~zero loss") {
    // rig a 1-layer model whose unembed strongly predicts the next token of
    // a fixed repeating sequence by training-free construction: vocab 2,
    // token t predicts 1-t. We cheat by zeroing everything except embeddings
    // and unembed so the final hidden state is rmsnorm(x0).
    auto cfg = tiny_cfg(2, 1, 4, 1, 8, 1);
    auto m = ModelT<double>::random_init(cfg);
    for (auto& L : m.layers) {
        L.wo.setZero();
        L.w2.setZero();
    }
    m.pos_embed.setZero();
    m.tok_embed << 1, 0, 0, 0, 0, 1, 0, 0;
    m.final_norm_g = Mat<double>::Ones(1, 4);
    m.unembed.setZero();
    const double big = 50.0;
    // hidden for token0 ~ e0 scaled; predict token1 and vice versa
    m.unembed(0, 1) = big;
    m.unembed(1, 0) = big;
    TokenBatch batch = {{0, 1, 0, 1, 0}};
    double loss = m.nll_loss(batch, full_mask(batch));
    CHECK(loss < 1e-6);
}

TEST_CASE("gradients match central finite differences (all groups + hooks)") {
    auto cfg = tiny_cfg(32, 2, 16, 4, 12, 42);
    auto m = ModelT<double>::random_init(cfg);
    m.add_adapter("layer1.wq", 2, 4.0, 99);
    m.add_adapter("layer0.w1", 2, 8.0, 98);
    // give adapters nonzero B so their A-gradients are nonzero
    for (auto& a : m.adapters)
        for (int i = 0; i < a.B.rows(); ++i)
            for (int j = 0; j < a.B.cols(); ++j) a.B(i, j) = 0.01 * ((i + 2 * j) % 5 - 2);
    m.latent_projections[1].push_back(Vec<double>::Unit(16, 3));

    TokenBatch batch = {{1, 5, 9, 2, 30, 7}, {0, 3, 3, 7, 11}};
    auto mask = full_mask(batch);

    auto grads = m.gradient_nll(batch, mask, GradSelector::all());
    const double h = 1e-5;
    double worst = 0.0;
    auto rel = [](double a, double b) {
        return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
    };

    for (auto& [name, pptr] : m.named_params_mutable()) {
        const auto& g = grads.params.at(name);
        for (int i = 0; i < pptr->rows(); ++i) {
            for (int j = 0; j < pptr->cols(); ++j) {
                double orig = (*pptr)(i, j);
                (*pptr)(i, j) = orig + h;
                double lp = m.nll_loss(batch, mask);
                (*pptr)(i, j) = orig - h;
                double lm = m.nll_loss(batch, mask);
                (*pptr)(i, j) = orig;
                worst = std::max(worst, rel(g(i, j), (lp - lm) / (2 * h)));
            }
        }
    }
    for (size_t ai = 0; ai < m.adapters.size(); ++ai) {
        for (Mat<double>* ap : {&m.adapters[ai].A, &m.adapters[ai].B}) {
            std::string key = "adapter[" + std::to_string(ai) +
                              (ap == &m.adapters[ai].A ? "].A" : "].B");
            const auto& g = grads.params.at(key);
            for (int i = 0; i < ap->rows(); ++i) {
                for (int j = 0; j < ap->cols(); ++j) {
                    double orig = (*ap)(i, j);
                    (*ap)(i, j) = orig + h;
                    double lp = m.nll_loss(batch, mask);
                    (*ap)(i, j) = orig - h;
                    double lm = m.nll_loss(batch, mask);
                    (*ap)(i, j) = orig;
                    worst = std::max(worst, rel(g(i, j), (lp - lm) / (2 * h)));
                }
            }
        }
    }
    CHECK(worst < 1e-4);

    // embedding-input and latent selectors, via injection perturbations
    for (int hook_layer = -1; hook_layer < cfg.n_layers; ++hook_layer) {
        HookPoint pt;
        if (hook_layer < 0)
            pt = {HookKind::EmbeddingInput, 0, 0, 5};
        else
            pt = {HookKind::Latent, hook_layer, 0, 5};
        Injection<double> inj{pt, Mat<double>::Zero(5, 16)};
        auto sel = hook_layer < 0 ? GradSelector::embedding_input()
                                  : GradSelector::latent(hook_layer);
        auto fwd = m.forward(batch, {inj}, true);
        auto seeds = m.nll_seeds(fwd.logits, batch, mask);
        auto hg = m.backward(fwd, seeds, sel);
        const auto& gi = hg.d_injections.at(0);
        double worst_h = 0.0;
        for (int i = 0; i < 5; ++i) {
            for (int j = 0; j < 16; ++j) {
                Injection<double> ip = inj, im = inj;
                ip.delta(i, j) = h;
                im.delta(i, j) = -h;
                double lp = m.nll_from_logits(m.forward(batch, {ip}, false).logits, batch, mask);
                double lm = m.nll_from_logits(m.forward(batch, {im}, false).logits, batch, mask);
                worst_h = std::max(worst_h, rel(gi(i, j), (lp - lm) / (2 * h)));
            }
        }
        CHECK(worst_h < 1e-4);
        // per-sequence hook grads for the first 5 positions agree with the
        // shared-injection grad summed over sequences
        const auto& per_seq =
            hook_layer < 0 ? hg.d_embedding_input : hg.d_latent;
        Mat<double> summed = Mat<double>::Zero(5, 16);
        for (const auto& d : per_seq) summed += d.topRows(5);
        CHECK((summed - gi).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("one-hot token gradient is the embedding-matrix product") {
    auto m = ModelT<double>::random_init(tiny_cfg(16, 2, 8, 2, 10, 21));
    TokenBatch batch = {{1, 5, 9, 2}};
    auto mask = full_mask(batch);
    auto g1 = m.gradient_nll(batch, mask, GradSelector::one_hot());
    auto g2 = m.gradient_nll(batch, mask, GradSelector::embedding_input());
    Mat<double> want = g2.d_embedding_input[0] * m.tok_embed.transpose();
    CHECK((g1.d_one_hot[0] - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradient of a constant loss is zero; selectors validated") {
    auto m = Model::random_init(tiny_cfg(16, 2, 8, 2, 10, 2));
    TokenBatch batch = {{1, 2, 3}};
    auto fwd = m.forward(batch, {}, true);
    BackwardSeeds<float> zero_seeds;  // no dlogits, no hook seeds
    auto g = m.backward(fwd, zero_seeds, GradSelector::all());
    for (auto& [name, gm] : g.params) CHECK(gm.cwiseAbs().maxCoeff() == 0.0f);

    CHECK_THROWS(m.backward(fwd, zero_seeds, GradSelector::subset({})));
    CHECK_THROWS(m.backward(fwd, zero_seeds, GradSelector::subset({"nope"})));
    CHECK_THROWS(m.backward(fwd, zero_seeds, GradSelector::latent(99)));

    auto gs = m.gradient_nll(batch, full_mask(batch), GradSelector::subset({"unembed"}));
    CHECK(gs.params.size() == 1);
    CHECK(gs.params.count("unembed") == 1);
}

TEST_CASE("cost counters: forward +1, backward +1, eval never backward") {
    auto m = Model::random_init(tiny_cfg(16, 2, 8, 2, 10, 2));
    TokenBatch batch = {{1, 2, 3}, {4, 5, 6, 7}};
    CostLedger led;
    {
        LedgerScope scope(led);
        m.forward(batch);
        CHECK(led.forward_passes == 1);
        CHECK(led.backward_passes == 0);
        m.forward(batch, {}, true);
        m.nll_loss(batch, full_mask(batch));
        CHECK(led.forward_passes == 3);
        CHECK(led.backward_passes == 0);
        m.gradient_nll(batch, full_mask(batch), GradSelector::all());
        CHECK(led.forward_passes == 4);
        CHECK(led.backward_passes == 1);
    }
    auto before = led;
    m.forward(batch);  // outside any scope: not counted
    CHECK(led.forward_passes == before.forward_passes);
}

TEST_CASE("apply_update: delta, mask, adapter merge") {
    auto m = Model::random_init(tiny_cfg(16, 2, 8, 2, 10, 4));
    TokenBatch probe = {{1, 2, 3, 4}};
    auto base_logits = m.forward(probe).logits[0];

    WeightDelta<float> zero;
    zero.deltas["layer0.wq"] = Mat<float>::Zero(8, 8);
    auto m2 = apply_update(m, zero);
    CHECK(m2.layers[0].wq == m.layers[0].wq);

    WeightMask<float> mask;
    auto& mk = mask.masks["layer1.w1"];
    mk.setZero(8, 32);
    mk(0, 0) = 1;
    mk(3, 7) = 1;
    mk(5, 20) = 1;
    auto m3 = apply_update(m, mask);
    int zeros_before = (int)(m.layers[1].w1.array() == 0.0f).count();
    int zeros_after = (int)(m3.layers[1].w1.array() == 0.0f).count();
    CHECK(zeros_after - zeros_before == 3);
    CHECK(m.layers[1].w1(0, 0) != 0.0f);  // input untouched

    WeightDelta<float> bad;
    bad.deltas["no_such"] = Mat<float>::Zero(2, 2);
    CHECK_THROWS(apply_update(m, bad));

    // fresh adapter (B = 0) changes nothing; merging it changes nothing
    auto m4 = m;
    m4.add_adapter("layer0.w1", 4, 8.0, 7);
    auto with = m4.forward(probe).logits[0];
    CHECK((with - base_logits).cwiseAbs().maxCoeff() == 0.0f);
    auto merged = merge_adapters(m4);
    CHECK(merged.adapters.empty());
    auto after = merged.forward(probe).logits[0];
    CHECK((after - base_logits).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("snapshot/restore round-trip and integrity") {
    auto m = Model::random_init(tiny_cfg(16, 2, 8, 2, 10, 4));
    m.add_adapter("layer0.wq", 2, 4.0, 5);
    m.latent_projections[1].push_back(Vec<float>::Unit(8, 2));
    TokenBatch probe = {{1, 2, 3, 4, 5}};
    auto blob = snapshot(m);
    auto m2 = restore<float>(blob);
    auto a = m.forward(probe).logits[0];
    auto b = m2.forward(probe).logits[0];
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0f);

    auto corrupted = blob;
    corrupted[blob.size() / 2] ^= 0x40;
    CHECK_THROWS_AS(restore<float>(corrupted), std::runtime_error);

    // flip a config byte and re-sign the blob: config hash must catch it
    auto forged = blob;
    forged[19] ^= 0x01;  // LSB of vocab_size (after magic, version, precision tag)
    std::string body = forged.substr(0, forged.size() - 8);
    uint64_t h = fnv1a(body.data(), body.size());
    for (int i = 0; i < 8; ++i)
        forged[forged.size() - 8 + i] = static_cast<char>((h >> (8 * i)) & 0xff);
    CHECK_THROWS(restore<float>(forged));
}

TEST_CASE("same seed and op sequence give bitwise-identical parameters") {
    auto cfg = tiny_cfg(16, 2, 8, 2, 10, 77);
    auto a = Model::random_init(cfg);
    auto b = Model::random_init(cfg);
    for (auto& [name, pa] : a.named_params()) {
        const auto* pb = b.find_param(name);
        CHECK(pa->isApprox(*pb, 0.0f));
    }
}

TEST_CASE("latent projection application is idempotent") {
    auto m = Model::random_init(tiny_cfg(16, 3, 8, 2, 10, 6));
    Vec<float> u = Vec<float>::Random(8);
    u.normalize();
    auto m1 = m;
    m1.latent_projections[2].push_back(u);
    auto m2 = m1;
    m2.latent_projections[2].push_back(u);
    TokenBatch probe = {{3, 1, 4, 1, 5}};
    auto l1 = m1.forward(probe).logits[0];
    auto l2 = m2.forward(probe).logits[0];
    CHECK((l1 - l2).cwiseAbs().maxCoeff() < 1e-5f);
}
