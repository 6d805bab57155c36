#pragma once

// Self-describing binary checkpoint blob: header, config, named parameter
// arrays, adapters, latent projections, and a trailing content hash. The
// config hash is checked on restore so a blob cannot be loaded into a
// mismatched architecture.

#include "tb/model.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace tb {

namespace ckpt_detail {

constexpr uint32_t kMagic = 0x544D4231;  // "TMB1"
constexpr uint32_t kVersion = 1;

inline void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<char*>(&v), 4); }
inline void put_u64(std::string& out, uint64_t v) { out.append(reinterpret_cast<char*>(&v), 8); }
inline void put_i64(std::string& out, int64_t v) { out.append(reinterpret_cast<char*>(&v), 8); }
inline void put_f64(std::string& out, double v) { out.append(reinterpret_cast<char*>(&v), 8); }
inline void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.append(s);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    explicit Reader(const std::string& b) : buf(b) {}
    void need(size_t n) const {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated blob");
    }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    int64_t i64() { return static_cast<int64_t>(u64()); }
    double f64() {
        need(8);
        double v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        need(n);
        std::string s(buf.data() + pos, n);
        pos += n;
        return s;
    }
};

template <class S>
void put_mat(std::string& out, const Mat<S>& m) {
    put_u32(out, static_cast<uint32_t>(m.rows()));
    put_u32(out, static_cast<uint32_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()),
               static_cast<size_t>(m.size()) * sizeof(S));
}

template <class S>
Mat<S> get_mat(Reader& r) {
    uint32_t rows = r.u32(), cols = r.u32();
    Mat<S> m(rows, cols);
    size_t bytes = static_cast<size_t>(m.size()) * sizeof(S);
    r.need(bytes);
    std::memcpy(m.data(), r.buf.data() + r.pos, bytes);
    r.pos += bytes;
    return m;
}

inline uint64_t config_hash(const ModelConfig& c) {
    std::ostringstream ss;
    ss << c.vocab_size << '|' << c.n_layers << '|' << c.d_model << '|' << c.n_heads << '|'
       << c.max_seq_len;
    return fnv1a(ss.str());
}

}  // namespace ckpt_detail

template <class S>
std::string snapshot(const ModelT<S>& m) {
    using namespace ckpt_detail;
    std::string body;
    put_u32(body, kMagic);
    put_u32(body, kVersion);
    put_str(body, ModelT<S>::precision_tag());
    put_u32(body, static_cast<uint32_t>(m.config.vocab_size));
    put_u32(body, static_cast<uint32_t>(m.config.n_layers));
    put_u32(body, static_cast<uint32_t>(m.config.d_model));
    put_u32(body, static_cast<uint32_t>(m.config.n_heads));
    put_u32(body, static_cast<uint32_t>(m.config.max_seq_len));
    put_i64(body, m.config.seed);
    put_u64(body, config_hash(m.config));

    auto params = m.named_params();
    put_u32(body, static_cast<uint32_t>(params.size()));
    for (auto& [name, p] : params) {
        put_str(body, name);
        put_mat(body, *p);
    }
    put_u32(body, static_cast<uint32_t>(m.adapters.size()));
    for (const auto& a : m.adapters) {
        put_str(body, a.target);
        put_u32(body, static_cast<uint32_t>(a.rank));
        put_f64(body, a.alpha);
        put_mat(body, a.A);
        put_mat(body, a.B);
    }
    uint32_t n_proj = 0;
    for (const auto& v : m.latent_projections) n_proj += static_cast<uint32_t>(v.size());
    put_u32(body, n_proj);
    for (size_t l = 0; l < m.latent_projections.size(); ++l) {
        for (const auto& u : m.latent_projections[l]) {
            put_u32(body, static_cast<uint32_t>(l));
            Mat<S> col = u;
            put_mat(body, col);
        }
    }

    std::string out = body;
    put_u64(out, fnv1a(body.data(), body.size()));
    return out;
}

template <class S>
ModelT<S> restore(const std::string& blob) {
    using namespace ckpt_detail;
    if (blob.size() < 16) throw std::runtime_error("checkpoint: blob too small");
    std::string body = blob.substr(0, blob.size() - 8);
    Reader tail(blob);
    tail.pos = blob.size() - 8;
    if (tail.u64() != fnv1a(body.data(), body.size()))
        throw std::runtime_error("checkpoint: integrity check failed (corrupted blob)");

    Reader r(body);
    if (r.u32() != kMagic) throw std::runtime_error("checkpoint: bad magic");
    uint32_t ver = r.u32();
    if (ver != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(ver));
    std::string prec = r.str();
    if (prec != ModelT<S>::precision_tag())
        throw std::runtime_error("checkpoint: precision mismatch, blob has " + prec);

    ModelT<S> m;
    m.config.vocab_size = static_cast<int>(r.u32());
    m.config.n_layers = static_cast<int>(r.u32());
    m.config.d_model = static_cast<int>(r.u32());
    m.config.n_heads = static_cast<int>(r.u32());
    m.config.max_seq_len = static_cast<int>(r.u32());
    m.config.seed = r.i64();
    uint64_t stored_hash = r.u64();
    if (stored_hash != config_hash(m.config))
        throw std::runtime_error("checkpoint: config hash mismatch");
    m.config.validate_substrate();

    m.layers.resize(m.config.n_layers);
    m.latent_projections.assign(m.config.n_layers, {});
    uint32_t n_params = r.u32();
    std::map<std::string, Mat<S>> loaded;
    for (uint32_t i = 0; i < n_params; ++i) {
        std::string name = r.str();
        loaded[name] = get_mat<S>(r);
    }
    m.visit_params([&](const std::string& name, Mat<S>& dst) {
        auto it = loaded.find(name);
        if (it == loaded.end())
            throw std::runtime_error("checkpoint: missing parameter " + name);
        dst = std::move(it->second);
        loaded.erase(it);
    });
    if (!loaded.empty())
        throw std::runtime_error("checkpoint: unknown parameter " + loaded.begin()->first);

    uint32_t n_adapters = r.u32();
    for (uint32_t i = 0; i < n_adapters; ++i) {
        Adapter<S> a;
        a.target = r.str();
        a.rank = static_cast<int>(r.u32());
        a.alpha = r.f64();
        a.A = get_mat<S>(r);
        a.B = get_mat<S>(r);
        m.adapters.push_back(std::move(a));
    }
    uint32_t n_proj = r.u32();
    for (uint32_t i = 0; i < n_proj; ++i) {
        uint32_t layer = r.u32();
        if (layer >= static_cast<uint32_t>(m.config.n_layers))
            throw std::runtime_error("checkpoint: projection layer out of range");
        Mat<S> col = get_mat<S>(r);
        m.latent_projections[layer].push_back(Vec<S>(col));
    }
    return m;
}

template <class S>
void save_checkpoint_file(const ModelT<S>& m, const std::string& path) {
    std::string blob = snapshot(m);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

template <class S>
ModelT<S> load_checkpoint_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return restore<S>(ss.str());
}

}  // namespace tb
