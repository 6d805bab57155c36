#pragma once

// Weight-space tampering carriers: additive deltas, zeroing masks, and
// adapter merges. apply_update is pure; the input model is never touched.

#include "tb/model.hpp"

namespace tb {

template <class S>
struct WeightDelta {
    std::map<std::string, Mat<S>> deltas;
};

// mask(i,j) != 0 means the entry is zeroed
template <class S>
struct WeightMask {
    std::map<std::string, Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>> masks;

    int64_t count_masked() const {
        int64_t n = 0;
        for (const auto& [name, m] : masks) n += (m.array() != 0).count();
        return n;
    }
};

template <class S>
ModelT<S> apply_update(const ModelT<S>& model, const WeightDelta<S>& up) {
    ModelT<S> out = model;
    for (const auto& [name, d] : up.deltas) {
        Mat<S>* p = out.find_param(name);
        if (!p) throw std::invalid_argument("apply_update: unknown parameter " + name);
        if (p->rows() != d.rows() || p->cols() != d.cols())
            throw std::invalid_argument("apply_update: shape mismatch for " + name);
        *p += d;
    }
    return out;
}

template <class S>
ModelT<S> apply_update(const ModelT<S>& model, const WeightMask<S>& up) {
    ModelT<S> out = model;
    for (const auto& [name, m] : up.masks) {
        Mat<S>* p = out.find_param(name);
        if (!p) throw std::invalid_argument("apply_update: unknown parameter " + name);
        if (p->rows() != m.rows() || p->cols() != m.cols())
            throw std::invalid_argument("apply_update: mask shape mismatch for " + name);
        for (Eigen::Index i = 0; i < p->rows(); ++i)
            for (Eigen::Index j = 0; j < p->cols(); ++j)
                if (m(i, j)) (*p)(i, j) = S(0);
    }
    return out;
}

// Bake all adapter deltas into the base weights and drop the adapter list.
template <class S>
ModelT<S> merge_adapters(const ModelT<S>& model) {
    ModelT<S> out = model;
    for (const auto& a : out.adapters) {
        Mat<S>* p = out.find_param(a.target);
        if (!p) throw std::invalid_argument("merge_adapters: unknown target " + a.target);
        p->noalias() += a.scale() * (a.B * a.A).transpose();
    }
    out.adapters.clear();
    return out;
}

// Attach an adapter built elsewhere (e.g. a fine-tuning attack payload).
template <class S>
ModelT<S> with_adapter(const ModelT<S>& model, const Adapter<S>& a) {
    ModelT<S> out = model;
    if (!out.find_param(a.target))
        throw std::invalid_argument("with_adapter: unknown target " + a.target);
    out.adapters.push_back(a);
    return out;
}

}  // namespace tb
