#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tb {

// Architecture of the toy autoregressive transformer. The substrate accepts
// any n_layers >= 1 / vocab_size >= 2 (tests use 1-layer hand-set models);
// pipeline configs additionally require n_layers >= 6 and vocab_size >= 16 so
// the layer indices referenced by defenses and attacks exist.
struct ModelConfig {
    int vocab_size = 512;
    int n_layers = 8;
    int d_model = 128;
    int n_heads = 4;
    int max_seq_len = 128;
    int64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    int mlp_hidden() const { return 4 * d_model; }

    void validate_substrate() const {
        if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
        if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
        if (n_heads < 1 || d_model < 1) throw std::invalid_argument("ModelConfig: bad dims");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
        if (max_seq_len < 2) throw std::invalid_argument("ModelConfig: max_seq_len must be >= 2");
    }

    bool operator==(const ModelConfig& o) const {
        return vocab_size == o.vocab_size && n_layers == o.n_layers && d_model == o.d_model &&
               n_heads == o.n_heads && max_seq_len == o.max_seq_len && seed == o.seed;
    }
};

}  // namespace tb
