#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cmgen/rng.hpp"
#include "cmgen/tensor.hpp"

namespace cmgen {

enum class PersonaMode { randomized, linear, off };

const std::string& persona_mode_name(PersonaMode m);
PersonaMode persona_mode_from_name(const std::string& name);

struct ModelConfig {
    size_t d_model = 64;
    size_t n_layers_enc = 2;
    size_t n_layers_dec = 2;
    size_t n_heads = 4;
    size_t d_ff = 256;
    size_t vocab_size = 2000;
    size_t n_users = 0;
    size_t max_length = 40;
    double dropout_p = 0.1;
    double lambda = 0.5;
    PersonaMode persona_mode = PersonaMode::randomized;
    bool speaker_id_on = true;
    bool alignment_on = true;
    bool fame_on = true;

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
};

struct PersonaState {
    size_t user_index = 0;
    Tensor global;        // user embedding row, 1 x d
    Tensor mu;            // 1 x d
    Tensor log_sigma;     // 1 x d
    Tensor sigma;         // 1 x d, exp(log_sigma)
    Tensor contextual;    // the vector added to encoder output, 1 x d
    std::vector<double> epsilon;  // noise draw; empty when not sampled
};

struct EncoderOutput {
    Tensor hidden;        // n x d, persona already added
    PersonaState persona;
};

struct DecoderLogits {
    Tensor raw;           // m x vocab
    Tensor aligned;       // m x vocab; same tensor as raw when alignment is off
};

struct LossParts {
    Tensor total;
    Tensor reconstruction;  // token-mean cross-entropy
    Tensor kl;              // 0 unless randomized persona with lambda != 0
};

struct ForwardOptions {
    bool training = false;
    Rng* dropout_rng = nullptr;            // needed when training with dropout_p > 0
    Rng* noise_rng = nullptr;              // needed for randomized persona training
    const std::vector<double>* persona_eps = nullptr;  // frozen noise override
};

struct FameParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor gamma;   // n_heads x d_head, one mixing vector per head
    Tensor gate;    // n_heads, pre-sigmoid blend scalars
};

struct EncoderLayerParams {
    FameParams attn;
    Tensor ln1_gain, ln1_bias;
    Tensor w1, b1, w2, b2;
    Tensor ln2_gain, ln2_bias;
};

struct DecoderLayerParams {
    FameParams self_attn;
    Tensor ln1_gain, ln1_bias;
    FameParams cross_attn;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;
    Tensor ln3_gain, ln3_bias;
};

Tensor positional_encoding(size_t n, size_t d);

// Row-stochastic vocabulary association matrix from the decoder embedding.
Tensor alignment_scores(const Tensor& embedding, const Tensor& wq, const Tensor& wk);
// raw * A + raw.
Tensor align_logits(const Tensor& raw, const Tensor& alignment);

// Persona-conditioned transformer encoder-decoder over BPE ids. All
// parameters exist regardless of the ablation switches (the switches gate
// computation only), so a fixed init seed yields comparable weights across
// ablation variants.
class Model {
public:
    Model(ModelConfig cfg, Rng& init_rng);

    const ModelConfig& config() const { return cfg_; }

    // Token embedding + sinusoidal position + (optionally) user embedding.
    Tensor embed_input(const std::vector<int>& token_ids, size_t user_index) const;

    PersonaState persona_sample(size_t user_index, const ForwardOptions& opts = {}) const;

    EncoderOutput encode(const std::vector<int>& token_ids, size_t user_index,
                         const ForwardOptions& opts = {},
                         const PersonaState* persona = nullptr) const;

    // shifted_target_ids starts with [CLS]. Pass a precomputed alignment
    // matrix to share it across sequences of a step; it is rebuilt otherwise.
    DecoderLogits decode_forward(const std::vector<int>& shifted_target_ids,
                                 const EncoderOutput& enc,
                                 const ForwardOptions& opts = {},
                                 const Tensor* alignment = nullptr) const;

    Tensor alignment_matrix() const;

    LossParts loss_total(const DecoderLogits& logits, const std::vector<int>& targets,
                         const PersonaState& persona, double lambda) const;
    Tensor kl_term(const PersonaState& persona) const;

    Tensor fame_attention(const FameParams& p, const Tensor& q_in, const Tensor& k_in,
                          const Tensor& v_in, bool causal,
                          const ForwardOptions& opts) const;

    const std::vector<std::pair<std::string, Tensor>>& parameters() const {
        return params_;
    }
    Tensor parameter(const std::string& name) const;
    std::vector<Tensor> parameter_tensors() const;
    void zero_grad();

private:
    ModelConfig cfg_;
    Tensor enc_emb_, dec_emb_, user_emb_;
    Tensor w_mu_, w_sigma_;
    std::vector<EncoderLayerParams> enc_layers_;
    std::vector<DecoderLayerParams> dec_layers_;
    Tensor out_w_, out_b_;
    Tensor align_wq_, align_wk_;
    std::vector<std::pair<std::string, Tensor>> params_;

    Tensor feed_forward(const Tensor& x, const Tensor& w1, const Tensor& b1,
                        const Tensor& w2, const Tensor& b2,
                        const ForwardOptions& opts) const;
    FameParams init_attention(const std::string& prefix, Rng& rng);
    Tensor init_matrix(const std::string& name, size_t rows, size_t cols, Rng& rng);
    Tensor init_zeros(const std::string& name, Shape shape);
    Tensor init_ones(const std::string& name, Shape shape);
    void register_param(const std::string& name, Tensor t);

    friend class Checkpoint;
};

} // namespace cmgen
