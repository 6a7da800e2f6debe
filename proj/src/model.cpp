#include "cmgen/model.hpp"

#include <cmath>

#include <json.hpp>

#include "cmgen/errors.hpp"
#include "cmgen/tokenizer.hpp"

namespace cmgen {

using json = nlohmann::ordered_json;

namespace {
constexpr double kMaskedScore = -1e9;
}

const std::string& persona_mode_name(PersonaMode m) {
    static const std::string randomized = "randomized", linear = "linear", off = "off";
    switch (m) {
        case PersonaMode::randomized: return randomized;
        case PersonaMode::linear: return linear;
        default: return off;
    }
}

PersonaMode persona_mode_from_name(const std::string& name) {
    if (name == "randomized") return PersonaMode::randomized;
    if (name == "linear") return PersonaMode::linear;
    if (name == "off") return PersonaMode::off;
    throw ContractError("unknown persona mode '" + name + "'");
}

void ModelConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
        throw DimensionError("ModelConfig: d_model " + std::to_string(d_model) +
                             " must be a positive multiple of n_heads " +
                             std::to_string(n_heads));
    if (n_layers_enc == 0 || n_layers_dec == 0)
        throw ContractError("ModelConfig: need at least one encoder and decoder layer");
    if (d_ff == 0) throw ContractError("ModelConfig: d_ff must be positive");
    if (vocab_size <= special_tokens().size())
        throw ContractError("ModelConfig: vocab_size must exceed the 4 specials");
    if (max_length < 2) throw ContractError("ModelConfig: max_length must be >= 2");
    if (dropout_p < 0.0 || dropout_p >= 1.0)
        throw ContractError("ModelConfig: dropout_p must lie in [0, 1)");
    if (lambda < 0.0) throw ContractError("ModelConfig: lambda must be >= 0");
}

std::string ModelConfig::to_json() const {
    json j;
    j["d_model"] = d_model;
    j["n_layers_enc"] = n_layers_enc;
    j["n_layers_dec"] = n_layers_dec;
    j["n_heads"] = n_heads;
    j["d_ff"] = d_ff;
    j["vocab_size"] = vocab_size;
    j["n_users"] = n_users;
    j["max_length"] = max_length;
    j["dropout_p"] = dropout_p;
    j["lambda"] = lambda;
    j["persona_mode"] = persona_mode_name(persona_mode);
    j["speaker_id_on"] = speaker_id_on;
    j["alignment_on"] = alignment_on;
    j["fame_on"] = fame_on;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw IoError(std::string("ModelConfig: bad JSON: ") + e.what());
    }
    ModelConfig c;
    c.d_model = j.at("d_model").get<size_t>();
    c.n_layers_enc = j.at("n_layers_enc").get<size_t>();
    c.n_layers_dec = j.at("n_layers_dec").get<size_t>();
    c.n_heads = j.at("n_heads").get<size_t>();
    c.d_ff = j.at("d_ff").get<size_t>();
    c.vocab_size = j.at("vocab_size").get<size_t>();
    c.n_users = j.at("n_users").get<size_t>();
    c.max_length = j.at("max_length").get<size_t>();
    c.dropout_p = j.at("dropout_p").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.persona_mode = persona_mode_from_name(j.at("persona_mode").get<std::string>());
    c.speaker_id_on = j.at("speaker_id_on").get<bool>();
    c.alignment_on = j.at("alignment_on").get<bool>();
    c.fame_on = j.at("fame_on").get<bool>();
    c.validate();
    return c;
}

Tensor positional_encoding(size_t n, size_t d) {
    if (n == 0 || d == 0) throw DimensionError("positional_encoding: empty shape");
    std::vector<double> pe(n * d);
    for (size_t pos = 0; pos < n; ++pos) {
        for (size_t j = 0; j < d; ++j) {
            size_t pair = j / 2;
            double rate = std::pow(10000.0, -2.0 * static_cast<double>(pair) /
                                                static_cast<double>(d));
            double angle = static_cast<double>(pos) * rate;
            pe[pos * d + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return Tensor({n, d}, std::move(pe));
}

Tensor alignment_scores(const Tensor& embedding, const Tensor& wq, const Tensor& wk) {
    Tensor q = matmul(embedding, wq);
    Tensor k = matmul(embedding, wk);
    double inv = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
    Tensor scores = scale(matmul(q, transpose(k)), inv);
    return softmax(scores, 1);
}

Tensor align_logits(const Tensor& raw, const Tensor& alignment) {
    if (alignment.rank() != 2 || alignment.rows() != alignment.cols() ||
        raw.cols() != alignment.rows())
        throw DimensionError("align_logits: logits " + shape_str(raw.shape()) +
                             " incompatible with alignment " +
                             shape_str(alignment.shape()));
    return add(matmul(raw, alignment), raw);
}

void Model::register_param(const std::string& name, Tensor t) {
    params_.emplace_back(name, t);
}

Tensor Model::init_matrix(const std::string& name, size_t rows, size_t cols, Rng& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    Tensor t({rows, cols}, std::move(v), true);
    register_param(name, t);
    return t;
}

Tensor Model::init_zeros(const std::string& name, Shape shape) {
    Tensor t(std::move(shape), 0.0, true);
    register_param(name, t);
    return t;
}

Tensor Model::init_ones(const std::string& name, Shape shape) {
    Tensor t(std::move(shape), 1.0, true);
    register_param(name, t);
    return t;
}

FameParams Model::init_attention(const std::string& prefix, Rng& rng) {
    size_t d = cfg_.d_model;
    size_t dh = d / cfg_.n_heads;
    FameParams p;
    p.wq = init_matrix(prefix + ".wq", d, d, rng);
    p.bq = init_zeros(prefix + ".bq", {d});
    p.wk = init_matrix(prefix + ".wk", d, d, rng);
    p.bk = init_zeros(prefix + ".bk", {d});
    p.wv = init_matrix(prefix + ".wv", d, d, rng);
    p.bv = init_zeros(prefix + ".bv", {d});
    p.wo = init_matrix(prefix + ".wo", d, d, rng);
    p.bo = init_zeros(prefix + ".bo", {d});
    p.gamma = init_matrix(prefix + ".gamma", cfg_.n_heads, dh, rng);
    p.gate = init_zeros(prefix + ".gate", {cfg_.n_heads, 1});
    return p;
}

Model::Model(ModelConfig cfg, Rng& init_rng) : cfg_(cfg) {
    cfg_.validate();
    size_t d = cfg_.d_model;
    enc_emb_ = init_matrix("enc.emb", cfg_.vocab_size, d, init_rng);
    dec_emb_ = init_matrix("dec.emb", cfg_.vocab_size, d, init_rng);
    // Final row is the unknown-user persona.
    user_emb_ = init_matrix("user.emb", cfg_.n_users + 1, d, init_rng);
    w_mu_ = init_matrix("persona.w_mu", d, d, init_rng);
    w_sigma_ = init_zeros("persona.w_sigma", {d, d});  // starts at sigma == 1
    for (size_t i = 0; i < cfg_.n_layers_enc; ++i) {
        std::string prefix = "enc." + std::to_string(i);
        EncoderLayerParams layer;
        layer.attn = init_attention(prefix + ".attn", init_rng);
        layer.ln1_gain = init_ones(prefix + ".ln1.gain", {d});
        layer.ln1_bias = init_zeros(prefix + ".ln1.bias", {d});
        layer.w1 = init_matrix(prefix + ".ffn.w1", d, cfg_.d_ff, init_rng);
        layer.b1 = init_zeros(prefix + ".ffn.b1", {cfg_.d_ff});
        layer.w2 = init_matrix(prefix + ".ffn.w2", cfg_.d_ff, d, init_rng);
        layer.b2 = init_zeros(prefix + ".ffn.b2", {d});
        layer.ln2_gain = init_ones(prefix + ".ln2.gain", {d});
        layer.ln2_bias = init_zeros(prefix + ".ln2.bias", {d});
        enc_layers_.push_back(std::move(layer));
    }
    for (size_t i = 0; i < cfg_.n_layers_dec; ++i) {
        std::string prefix = "dec." + std::to_string(i);
        DecoderLayerParams layer;
        layer.self_attn = init_attention(prefix + ".self", init_rng);
        layer.ln1_gain = init_ones(prefix + ".ln1.gain", {d});
        layer.ln1_bias = init_zeros(prefix + ".ln1.bias", {d});
        layer.cross_attn = init_attention(prefix + ".cross", init_rng);
        layer.ln2_gain = init_ones(prefix + ".ln2.gain", {d});
        layer.ln2_bias = init_zeros(prefix + ".ln2.bias", {d});
        layer.w1 = init_matrix(prefix + ".ffn.w1", d, cfg_.d_ff, init_rng);
        layer.b1 = init_zeros(prefix + ".ffn.b1", {cfg_.d_ff});
        layer.w2 = init_matrix(prefix + ".ffn.w2", cfg_.d_ff, d, init_rng);
        layer.b2 = init_zeros(prefix + ".ffn.b2", {d});
        layer.ln3_gain = init_ones(prefix + ".ln3.gain", {d});
        layer.ln3_bias = init_zeros(prefix + ".ln3.bias", {d});
        dec_layers_.push_back(std::move(layer));
    }
    out_w_ = init_matrix("out.w", d, cfg_.vocab_size, init_rng);
    out_b_ = init_zeros("out.b", {cfg_.vocab_size});
    align_wq_ = init_matrix("align.wq", d, d, init_rng);
    align_wk_ = init_matrix("align.wk", d, d, init_rng);
}

Tensor Model::parameter(const std::string& name) const {
    for (const auto& [n, t] : params_)
        if (n == name) return t;
    throw IndexError("Model: no parameter named '" + name + "'");
}

std::vector<Tensor> Model::parameter_tensors() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& [n, t] : params_) out.push_back(t);
    return out;
}

void Model::zero_grad() {
    for (auto& [n, t] : params_) t.zero_grad();
}

Tensor Model::embed_input(const std::vector<int>& token_ids, size_t user_index) const {
    if (token_ids.empty()) throw DegenerateInputError("embed_input: no tokens");
    if (token_ids.size() > cfg_.max_length)
        throw ContractError("embed_input: " + std::to_string(token_ids.size()) +
                            " tokens exceed max_length " + std::to_string(cfg_.max_length));
    if (user_index > cfg_.n_users)
        throw IndexError("embed_input: user index " + std::to_string(user_index) +
                         " outside table of " + std::to_string(cfg_.n_users) +
                         " users plus unknown slot");
    Tensor x = add(embedding_rows(enc_emb_, token_ids),
                   positional_encoding(token_ids.size(), cfg_.d_model));
    if (cfg_.speaker_id_on) {
        Tensor u = embedding_rows(user_emb_, {static_cast<int>(user_index)});
        x = add_rowvec(x, u);
    }
    return x;
}

PersonaState Model::persona_sample(size_t user_index, const ForwardOptions& opts) const {
    if (user_index > cfg_.n_users)
        throw IndexError("persona_sample: user index " + std::to_string(user_index) +
                         " outside table of " + std::to_string(cfg_.n_users) +
                         " users plus unknown slot");
    PersonaState st;
    st.user_index = user_index;
    size_t d = cfg_.d_model;
    st.global = embedding_rows(user_emb_, {static_cast<int>(user_index)});
    if (cfg_.persona_mode == PersonaMode::off) {
        st.mu = Tensor({1, d}, 0.0);
        st.log_sigma = Tensor({1, d}, 0.0);
        st.sigma = Tensor({1, d}, 1.0);
        st.contextual = Tensor({1, d}, 0.0);
        return st;
    }
    st.mu = matmul(st.global, w_mu_);
    st.log_sigma = matmul(st.global, w_sigma_);
    st.sigma = exp(st.log_sigma);
    if (cfg_.persona_mode == PersonaMode::linear) {
        st.contextual = st.mu;
        return st;
    }
    if (opts.training) {
        if (opts.persona_eps) {
            if (opts.persona_eps->size() != d)
                throw DimensionError("persona_sample: frozen noise has " +
                                     std::to_string(opts.persona_eps->size()) +
                                     " entries, expected " + std::to_string(d));
            st.epsilon = *opts.persona_eps;
        } else {
            if (!opts.noise_rng)
                throw ContractError("persona_sample: training draw needs a noise stream");
            st.epsilon.resize(d);
            for (auto& e : st.epsilon) e = opts.noise_rng->normal();
        }
        Tensor eps({1, d}, st.epsilon);
        st.contextual = add(st.mu, mul(st.sigma, eps));
    } else {
        st.contextual = st.mu;  // evaluation uses the mean
    }
    return st;
}

EncoderOutput Model::encode(const std::vector<int>& token_ids, size_t user_index,
                            const ForwardOptions& opts,
                            const PersonaState* persona) const {
    Tensor x = embed_input(token_ids, user_index);
    for (const auto& layer : enc_layers_) {
        Tensor a = fame_attention(layer.attn, x, x, x, /*causal=*/false, opts);
        x = layer_norm(add(x, a), layer.ln1_gain, layer.ln1_bias);
        Tensor f = feed_forward(x, layer.w1, layer.b1, layer.w2, layer.b2, opts);
        x = layer_norm(add(x, f), layer.ln2_gain, layer.ln2_bias);
    }
    EncoderOutput out;
    out.persona = persona ? *persona : persona_sample(user_index, opts);
    if (persona && persona->user_index != user_index)
        throw ContractError("encode: persona state belongs to a different user");
    out.hidden = cfg_.persona_mode == PersonaMode::off
                     ? x
                     : add_rowvec(x, out.persona.contextual);
    return out;
}

Tensor Model::feed_forward(const Tensor& x, const Tensor& w1, const Tensor& b1,
                           const Tensor& w2, const Tensor& b2,
                           const ForwardOptions& opts) const {
    Tensor h = relu(add_rowvec(matmul(x, w1), b1));
    if (opts.training && cfg_.dropout_p > 0.0) {
        if (!opts.dropout_rng)
            throw ContractError("feed_forward: training forward needs a dropout stream");
        h = dropout(h, cfg_.dropout_p, *opts.dropout_rng, true);
    }
    return add_rowvec(matmul(h, w2), b2);
}

Tensor Model::fame_attention(const FameParams& p, const Tensor& q_in,
                             const Tensor& k_in, const Tensor& v_in, bool causal,
                             const ForwardOptions& opts) const {
    size_t d = cfg_.d_model;
    size_t heads = cfg_.n_heads;
    size_t dh = d / heads;
    Tensor q = add_rowvec(matmul(q_in, p.wq), p.bq);
    Tensor k = add_rowvec(matmul(k_in, p.wk), p.bk);
    Tensor v = add_rowvec(matmul(v_in, p.wv), p.bv);
    size_t n_q = q.rows(), n_k = k.rows();

    Tensor mask;
    if (causal) {
        if (n_q != n_k)
            throw DimensionError("fame_attention: causal mask needs square scores, got " +
                                 std::to_string(n_q) + " queries and " +
                                 std::to_string(n_k) + " keys");
        std::vector<double> m(n_q * n_k, 0.0);
        for (size_t i = 0; i < n_q; ++i)
            for (size_t j = i + 1; j < n_k; ++j) m[i * n_k + j] = kMaskedScore;
        mask = Tensor({n_q, n_k}, std::move(m));
    }

    bool use_dropout = opts.training && cfg_.dropout_p > 0.0;
    if (use_dropout && !opts.dropout_rng)
        throw ContractError("fame_attention: training forward needs a dropout stream");

    auto attend = [&](const Tensor& scores, const Tensor& values) {
        Tensor s = mask.defined() ? add(scores, mask) : scores;
        Tensor w = softmax(s, 1);
        if (use_dropout) w = dropout(w, cfg_.dropout_p, *opts.dropout_rng, true);
        return matmul(w, values);
    };

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(heads);
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor kt = transpose(kh);
        Tensor dot_scores = scale(matmul(qh, kt), inv_sqrt);
        Tensor sdpa = attend(dot_scores, vh);
        if (!cfg_.fame_on) {
            head_outputs.push_back(sdpa);
            continue;
        }
        // Outer-product branch: score(i,j) = gamma . (q_i * k_j).
        Tensor gamma_h = slice_rows(p.gamma, h, 1);
        Tensor outer_scores = matmul(mul_rowvec(qh, gamma_h), kt);
        Tensor opa = attend(outer_scores, vh);
        Tensor g = sigmoid(slice_rows(p.gate, h, 1));
        Tensor g_complement = add_scalar(scale(g, -1.0), 1.0);
        head_outputs.push_back(add(scale_by(sdpa, g), scale_by(opa, g_complement)));
    }
    Tensor merged = heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
    return add_rowvec(matmul(merged, p.wo), p.bo);
}

DecoderLogits Model::decode_forward(const std::vector<int>& shifted_target_ids,
                                    const EncoderOutput& enc,
                                    const ForwardOptions& opts,
                                    const Tensor* alignment) const {
    if (shifted_target_ids.empty())
        throw DegenerateInputError("decode_forward: no decoder input");
    if (shifted_target_ids.front() != kClsId)
        throw ContractError("decode_forward: decoder input must start with [CLS]");
    if (shifted_target_ids.size() > cfg_.max_length)
        throw ContractError("decode_forward: " +
                            std::to_string(shifted_target_ids.size()) +
                            " positions exceed max_length " +
                            std::to_string(cfg_.max_length));
    Tensor y = add(embedding_rows(dec_emb_, shifted_target_ids),
                   positional_encoding(shifted_target_ids.size(), cfg_.d_model));
    for (const auto& layer : dec_layers_) {
        Tensor a = fame_attention(layer.self_attn, y, y, y, /*causal=*/true, opts);
        y = layer_norm(add(y, a), layer.ln1_gain, layer.ln1_bias);
        Tensor c = fame_attention(layer.cross_attn, y, enc.hidden, enc.hidden,
                                  /*causal=*/false, opts);
        y = layer_norm(add(y, c), layer.ln2_gain, layer.ln2_bias);
        Tensor f = feed_forward(y, layer.w1, layer.b1, layer.w2, layer.b2, opts);
        y = layer_norm(add(y, f), layer.ln3_gain, layer.ln3_bias);
    }
    DecoderLogits out;
    out.raw = add_rowvec(matmul(y, out_w_), out_b_);
    if (!cfg_.alignment_on) {
        out.aligned = out.raw;
        return out;
    }
    Tensor a = alignment ? *alignment : alignment_matrix();
    out.aligned = align_logits(out.raw, a);
    return out;
}

Tensor Model::alignment_matrix() const {
    return alignment_scores(dec_emb_, align_wq_, align_wk_);
}

Tensor Model::kl_term(const PersonaState& persona) const {
    if (cfg_.persona_mode != PersonaMode::randomized) return Tensor::scalar(0.0);
    // -1/2 sum(1 + 2 log sigma - mu^2 - sigma^2)
    Tensor inner = add_scalar(scale(persona.log_sigma, 2.0), 1.0);
    inner = sub(inner, mul(persona.mu, persona.mu));
    inner = sub(inner, mul(persona.sigma, persona.sigma));
    return scale(sum(inner), -0.5);
}

LossParts Model::loss_total(const DecoderLogits& logits, const std::vector<int>& targets,
                            const PersonaState& persona, double lambda) const {
    LossParts parts;
    parts.reconstruction = cross_entropy(logits.aligned, targets, kPadId);
    if (lambda != 0.0 && cfg_.persona_mode == PersonaMode::randomized) {
        parts.kl = kl_term(persona);
        parts.total = add(parts.reconstruction, scale(parts.kl, lambda));
    } else {
        parts.kl = Tensor::scalar(0.0);
        parts.total = parts.reconstruction;
    }
    return parts;
}

} // namespace cmgen
