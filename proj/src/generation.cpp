#include "cmgen/generation.hpp"

#include <algorithm>

#include "cmgen/errors.hpp"

namespace cmgen {

GenerationResult generate(const GenerationRequest& request, const Model& model,
                          const BpeTokenizer& tokenizer, const UserTable& users) {
    if (request.seed_word.empty())
        throw ContractError("generate: seed word is empty");
    if (request.history_text.empty())
        throw ContractError("generate: history text is empty");
    if (request.max_length < 2 || request.max_length > model.config().max_length)
        throw ContractError("generate: max_length " + std::to_string(request.max_length) +
                            " outside [2, " + std::to_string(model.config().max_length) + "]");

    NoGradGuard eval;
    size_t user = users.index_or_unknown(request.user_id);

    std::vector<int> history = tokenizer.encode(request.history_text);
    if (history.empty())
        throw DegenerateInputError("generate: history encodes to no tokens");
    if (history.size() > model.config().max_length)
        history.resize(model.config().max_length);
    EncoderOutput enc = model.encode(history, user);

    Tensor alignment;
    if (model.config().alignment_on) alignment = model.alignment_matrix();
    const Tensor* alignment_ptr = alignment.defined() ? &alignment : nullptr;

    std::vector<int> seq;
    seq.push_back(kClsId);
    for (int id : tokenizer.encode(request.seed_word)) {
        if (seq.size() >= request.max_length) break;
        seq.push_back(id);
    }

    while (seq.back() != kSepId && seq.size() < request.max_length) {
        DecoderLogits logits = model.decode_forward(seq, enc, {}, alignment_ptr);
        const auto& values = logits.aligned.values();
        size_t vocab = logits.aligned.cols();
        const double* row = values.data() + (logits.aligned.rows() - 1) * vocab;
        size_t best = 0;
        for (size_t j = 1; j < vocab; ++j)
            if (row[j] > row[best]) best = j;  // ties keep the lowest id
        seq.push_back(static_cast<int>(best));
    }

    GenerationResult result;
    result.token_ids = seq;
    result.text = tokenizer.decode(seq);
    return result;
}

} // namespace cmgen
