#pragma once

#include <string>
#include <vector>

#include "cmgen/corpus.hpp"
#include "cmgen/model.hpp"
#include "cmgen/tokenizer.hpp"

namespace cmgen {

struct GenerationRequest {
    std::string user_id;
    std::string history_text;  // the user's most recent prior utterance, cleaned
    std::string seed_word;
    size_t max_length = 40;    // token budget including [CLS] and the seed
};

struct GenerationResult {
    std::string text;            // decoded output, specials stripped
    std::vector<int> token_ids;  // full sequence including [CLS] / [SEP]
};

// Greedy decoding: start from [CLS] + seed tokens, feed the growing sequence
// back through the decoder, stop at [SEP] or the length budget. Evaluation
// mode throughout, so identical requests give identical outputs. The encoder
// runs once up front; its output does not depend on the growing sequence.
GenerationResult generate(const GenerationRequest& request, const Model& model,
                          const BpeTokenizer& tokenizer, const UserTable& users);

} // namespace cmgen
