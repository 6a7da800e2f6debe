#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace cmgen {

// Reserved ids, fixed across every artifact.
inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kUnkId = 3;

const std::vector<std::string>& special_tokens();
bool is_special_id(int id);

// Splits a UTF-8 string into codepoint strings; malformed bytes become
// single-byte symbols rather than failing.
std::vector<std::string> utf8_split(const std::string& s);

std::vector<std::string> split_words(const std::string& text);

// Word-internal byte-pair tokenizer. Words are split on whitespace, turned
// into codepoint symbols plus a standalone end-of-word marker, and merges are
// learned greedily by pair frequency (ties: lexicographically smaller pair).
// Immutable once trained/loaded, so concurrent readers are safe.
class BpeTokenizer {
public:
    static constexpr const char* kEowMarker = "</w>";

    // Learns merges from cleaned texts until the vocabulary holds
    // target_vocab_size entries or no adjacent pair remains. Requires
    // target_vocab_size > distinct character count + the 4 specials.
    static BpeTokenizer train(const std::vector<std::string>& texts,
                              size_t target_vocab_size);

    static BpeTokenizer load(const std::string& vocab_path,
                             const std::string& merges_path);
    void save(const std::string& vocab_path, const std::string& merges_path) const;

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    size_t vocab_size() const { return id_to_token_.size(); }
    const std::vector<std::string>& tokens() const { return id_to_token_; }
    const std::vector<std::pair<std::string, std::string>>& merges() const {
        return merges_;
    }
    int token_id(const std::string& token) const;  // -1 when absent

private:
    std::vector<std::string> id_to_token_;
    std::map<std::string, int> token_to_id_;
    std::vector<std::pair<std::string, std::string>> merges_;
    std::map<std::pair<std::string, std::string>, size_t> merge_rank_;

    void index();
    std::vector<std::string> word_symbols(const std::string& word) const;
};

} // namespace cmgen
