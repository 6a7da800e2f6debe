#include "cmgen/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "cmgen/errors.hpp"

namespace cmgen {

const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> specials = {"[PAD]", "[CLS]", "[SEP]", "[UNK]"};
    return specials;
}

bool is_special_id(int id) { return id >= kPadId && id <= kUnkId; }

std::vector<std::string> utf8_split(const std::string& s) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < s.size()) {
        unsigned char c = static_cast<unsigned char>(s[i]);
        size_t len = 1;
        if (c < 0x80) len = 1;
        else if ((c & 0xE0) == 0xC0) len = 2;
        else if ((c & 0xF0) == 0xE0) len = 3;
        else if ((c & 0xF8) == 0xF0) len = 4;
        if (i + len > s.size()) len = 1;
        for (size_t k = 1; k < len; ++k) {
            if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) {
                len = 1;  // malformed continuation, fall back to the raw byte
                break;
            }
        }
        out.push_back(s.substr(i, len));
        i += len;
    }
    return out;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream is(text);
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

std::vector<std::string> BpeTokenizer::word_symbols(const std::string& word) const {
    std::vector<std::string> syms = utf8_split(word);
    syms.push_back(kEowMarker);
    return syms;
}

namespace {

using Pair = std::pair<std::string, std::string>;

void merge_in_place(std::vector<std::string>& syms, const Pair& pair,
                    const std::string& merged) {
    std::vector<std::string> out;
    out.reserve(syms.size());
    size_t i = 0;
    while (i < syms.size()) {
        if (i + 1 < syms.size() && syms[i] == pair.first && syms[i + 1] == pair.second) {
            out.push_back(merged);
            i += 2;
        } else {
            out.push_back(syms[i]);
            ++i;
        }
    }
    syms.swap(out);
}

} // namespace

BpeTokenizer BpeTokenizer::train(const std::vector<std::string>& texts,
                                 size_t target_vocab_size) {
    // Word frequencies; std::map keeps every downstream loop deterministic.
    std::map<std::string, long> word_counts;
    for (const auto& text : texts)
        for (const auto& w : split_words(text)) ++word_counts[w];
    if (word_counts.empty())
        throw DegenerateInputError("BpeTokenizer::train: corpus has no words");

    BpeTokenizer tok;
    std::set<std::string> chars;
    for (const auto& [word, count] : word_counts)
        for (const auto& c : utf8_split(word)) chars.insert(c);
    if (target_vocab_size <= chars.size() + special_tokens().size())
        throw ContractError("BpeTokenizer::train: target vocabulary " +
                            std::to_string(target_vocab_size) + " cannot cover " +
                            std::to_string(chars.size()) + " characters plus specials");

    tok.id_to_token_ = special_tokens();
    for (const auto& c : chars) tok.id_to_token_.push_back(c);
    tok.id_to_token_.push_back(kEowMarker);

    std::vector<std::pair<std::vector<std::string>, long>> words;
    words.reserve(word_counts.size());
    for (const auto& [word, count] : word_counts)
        words.emplace_back(tok.word_symbols(word), count);

    while (tok.id_to_token_.size() < target_vocab_size) {
        std::map<Pair, long> freqs;
        for (const auto& [syms, count] : words)
            for (size_t i = 0; i + 1 < syms.size(); ++i)
                freqs[{syms[i], syms[i + 1]}] += count;
        if (freqs.empty()) break;
        // Highest frequency; the ordered map hands ties to the
        // lexicographically smaller pair automatically.
        Pair best;
        long best_count = 0;
        for (const auto& [pair, count] : freqs) {
            if (count > best_count) {
                best = pair;
                best_count = count;
            }
        }
        std::string merged = best.first + best.second;
        for (auto& [syms, count] : words) merge_in_place(syms, best, merged);
        tok.merges_.push_back(best);
        tok.id_to_token_.push_back(merged);
    }
    tok.index();
    return tok;
}

void BpeTokenizer::index() {
    token_to_id_.clear();
    merge_rank_.clear();
    for (size_t i = 0; i < id_to_token_.size(); ++i) {
        if (token_to_id_.count(id_to_token_[i]))
            throw CompatibilityError("BpeTokenizer: duplicate token '" + id_to_token_[i] + "'");
        token_to_id_[id_to_token_[i]] = static_cast<int>(i);
    }
    for (size_t r = 0; r < merges_.size(); ++r) merge_rank_[merges_[r]] = r;
    for (size_t i = 0; i < special_tokens().size(); ++i) {
        if (id_to_token_.size() <= i || id_to_token_[i] != special_tokens()[i])
            throw CompatibilityError("BpeTokenizer: token " + std::to_string(i) +
                                     " must be " + special_tokens()[i]);
    }
}

int BpeTokenizer::token_id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? -1 : it->second;
}

std::vector<int> BpeTokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& word : split_words(text)) {
        std::vector<std::string> syms = word_symbols(word);
        // Apply merges in learned rank order until none fits.
        while (syms.size() > 1) {
            size_t best_rank = merge_rank_.size();
            for (size_t i = 0; i + 1 < syms.size(); ++i) {
                auto it = merge_rank_.find({syms[i], syms[i + 1]});
                if (it != merge_rank_.end() && it->second < best_rank)
                    best_rank = it->second;
            }
            if (best_rank == merge_rank_.size()) break;
            const Pair& pair = merges_[best_rank];
            merge_in_place(syms, pair, pair.first + pair.second);
        }
        for (const auto& s : syms) {
            int id = token_id(s);
            ids.push_back(id < 0 ? kUnkId : id);
        }
    }
    return ids;
}

std::string BpeTokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id < 0 || static_cast<size_t>(id) >= id_to_token_.size())
            throw IndexError("BpeTokenizer::decode: id " + std::to_string(id) +
                             " outside vocabulary of " + std::to_string(id_to_token_.size()));
        if (is_special_id(id)) continue;
        const std::string& tok = id_to_token_[static_cast<size_t>(id)];
        // End-of-word markers, standalone or merged in, become spaces.
        size_t pos = 0;
        std::string marker = kEowMarker;
        std::string piece = tok;
        while ((pos = piece.find(marker, pos)) != std::string::npos) {
            piece.replace(pos, marker.size(), " ");
            pos += 1;
        }
        out += piece;
    }
    // Collapse whatever spacing the markers produced into single spaces.
    std::istringstream is(out);
    std::string w, result;
    while (is >> w) {
        if (!result.empty()) result += ' ';
        result += w;
    }
    return result;
}

void BpeTokenizer::save(const std::string& vocab_path,
                        const std::string& merges_path) const {
    std::ofstream vf(vocab_path);
    if (!vf) throw IoError("cannot write " + vocab_path);
    for (const auto& t : id_to_token_) vf << t << '\n';
    std::ofstream mf(merges_path);
    if (!mf) throw IoError("cannot write " + merges_path);
    for (const auto& [l, r] : merges_) mf << l << ' ' << r << '\n';
}

BpeTokenizer BpeTokenizer::load(const std::string& vocab_path,
                                const std::string& merges_path) {
    std::ifstream vf(vocab_path);
    if (!vf) throw IoError("cannot read " + vocab_path);
    BpeTokenizer tok;
    std::string line;
    while (std::getline(vf, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        tok.id_to_token_.push_back(line);
    }
    std::ifstream mf(merges_path);
    if (!mf) throw IoError("cannot read " + merges_path);
    while (std::getline(mf, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        size_t sp = line.find(' ');
        if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size())
            throw IoError("malformed merge line '" + line + "' in " + merges_path);
        tok.merges_.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    tok.index();
    return tok;
}

} // namespace cmgen
