#include "cmgen/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cmgen/errors.hpp"
#include "cmgen/metrics.hpp"
#include "cmgen/tokenizer.hpp"

namespace cmgen {

using json = nlohmann::ordered_json;

const std::string& tag_name(LangTag t) {
    static const std::string hi = "Hi", en = "En", other = "Other";
    switch (t) {
        case LangTag::Hi: return hi;
        case LangTag::En: return en;
        default: return other;
    }
}

LangTag tag_from_name(const std::string& name) {
    if (name == "Hi") return LangTag::Hi;
    if (name == "En") return LangTag::En;
    if (name == "Other") return LangTag::Other;
    throw ContractError("unknown language tag '" + name + "'");
}

LexiconTagger::LexiconTagger(std::set<std::string> hindi_words,
                             std::set<std::string> english_words,
                             std::set<std::string> hindi_verbs)
    : hindi_(std::move(hindi_words)),
      english_(std::move(english_words)),
      verbs_(std::move(hindi_verbs)) {
    // Verbs are Hindi words by definition; folding them in keeps the two
    // lists consistent even if the verb file has extras.
    for (const auto& v : verbs_) hindi_.insert(v);
}

std::set<std::string> read_word_list(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read word list " + path);
    std::set<std::string> words;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        // Normalize the same way clean_text lowercases.
        std::string w;
        for (char c : line)
            w += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        std::istringstream is(w);
        std::string tok;
        while (is >> tok) words.insert(tok);
    }
    return words;
}

LexiconTagger LexiconTagger::from_files(const std::string& hindi_path,
                                        const std::string& english_path,
                                        const std::string& verbs_path) {
    return LexiconTagger(read_word_list(hindi_path), read_word_list(english_path),
                         read_word_list(verbs_path));
}

bool has_devanagari(const std::string& token) {
    for (const auto& cp : utf8_split(token)) {
        if (cp.size() == 3) {
            unsigned char b0 = static_cast<unsigned char>(cp[0]);
            unsigned char b1 = static_cast<unsigned char>(cp[1]);
            // U+0900..U+097F encodes as E0 A4 80 .. E0 A5 BF
            if (b0 == 0xE0 && (b1 == 0xA4 || b1 == 0xA5)) return true;
        }
    }
    return false;
}

LangTag LexiconTagger::tag_token(const std::string& token) const {
    if (has_devanagari(token)) return LangTag::Hi;
    if (hindi_.count(token)) return LangTag::Hi;
    if (english_.count(token)) return LangTag::En;
    return LangTag::Other;
}

LangTagSeq LexiconTagger::tag(const std::vector<std::string>& tokens) const {
    LangTagSeq tags;
    tags.reserve(tokens.size());
    for (const auto& t : tokens) tags.push_back(tag_token(t));
    return tags;
}

bool LexiconTagger::is_hindi_verb(const std::string& token) const {
    return verbs_.count(token) > 0;
}

namespace {

bool is_space_byte(char c) {
    return std::isspace(static_cast<unsigned char>(c)) != 0;
}

std::string strip_html_tags(const std::string& s) {
    std::string out;
    bool in_tag = false;
    for (char c : s) {
        if (c == '<') { in_tag = true; continue; }
        if (in_tag) {
            if (c == '>') in_tag = false;
            continue;
        }
        out += c;
    }
    return out;
}

bool matches_prefix_nocase(const std::string& s, size_t at, const char* prefix) {
    for (size_t j = 0; prefix[j] != '\0'; ++j) {
        if (at + j >= s.size()) return false;
        char c = s[at + j];
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
        if (c != prefix[j]) return false;
    }
    return true;
}

std::string strip_urls(const std::string& s) {
    std::string out;
    size_t i = 0;
    while (i < s.size()) {
        bool url = false;
        for (const char* prefix : {"http://", "https://", "www."}) {
            if (matches_prefix_nocase(s, i, prefix)) { url = true; break; }
        }
        if (url && (i == 0 || is_space_byte(s[i - 1]))) {
            while (i < s.size() && !is_space_byte(s[i])) ++i;
        } else {
            out += s[i];
            ++i;
        }
    }
    return out;
}

bool is_emoticon_codepoint(uint32_t cp) {
    return (cp >= 0x1F000 && cp <= 0x1FAFF) ||  // pictographs, emoticons, symbols
           (cp >= 0x2600 && cp <= 0x27BF) ||    // misc symbols and dingbats
           (cp >= 0x2190 && cp <= 0x21FF) ||    // arrows
           (cp >= 0xFE00 && cp <= 0xFE0F) ||    // variation selectors
           cp == 0x200D;                        // zero-width joiner
}

uint32_t decode_codepoint(const std::string& cp) {
    uint32_t v = 0;
    if (cp.empty()) return 0;
    unsigned char b0 = static_cast<unsigned char>(cp[0]);
    if (cp.size() == 1) return b0;
    if (cp.size() == 2) v = b0 & 0x1F;
    else if (cp.size() == 3) v = b0 & 0x0F;
    else v = b0 & 0x07;
    for (size_t i = 1; i < cp.size(); ++i)
        v = (v << 6) | (static_cast<unsigned char>(cp[i]) & 0x3F);
    return v;
}

std::string strip_emoticons(const std::string& s) {
    std::string out;
    for (const auto& cp : utf8_split(s))
        if (!is_emoticon_codepoint(decode_codepoint(cp))) out += cp;
    return out;
}

std::string strip_marked_tokens(const std::string& s, char marker) {
    std::string out;
    size_t i = 0;
    while (i < s.size()) {
        if (s[i] == marker && (i == 0 || is_space_byte(s[i - 1]))) {
            while (i < s.size() && !is_space_byte(s[i])) ++i;
        } else {
            out += s[i];
            ++i;
        }
    }
    return out;
}

std::string strip_digits(const std::string& s) {
    std::string out;
    for (const auto& cp : utf8_split(s)) {
        if (cp.size() == 1 && std::isdigit(static_cast<unsigned char>(cp[0]))) continue;
        uint32_t v = decode_codepoint(cp);
        if (v >= 0x0966 && v <= 0x096F) continue;  // Devanagari digits
        out += cp;
    }
    return out;
}

std::string lowercase_ascii(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s)
        out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::string collapse_whitespace(const std::string& s) {
    std::string out;
    for (const auto& w : split_words(s)) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

} // namespace

std::string clean_text(const std::string& raw) {
    std::string s = strip_html_tags(raw);
    s = strip_urls(s);
    s = strip_emoticons(s);
    s = strip_marked_tokens(s, '@');
    s = strip_marked_tokens(s, '#');
    s = strip_digits(s);
    s = lowercase_ascii(s);
    return collapse_whitespace(s);
}

LangTagSeq tag_language(const std::vector<std::string>& tokens,
                        const LexiconTagger& tagger) {
    return tagger.tag(tokens);
}

bool is_code_mixed(const std::vector<std::string>& tokens, const LangTagSeq& tags,
                   const LexiconTagger& tagger) {
    if (tokens.size() != tags.size())
        throw DimensionError("is_code_mixed: " + std::to_string(tokens.size()) +
                             " tokens vs " + std::to_string(tags.size()) + " tags");
    for (size_t i = 0; i < tokens.size(); ++i)
        if (tags[i] == LangTag::Hi && tagger.is_hindi_verb(tokens[i])) return true;
    return false;
}

std::vector<Utterance> prepare_utterances(std::vector<Utterance> raw,
                                          const LexiconTagger& tagger) {
    std::vector<Utterance> kept;
    for (auto& u : raw) {
        u.clean_text = clean_text(u.raw_text);
        u.tokens = split_words(u.clean_text);
        if (u.tokens.empty()) continue;
        if (!u.provided_tags.empty()) {
            if (u.provided_tags.size() != u.tokens.size())
                throw AlignmentError("utterance " + u.user_id + "/" +
                                     std::to_string(u.order_index) + " supplies " +
                                     std::to_string(u.provided_tags.size()) +
                                     " tags for " + std::to_string(u.tokens.size()) +
                                     " cleaned tokens");
            u.tags.clear();
            for (const auto& t : u.provided_tags) u.tags.push_back(tag_from_name(t));
        } else {
            u.tags = tagger.tag(u.tokens);
        }
        u.code_mixed = is_code_mixed(u.tokens, u.tags, tagger);
        u.cmi = compute_cmi(u.tags);
        if (u.code_mixed) kept.push_back(std::move(u));
    }
    // Users need at least 3 qualifying utterances to be kept.
    std::map<std::string, size_t> per_user;
    for (const auto& u : kept) ++per_user[u.user_id];
    std::vector<Utterance> out;
    for (auto& u : kept)
        if (per_user[u.user_id] >= 3) out.push_back(std::move(u));
    if (out.empty())
        throw DegenerateInputError(
            "prepare_utterances: no user has 3 code-mixed utterances");
    return out;
}

SplitDataset split_dataset(std::vector<Utterance> utterances, uint64_t seed) {
    (void)seed;
    std::map<std::string, std::vector<Utterance>> by_user;
    for (auto& u : utterances) by_user[u.user_id].push_back(std::move(u));
    SplitDataset split;
    for (auto& [user, list] : by_user) {
        if (list.size() < 3)
            throw ContractError("split_dataset: user " + user + " has only " +
                                std::to_string(list.size()) + " utterances");
        std::stable_sort(list.begin(), list.end(),
                         [](const Utterance& a, const Utterance& b) {
                             return a.order_index < b.order_index;
                         });
        size_t n_val = static_cast<size_t>(
            std::ceil(0.25 * static_cast<double>(list.size())));
        if (n_val == 0) n_val = 1;
        size_t n_train = list.size() - n_val;
        for (size_t i = 0; i < list.size(); ++i)
            (i < n_train ? split.train : split.validation).push_back(list[i]);
    }
    return split;
}

std::string seed_word(const Utterance& u) {
    std::vector<std::string> words =
        u.tokens.empty() ? split_words(u.clean_text) : u.tokens;
    if (words.empty())
        throw DegenerateInputError("seed_word: utterance " + u.user_id + "/" +
                                   std::to_string(u.order_index) + " has no words");
    return words.front();
}

CorpusStats corpus_stats(const std::vector<Utterance>& utterances) {
    CorpusStats stats;
    stats.texts = utterances.size();
    std::set<std::string> users;
    double len_sum = 0.0, cmi_sum = 0.0;
    for (const auto& u : utterances) {
        users.insert(u.user_id);
        len_sum += static_cast<double>(u.tokens.size());
        cmi_sum += u.cmi;
    }
    stats.users = users.size();
    if (!utterances.empty()) {
        stats.mean_text_length = len_sum / static_cast<double>(utterances.size());
        stats.mean_cmi = cmi_sum / static_cast<double>(utterances.size());
    }
    return stats;
}

std::vector<Utterance> read_corpus_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read corpus " + path);
    std::vector<Utterance> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw IoError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        Utterance u;
        if (!j.contains("user_id") || !j.contains("text"))
            throw IoError(path + ":" + std::to_string(line_no) +
                          ": user_id and text are required");
        u.user_id = j["user_id"].get<std::string>();
        u.order_index = j.value("order_index", static_cast<long>(line_no));
        u.raw_text = j["text"].get<std::string>();
        if (j.contains("tags"))
            for (const auto& t : j["tags"])
                u.provided_tags.push_back(t.get<std::string>());
        out.push_back(std::move(u));
    }
    return out;
}

void write_prepared_jsonl(const std::string& path,
                          const std::vector<Utterance>& utterances,
                          bool with_seed_word) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    for (const auto& u : utterances) {
        json j;
        j["user_id"] = u.user_id;
        j["order_index"] = u.order_index;
        j["text"] = u.raw_text;
        j["clean_text"] = u.clean_text;
        json tags = json::array();
        for (auto t : u.tags) tags.push_back(tag_name(t));
        j["tags"] = tags;
        j["cmi"] = u.cmi;
        if (with_seed_word) j["seed_word"] = seed_word(u);
        f << j.dump() << '\n';
    }
}

std::vector<Utterance> read_prepared_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read prepared corpus " + path);
    std::vector<Utterance> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw IoError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        Utterance u;
        u.user_id = j.at("user_id").get<std::string>();
        u.order_index = j.at("order_index").get<long>();
        u.raw_text = j.value("text", std::string());
        u.clean_text = j.at("clean_text").get<std::string>();
        u.tokens = split_words(u.clean_text);
        for (const auto& t : j.at("tags")) u.tags.push_back(tag_from_name(t.get<std::string>()));
        if (u.tags.size() != u.tokens.size())
            throw AlignmentError(path + ":" + std::to_string(line_no) +
                                 ": tags do not align with clean_text tokens");
        u.cmi = j.value("cmi", compute_cmi(u.tags));
        u.code_mixed = true;
        out.push_back(std::move(u));
    }
    return out;
}

UserTable UserTable::from_utterances(const std::vector<Utterance>& utterances) {
    std::set<std::string> ids;
    for (const auto& u : utterances) ids.insert(u.user_id);
    UserTable t;
    for (const auto& id : ids) {
        t.index_[id] = t.ids_.size();
        t.ids_.push_back(id);
    }
    return t;
}

UserTable UserTable::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read user table " + path);
    UserTable t;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (t.index_.count(line))
            throw CompatibilityError("user table " + path + " repeats id " + line);
        t.index_[line] = t.ids_.size();
        t.ids_.push_back(line);
    }
    return t;
}

void UserTable::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write user table " + path);
    for (const auto& id : ids_) f << id << '\n';
}

size_t UserTable::index_or_unknown(const std::string& user_id) const {
    auto it = index_.find(user_id);
    return it == index_.end() ? unknown_index() : it->second;
}

std::optional<size_t> UserTable::index_of(const std::string& user_id) const {
    auto it = index_.find(user_id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

const std::string& UserTable::id(size_t index) const {
    if (index >= ids_.size())
        throw IndexError("UserTable::id: index " + std::to_string(index) +
                         " outside table of " + std::to_string(ids_.size()));
    return ids_[index];
}

} // namespace cmgen
