#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace cmgen {

enum class LangTag { Hi, En, Other };

const std::string& tag_name(LangTag t);
LangTag tag_from_name(const std::string& name);

using LangTagSeq = std::vector<LangTag>;

struct Utterance {
    std::string user_id;
    long order_index = 0;
    std::string raw_text;
    std::string clean_text;
    std::vector<std::string> tokens;       // whitespace tokens of clean_text
    LangTagSeq tags;
    std::vector<std::string> provided_tags;  // optional, aligned with tokens
    bool code_mixed = false;
    double cmi = 0.0;
};

// Token-level language tagging from three lowercase word lists. Devanagari
// script wins outright; otherwise Hindi lexicon is consulted before English.
class LexiconTagger {
public:
    LexiconTagger(std::set<std::string> hindi_words,
                  std::set<std::string> english_words,
                  std::set<std::string> hindi_verbs);
    static LexiconTagger from_files(const std::string& hindi_path,
                                    const std::string& english_path,
                                    const std::string& verbs_path);

    LangTag tag_token(const std::string& token) const;
    LangTagSeq tag(const std::vector<std::string>& tokens) const;
    bool is_hindi_verb(const std::string& token) const;

private:
    std::set<std::string> hindi_;
    std::set<std::string> english_;
    std::set<std::string> verbs_;
};

bool has_devanagari(const std::string& token);

// Noise removal in fixed order: HTML tags, URLs, emoticons, @mentions,
// #hashtags, digits, lowercasing, whitespace collapse. Idempotent.
std::string clean_text(const std::string& raw);

LangTagSeq tag_language(const std::vector<std::string>& tokens,
                        const LexiconTagger& tagger);

// An utterance qualifies when some Hindi-tagged token is a known Hindi verb.
bool is_code_mixed(const std::vector<std::string>& tokens, const LangTagSeq& tags,
                   const LexiconTagger& tagger);

// Cleans, tags (pre-supplied tags win when aligned), gates on the Hindi-verb
// rule, and keeps only users with at least 3 qualifying utterances.
std::vector<Utterance> prepare_utterances(std::vector<Utterance> raw,
                                          const LexiconTagger& tagger);

struct SplitDataset {
    std::vector<Utterance> train;
    std::vector<Utterance> validation;
};

// Chronological per-user split: the last ceil(25%) utterances (at least 1)
// go to validation, the rest to training. Requires >= 3 per user. The seed
// is reserved for future randomized splits and does not affect this one.
SplitDataset split_dataset(std::vector<Utterance> utterances, uint64_t seed);

std::string seed_word(const Utterance& u);

struct CorpusStats {
    size_t texts = 0;
    size_t users = 0;
    double mean_text_length = 0.0;
    double mean_cmi = 0.0;
};
CorpusStats corpus_stats(const std::vector<Utterance>& utterances);

// JSONL: one object per line with user_id, order_index, text and optional
// tags. Prepared files add clean_text, tags, cmi, and seed_word.
std::vector<Utterance> read_corpus_jsonl(const std::string& path);
void write_prepared_jsonl(const std::string& path,
                          const std::vector<Utterance>& utterances,
                          bool with_seed_word);
std::vector<Utterance> read_prepared_jsonl(const std::string& path);

std::set<std::string> read_word_list(const std::string& path);

// String user ids to dense indices; index n_users is the unknown-user slot.
class UserTable {
public:
    static UserTable from_utterances(const std::vector<Utterance>& utterances);
    static UserTable load(const std::string& path);
    void save(const std::string& path) const;

    size_t size() const { return ids_.size(); }
    size_t unknown_index() const { return ids_.size(); }
    size_t index_or_unknown(const std::string& user_id) const;
    std::optional<size_t> index_of(const std::string& user_id) const;
    const std::string& id(size_t index) const;

private:
    std::vector<std::string> ids_;
    std::map<std::string, size_t> index_;
};

} // namespace cmgen
