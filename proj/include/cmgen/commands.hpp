#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmgen/corpus.hpp"
#include "cmgen/metrics.hpp"
#include "cmgen/model.hpp"
#include "cmgen/training.hpp"

namespace cmgen {

// Everything a pipeline command needs. Each command reads the subset of
// fields it cares about and persists the effective configuration next to its
// artifacts.
struct RunConfig {
    // inputs and artifact locations
    std::string corpus;          // raw corpus JSONL
    std::string hindi_words;
    std::string english_words;
    std::string hindi_verbs;
    std::string data_dir;        // prepared corpus directory
    std::string tokenizer_dir;   // vocab + merges; defaults to data_dir
    std::string out_dir;
    std::string checkpoint;      // defaults to <out_dir>/checkpoint_best.bin
    std::string requests;        // optional generation driver JSONL
    std::string generations;     // defaults to <out_dir>/generations.jsonl

    uint64_t seed = 7;
    size_t vocab_size = 2000;    // BPE target vocabulary
    ModelConfig model;           // vocab_size / n_users are overwritten from artifacts

    size_t epochs = 50;
    size_t batch_size = 4;
    size_t patience = 10;
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    std::string pair_mode = "reconstruction";
    double target_train_ppl = 0.0;
    bool resume = false;
    bool check_switches = false;  // verify checkpoint ablation flags against `model`
    bool quiet = true;

    std::string to_json() const;
    static RunConfig from_json(const std::string& text);
    static RunConfig from_file(const std::string& path);
    void save(const std::string& path) const;
};

std::string join_path(const std::string& dir, const std::string& name);

struct PrepareOutcome {
    CorpusStats stats;
    size_t train_count = 0;
    size_t validation_count = 0;
};

// clean -> tag -> gate -> filter -> split -> seed words; writes train.jsonl,
// validation.jsonl, users.txt, stats.json and lexicon copies to out_dir.
PrepareOutcome cmd_prepare(const RunConfig& cfg);

// Trains the BPE tokenizer on the prepared training split; returns vocab size.
size_t cmd_tokenize(const RunConfig& cfg);

// Trains with early stopping; writes checkpoint_best.bin, checkpoint_last.bin
// and train_log.jsonl. With cfg.resume, continues from checkpoint_last.bin.
TrainResult cmd_train(const RunConfig& cfg);

struct GenerationRow {
    std::string user_id;
    long order_index = 0;
    std::string seed_word;
    std::string generated_text;
    double generated_cmi = 0.0;
};

// One generation per validation utterance (seed word + the user's last
// training utterance as history), or per line of cfg.requests when given.
std::vector<GenerationRow> cmd_generate(const RunConfig& cfg);

// Perplexity on the validation split plus pair metrics against generations
// aligned by (user_id, order_index); writes report.json and report.csv.
MetricReport cmd_evaluate(const RunConfig& cfg);

struct AblationRow {
    std::string variant;
    MetricReport report;
};

// Full model plus the four single-switch ablations, trained and evaluated
// under one seed; writes ablation.json and ablation.csv.
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg);

std::string ablation_table(const std::vector<AblationRow>& rows);

} // namespace cmgen
