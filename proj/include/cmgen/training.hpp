#pragma once

#include <string>
#include <vector>

#include "cmgen/checkpoint.hpp"
#include "cmgen/corpus.hpp"
#include "cmgen/model.hpp"
#include "cmgen/rng.hpp"
#include "cmgen/tokenizer.hpp"

namespace cmgen {

enum class PairMode { reconstruction, next_utterance };
const std::string& pair_mode_name(PairMode m);
PairMode pair_mode_from_name(const std::string& name);

struct TrainingExample {
    size_t user_index = 0;
    std::vector<int> encoder_ids;    // conditioning utterance
    std::vector<int> decoder_input;  // [CLS] + target tokens
    std::vector<int> targets;        // target tokens + [SEP]
};

TrainingExample make_example(const std::vector<int>& encoder_tokens,
                             const std::vector<int>& target_tokens,
                             size_t user_index, size_t max_length);

struct ExampleSets {
    std::vector<TrainingExample> train;
    std::vector<TrainingExample> validation;
};

// reconstruction: every utterance conditions on itself. next_utterance:
// consecutive utterances of a user's timeline form (history, target) pairs,
// assigned to the split that holds the target.
ExampleSets build_example_sets(const SplitDataset& split, const BpeTokenizer& tokenizer,
                               const UserTable& users, PairMode mode,
                               size_t max_length);

struct TrainOptions {
    size_t epochs = 50;
    size_t batch_size = 4;
    size_t patience = 10;
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    double target_train_ppl = 0.0;   // stop once training perplexity drops below
    std::string best_checkpoint_path;
    std::string last_checkpoint_path;
    std::string log_path;            // JSONL, appended
    bool verbose = false;
};

struct EpochStats {
    size_t epoch = 0;
    double train_loss = 0.0;
    double train_l1 = 0.0;
    double train_l2 = 0.0;
    double train_ppl = 0.0;
    double val_loss = 0.0;
    double val_ppl = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    double best_val = 0.0;
    size_t best_epoch = 0;
    bool early_stopped = false;
    bool reached_target_ppl = false;
};

// Gradient-descent loop with early stopping on validation loss. Aborts with
// NumericError naming the first non-finite parameter if the loss leaves the
// reals. Pass a snapshot loaded from the last checkpoint to resume; the run
// then continues exactly as if it had never stopped.
TrainResult train_model(Model& model, const std::vector<TrainingExample>& train,
                        const std::vector<TrainingExample>& validation,
                        const TrainOptions& opts, RngStreams& streams,
                        const TrainerSnapshot* resume = nullptr);

// Pooled token-mean cross-entropy of the aligned logits, evaluation mode.
double validation_loss(const Model& model, const std::vector<TrainingExample>& examples);
double perplexity(const Model& model, const std::vector<TrainingExample>& examples);

} // namespace cmgen
