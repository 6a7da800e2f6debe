#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cmgen/commands.hpp"

namespace {

enum class Action { none, prepare, tokenize, train, generate, evaluate, ablate };

// The config file must load before CLI11 writes flag values over it, so the
// --config argument is found with a plain scan first.
std::string find_config_arg(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg == "--config" && i + 1 < argc) return argv[i + 1];
        if (arg.rfind("--config=", 0) == 0) return arg.substr(9);
    }
    return {};
}

void add_model_options(CLI::App* sub, cmgen::RunConfig& cfg, std::string& persona) {
    sub->add_option("--d_model,--d-model", cfg.model.d_model, "embedding width");
    sub->add_option("--n_layers_enc,--n-layers-enc", cfg.model.n_layers_enc,
                    "encoder layers");
    sub->add_option("--n_layers_dec,--n-layers-dec", cfg.model.n_layers_dec,
                    "decoder layers");
    sub->add_option("--n_heads,--n-heads", cfg.model.n_heads, "attention heads");
    sub->add_option("--d_ff,--d-ff", cfg.model.d_ff, "feed-forward width");
    sub->add_option("--max_length,--max-length", cfg.model.max_length,
                    "sequence length cap");
    sub->add_option("--dropout", cfg.model.dropout_p, "dropout probability");
    sub->add_option("--lambda", cfg.model.lambda, "KL weight");
    sub->add_option("--persona_mode,--persona-mode", persona,
                    "randomized | linear | off");
    sub->add_option("--speaker_id_on,--speaker-id-on", cfg.model.speaker_id_on,
                    "add the user embedding to input embeddings");
    sub->add_option("--alignment_on,--alignment-on", cfg.model.alignment_on,
                    "recalibrate logits with the alignment matrix");
    sub->add_option("--fame_on,--fame-on", cfg.model.fame_on,
                    "blend outer-product attention into each head");
}

void add_switch_check(CLI::App* sub, cmgen::RunConfig& cfg) {
    // asking for specific switches on a saved model means they must match it
    sub->parse_complete_callback([sub, &cfg] {
        if (sub->count("--persona_mode") || sub->count("--speaker_id_on") ||
            sub->count("--alignment_on") || sub->count("--fame_on"))
            cfg.check_switches = true;
    });
}

void add_training_options(CLI::App* sub, cmgen::RunConfig& cfg) {
    sub->add_option("--epochs", cfg.epochs, "maximum training epochs");
    sub->add_option("--batch_size,--batch-size", cfg.batch_size, "sequences per step");
    sub->add_option("--patience", cfg.patience,
                    "non-improving epochs before early stop");
    sub->add_option("--lr", cfg.lr, "Adam learning rate");
    sub->add_option("--beta1", cfg.beta1, "Adam beta1");
    sub->add_option("--beta2", cfg.beta2, "Adam beta2");
    sub->add_option("--adam_eps,--adam-eps", cfg.adam_eps, "Adam epsilon");
    sub->add_option("--pair_mode,--pair-mode", cfg.pair_mode,
                    "reconstruction | next_utterance");
    sub->add_option("--target_train_ppl,--target-train-ppl", cfg.target_train_ppl,
                    "stop once training perplexity drops below this (0 = off)");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"persona-aware code-mixed text generation pipeline"};
    app.require_subcommand(1);

    cmgen::RunConfig cfg;
    std::string config_path = find_config_arg(argc, argv);
    if (!config_path.empty()) {
        try {
            cfg = cmgen::RunConfig::from_file(config_path);
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 1;
        }
    }
    std::string persona = cmgen::persona_mode_name(cfg.model.persona_mode);
    std::string config_opt;
    bool verbose = false;
    Action action = Action::none;

    auto add_common = [&](CLI::App* sub, Action a) {
        sub->add_option("--config", config_opt, "JSON config file; flags override it");
        sub->add_option("--seed", cfg.seed, "global random seed");
        sub->add_option("--out_dir,--out-dir", cfg.out_dir, "artifact directory");
        sub->add_flag("--verbose", verbose, "log progress to stdout");
        sub->callback([&action, a] { action = a; });
        return sub;
    };

    CLI::App* prepare = add_common(app.add_subcommand(
        "prepare", "clean, tag, gate, filter and split a raw corpus"), Action::prepare);
    prepare->add_option("--corpus", cfg.corpus, "raw corpus JSONL");
    prepare->add_option("--hindi_words,--hindi-words", cfg.hindi_words,
                        "romanized Hindi lexicon");
    prepare->add_option("--english_words,--english-words", cfg.english_words,
                        "English lexicon");
    prepare->add_option("--hindi_verbs,--hindi-verbs", cfg.hindi_verbs,
                        "Hindi verb list for the code-mixing gate");

    CLI::App* tokenize = add_common(app.add_subcommand(
        "tokenize", "train the BPE tokenizer on the training split"), Action::tokenize);
    tokenize->add_option("--data_dir,--data-dir", cfg.data_dir, "prepared corpus dir");
    tokenize->add_option("--vocab_size,--vocab-size", cfg.vocab_size,
                         "target vocabulary size");

    CLI::App* train = add_common(app.add_subcommand(
        "train", "train the generator with early stopping"), Action::train);
    train->add_option("--data_dir,--data-dir", cfg.data_dir, "prepared corpus dir");
    train->add_option("--tokenizer_dir,--tokenizer-dir", cfg.tokenizer_dir,
                      "vocab/merges dir (default: data_dir)");
    add_model_options(train, cfg, persona);
    add_training_options(train, cfg);
    train->add_flag("--resume", cfg.resume, "continue from checkpoint_last.bin");

    CLI::App* generate = add_common(app.add_subcommand(
        "generate", "greedy-decode one text per validation utterance"), Action::generate);
    generate->add_option("--data_dir,--data-dir", cfg.data_dir, "prepared corpus dir");
    generate->add_option("--tokenizer_dir,--tokenizer-dir", cfg.tokenizer_dir,
                         "vocab/merges dir (default: data_dir)");
    generate->add_option("--checkpoint", cfg.checkpoint,
                         "model file (default: <out_dir>/checkpoint_best.bin)");
    generate->add_option("--requests", cfg.requests,
                         "JSONL of {user_id, seed_word, history_text?} overriding the "
                         "validation-driven default");
    generate->add_option("--generations", cfg.generations,
                         "output path (default: <out_dir>/generations.jsonl)");
    add_model_options(generate, cfg, persona);
    add_switch_check(generate, cfg);

    CLI::App* evaluate = add_common(app.add_subcommand(
        "evaluate", "score generations against the validation split"), Action::evaluate);
    evaluate->add_option("--data_dir,--data-dir", cfg.data_dir, "prepared corpus dir");
    evaluate->add_option("--tokenizer_dir,--tokenizer-dir", cfg.tokenizer_dir,
                         "vocab/merges dir (default: data_dir)");
    evaluate->add_option("--checkpoint", cfg.checkpoint,
                         "model file (default: <out_dir>/checkpoint_best.bin)");
    evaluate->add_option("--generations", cfg.generations,
                         "generations path (default: <out_dir>/generations.jsonl)");
    evaluate->add_option("--pair_mode,--pair-mode", cfg.pair_mode,
                         "reconstruction | next_utterance");
    add_model_options(evaluate, cfg, persona);
    add_switch_check(evaluate, cfg);

    CLI::App* ablate = add_common(app.add_subcommand(
        "ablate", "train and score the full model and four ablations"), Action::ablate);
    ablate->add_option("--data_dir,--data-dir", cfg.data_dir, "prepared corpus dir");
    ablate->add_option("--tokenizer_dir,--tokenizer-dir", cfg.tokenizer_dir,
                       "vocab/merges dir (default: data_dir)");
    add_model_options(ablate, cfg, persona);
    add_training_options(ablate, cfg);

    CLI11_PARSE(app, argc, argv);

    try {
        cfg.model.persona_mode = cmgen::persona_mode_from_name(persona);
        if (verbose) cfg.quiet = false;

        switch (action) {
        case Action::prepare: {
            cmgen::PrepareOutcome o = cmgen::cmd_prepare(cfg);
            std::cout << "texts " << o.stats.texts << ", users " << o.stats.users
                      << ", mean length " << o.stats.mean_text_length << ", mean CMI "
                      << o.stats.mean_cmi << '\n'
                      << "train " << o.train_count << ", validation "
                      << o.validation_count << " -> " << cfg.out_dir << '\n';
            break;
        }
        case Action::tokenize: {
            size_t n = cmgen::cmd_tokenize(cfg);
            std::cout << "vocabulary size " << n << '\n';
            break;
        }
        case Action::train: {
            cmgen::TrainResult r = cmgen::cmd_train(cfg);
            const cmgen::EpochStats& last = r.history.back();
            std::cout << "epochs run " << r.history.size() << ", final train loss "
                      << last.train_loss << ", best val loss " << r.best_val
                      << " (epoch " << r.best_epoch << ")";
            if (r.early_stopped) std::cout << ", stopped early";
            if (r.reached_target_ppl) std::cout << ", reached target perplexity";
            std::cout << '\n';
            break;
        }
        case Action::generate: {
            auto rows = cmgen::cmd_generate(cfg);
            std::cout << rows.size() << " generations\n";
            break;
        }
        case Action::evaluate: {
            cmgen::MetricReport r = cmgen::cmd_evaluate(cfg);
            std::cout << "Perplexity " << r.perplexity << ", CM BLEU " << r.bleu * 100.0
                      << ", CM Rouge-1 " << r.rouge1 * 100.0 << ", CM Rouge-L "
                      << r.rougeL * 100.0 << ", CM KS " << r.ks << " (" << r.pairs
                      << " pairs)\n";
            break;
        }
        case Action::ablate: {
            auto rows = cmgen::cmd_ablate(cfg);
            std::cout << cmgen::ablation_table(rows);
            break;
        }
        case Action::none:
            break;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
