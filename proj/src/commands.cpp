#include "cmgen/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cmgen/checkpoint.hpp"
#include "cmgen/errors.hpp"
#include "cmgen/generation.hpp"
#include "cmgen/tokenizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace cmgen {

namespace {

void require_field(const std::string& value, const std::string& name) {
    if (value.empty()) throw ContractError("missing required setting: " + name);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void spill(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    if (!out) throw IoError("failed writing " + path);
}

void copy_into(const std::string& src, const std::string& dest) {
    if (fs::exists(dest) && fs::equivalent(src, dest)) return;
    spill(dest, slurp(src));
}

std::string tokenizer_dir_of(const RunConfig& cfg) {
    return cfg.tokenizer_dir.empty() ? cfg.data_dir : cfg.tokenizer_dir;
}

std::string checkpoint_of(const RunConfig& cfg) {
    if (!cfg.checkpoint.empty()) return cfg.checkpoint;
    require_field(cfg.out_dir, "out_dir (needed to locate the checkpoint)");
    return join_path(cfg.out_dir, "checkpoint_best.bin");
}

std::string generations_of(const RunConfig& cfg) {
    if (!cfg.generations.empty()) return cfg.generations;
    require_field(cfg.out_dir, "out_dir (needed to locate generations)");
    return join_path(cfg.out_dir, "generations.jsonl");
}

LexiconTagger tagger_from_data_dir(const std::string& data_dir) {
    return LexiconTagger::from_files(join_path(data_dir, "hindi_words.txt"),
                                     join_path(data_dir, "english_words.txt"),
                                     join_path(data_dir, "hindi_verbs.txt"));
}

BpeTokenizer tokenizer_from(const RunConfig& cfg) {
    std::string dir = tokenizer_dir_of(cfg);
    require_field(dir, "tokenizer_dir or data_dir");
    return BpeTokenizer::load(join_path(dir, "vocab.txt"),
                              join_path(dir, "merges.txt"));
}

SplitDataset split_from(const std::string& data_dir) {
    SplitDataset split;
    split.train = read_prepared_jsonl(join_path(data_dir, "train.jsonl"));
    split.validation = read_prepared_jsonl(join_path(data_dir, "validation.jsonl"));
    return split;
}

// Last training utterance per user, by order index.
std::map<std::string, const Utterance*>
latest_per_user(const std::vector<Utterance>& utterances) {
    std::map<std::string, const Utterance*> latest;
    for (const auto& u : utterances) {
        const Utterance*& slot = latest[u.user_id];
        if (slot == nullptr || u.order_index >= slot->order_index) slot = &u;
    }
    return latest;
}

} // namespace

std::string join_path(const std::string& dir, const std::string& name) {
    if (dir.empty()) return name;
    return (fs::path(dir) / name).string();
}

std::string RunConfig::to_json() const {
    ordered_json j;
    j["corpus"] = corpus;
    j["hindi_words"] = hindi_words;
    j["english_words"] = english_words;
    j["hindi_verbs"] = hindi_verbs;
    j["data_dir"] = data_dir;
    j["tokenizer_dir"] = tokenizer_dir;
    j["out_dir"] = out_dir;
    j["checkpoint"] = checkpoint;
    j["requests"] = requests;
    j["generations"] = generations;
    j["seed"] = seed;
    j["vocab_size"] = vocab_size;
    j["d_model"] = model.d_model;
    j["n_layers_enc"] = model.n_layers_enc;
    j["n_layers_dec"] = model.n_layers_dec;
    j["n_heads"] = model.n_heads;
    j["d_ff"] = model.d_ff;
    j["max_length"] = model.max_length;
    j["dropout"] = model.dropout_p;
    j["lambda"] = model.lambda;
    j["persona_mode"] = persona_mode_name(model.persona_mode);
    j["speaker_id_on"] = model.speaker_id_on;
    j["alignment_on"] = model.alignment_on;
    j["fame_on"] = model.fame_on;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["patience"] = patience;
    j["lr"] = lr;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["adam_eps"] = adam_eps;
    j["pair_mode"] = pair_mode;
    j["target_train_ppl"] = target_train_ppl;
    j["resume"] = resume;
    j["check_switches"] = check_switches;
    j["quiet"] = quiet;
    return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw IoError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig cfg;
    auto str = [&](const char* key, std::string& dest) {
        if (j.contains(key)) dest = j.at(key).get<std::string>();
    };
    auto num = [&](const char* key, auto& dest) {
        if (j.contains(key)) dest = j.at(key).get<std::decay_t<decltype(dest)>>();
    };
    str("corpus", cfg.corpus);
    str("hindi_words", cfg.hindi_words);
    str("english_words", cfg.english_words);
    str("hindi_verbs", cfg.hindi_verbs);
    str("data_dir", cfg.data_dir);
    str("tokenizer_dir", cfg.tokenizer_dir);
    str("out_dir", cfg.out_dir);
    str("checkpoint", cfg.checkpoint);
    str("requests", cfg.requests);
    str("generations", cfg.generations);
    num("seed", cfg.seed);
    num("vocab_size", cfg.vocab_size);
    num("d_model", cfg.model.d_model);
    num("n_layers_enc", cfg.model.n_layers_enc);
    num("n_layers_dec", cfg.model.n_layers_dec);
    num("n_heads", cfg.model.n_heads);
    num("d_ff", cfg.model.d_ff);
    num("max_length", cfg.model.max_length);
    num("dropout", cfg.model.dropout_p);
    num("lambda", cfg.model.lambda);
    if (j.contains("persona_mode"))
        cfg.model.persona_mode = persona_mode_from_name(j.at("persona_mode").get<std::string>());
    num("speaker_id_on", cfg.model.speaker_id_on);
    num("alignment_on", cfg.model.alignment_on);
    num("fame_on", cfg.model.fame_on);
    num("epochs", cfg.epochs);
    num("batch_size", cfg.batch_size);
    num("patience", cfg.patience);
    num("lr", cfg.lr);
    num("beta1", cfg.beta1);
    num("beta2", cfg.beta2);
    num("adam_eps", cfg.adam_eps);
    str("pair_mode", cfg.pair_mode);
    num("target_train_ppl", cfg.target_train_ppl);
    num("resume", cfg.resume);
    num("check_switches", cfg.check_switches);
    num("quiet", cfg.quiet);
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    return from_json(slurp(path));
}

void RunConfig::save(const std::string& path) const {
    spill(path, to_json() + "\n");
}

PrepareOutcome cmd_prepare(const RunConfig& cfg) {
    require_field(cfg.corpus, "corpus");
    require_field(cfg.hindi_words, "hindi_words");
    require_field(cfg.english_words, "english_words");
    require_field(cfg.hindi_verbs, "hindi_verbs");
    require_field(cfg.out_dir, "out_dir");

    LexiconTagger tagger = LexiconTagger::from_files(cfg.hindi_words, cfg.english_words,
                                                     cfg.hindi_verbs);
    std::vector<Utterance> prepared =
        prepare_utterances(read_corpus_jsonl(cfg.corpus), tagger);
    CorpusStats stats = corpus_stats(prepared);
    SplitDataset split = split_dataset(std::move(prepared), cfg.seed);

    fs::create_directories(cfg.out_dir);
    write_prepared_jsonl(join_path(cfg.out_dir, "train.jsonl"), split.train, false);
    write_prepared_jsonl(join_path(cfg.out_dir, "validation.jsonl"), split.validation,
                         true);

    std::vector<Utterance> all = split.train;
    all.insert(all.end(), split.validation.begin(), split.validation.end());
    UserTable::from_utterances(all).save(join_path(cfg.out_dir, "users.txt"));

    copy_into(cfg.hindi_words, join_path(cfg.out_dir, "hindi_words.txt"));
    copy_into(cfg.english_words, join_path(cfg.out_dir, "english_words.txt"));
    copy_into(cfg.hindi_verbs, join_path(cfg.out_dir, "hindi_verbs.txt"));

    ordered_json sj;
    sj["#Texts"] = stats.texts;
    sj["#Users"] = stats.users;
    sj["Mean text length"] = stats.mean_text_length;
    sj["Mean CMI"] = stats.mean_cmi;
    spill(join_path(cfg.out_dir, "stats.json"), sj.dump(2) + "\n");

    cfg.save(join_path(cfg.out_dir, "prepare_config.json"));

    PrepareOutcome outcome;
    outcome.stats = stats;
    outcome.train_count = split.train.size();
    outcome.validation_count = split.validation.size();
    return outcome;
}

size_t cmd_tokenize(const RunConfig& cfg) {
    require_field(cfg.data_dir, "data_dir");
    std::string out = cfg.out_dir.empty() ? cfg.data_dir : cfg.out_dir;

    std::vector<Utterance> train =
        read_prepared_jsonl(join_path(cfg.data_dir, "train.jsonl"));
    std::vector<std::string> texts;
    texts.reserve(train.size());
    for (const auto& u : train) texts.push_back(u.clean_text);

    BpeTokenizer tok = BpeTokenizer::train(texts, cfg.vocab_size);
    fs::create_directories(out);
    tok.save(join_path(out, "vocab.txt"), join_path(out, "merges.txt"));
    cfg.save(join_path(out, "tokenize_config.json"));
    return tok.vocab_size();
}

TrainResult cmd_train(const RunConfig& cfg) {
    require_field(cfg.data_dir, "data_dir");
    require_field(cfg.out_dir, "out_dir");

    BpeTokenizer tok = tokenizer_from(cfg);
    SplitDataset split = split_from(cfg.data_dir);
    UserTable users = UserTable::load(join_path(cfg.data_dir, "users.txt"));

    ModelConfig mc = cfg.model;
    mc.vocab_size = tok.vocab_size();
    mc.n_users = users.size();
    mc.validate();

    PairMode mode = pair_mode_from_name(cfg.pair_mode);
    ExampleSets sets = build_example_sets(split, tok, users, mode, mc.max_length);

    fs::create_directories(cfg.out_dir);
    TrainOptions opts;
    opts.epochs = cfg.epochs;
    opts.batch_size = cfg.batch_size;
    opts.patience = cfg.patience;
    opts.lr = cfg.lr;
    opts.beta1 = cfg.beta1;
    opts.beta2 = cfg.beta2;
    opts.adam_eps = cfg.adam_eps;
    opts.target_train_ppl = cfg.target_train_ppl;
    opts.best_checkpoint_path = join_path(cfg.out_dir, "checkpoint_best.bin");
    opts.last_checkpoint_path = join_path(cfg.out_dir, "checkpoint_last.bin");
    opts.log_path = join_path(cfg.out_dir, "train_log.jsonl");
    opts.verbose = !cfg.quiet;

    RngStreams streams(cfg.seed);
    TrainResult result;
    if (cfg.resume) {
        TrainerSnapshot snap;
        bool has_trainer = false;
        Model model = load_checkpoint(opts.last_checkpoint_path, &mc, &snap, &has_trainer);
        if (!has_trainer)
            throw CompatibilityError("checkpoint carries no trainer state to resume from: " +
                                     opts.last_checkpoint_path);
        if (!(model.config() == mc))
            throw CompatibilityError("checkpoint model configuration differs from the "
                                     "requested run");
        result = train_model(model, sets.train, sets.validation, opts, streams, &snap);
    } else {
        Model model(mc, streams.init);
        result = train_model(model, sets.train, sets.validation, opts, streams, nullptr);
    }
    cfg.save(join_path(cfg.out_dir, "train_config.json"));
    return result;
}

std::vector<GenerationRow> cmd_generate(const RunConfig& cfg) {
    require_field(cfg.data_dir, "data_dir");

    Model model = load_checkpoint(checkpoint_of(cfg),
                                  cfg.check_switches ? &cfg.model : nullptr);
    BpeTokenizer tok = tokenizer_from(cfg);
    UserTable users = UserTable::load(join_path(cfg.data_dir, "users.txt"));
    LexiconTagger tagger = tagger_from_data_dir(cfg.data_dir);
    std::vector<Utterance> train =
        read_prepared_jsonl(join_path(cfg.data_dir, "train.jsonl"));
    std::map<std::string, const Utterance*> latest = latest_per_user(train);

    auto history_for = [&](const std::string& user_id) -> const std::string& {
        auto it = latest.find(user_id);
        if (it == latest.end())
            throw DegenerateInputError("user has no training utterance to use as "
                                       "history: " + user_id);
        return it->second->clean_text;
    };

    struct Request {
        std::string user_id;
        long order_index = 0;
        std::string seed;
        std::string history;
        size_t max_length = 0;
    };
    std::vector<Request> requests;

    if (!cfg.requests.empty()) {
        std::ifstream in(cfg.requests);
        if (!in) throw IoError("cannot read " + cfg.requests);
        std::string line;
        long line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            json j;
            try {
                j = json::parse(line);
            } catch (const json::parse_error& e) {
                throw IoError(cfg.requests + ":" + std::to_string(line_no) +
                              ": invalid JSON: " + e.what());
            }
            if (!j.contains("user_id") || !j.contains("seed_word"))
                throw IoError(cfg.requests + ":" + std::to_string(line_no) +
                              ": request needs user_id and seed_word");
            Request r;
            r.user_id = j.at("user_id").get<std::string>();
            r.seed = j.at("seed_word").get<std::string>();
            r.order_index = j.value("order_index", line_no);
            if (j.contains("history_text"))
                r.history = j.at("history_text").get<std::string>();
            else
                r.history = history_for(r.user_id);
            r.max_length = j.value("max_length", model.config().max_length);
            requests.push_back(std::move(r));
        }
    } else {
        std::vector<Utterance> validation =
            read_prepared_jsonl(join_path(cfg.data_dir, "validation.jsonl"));
        for (const auto& u : validation) {
            Request r;
            r.user_id = u.user_id;
            r.order_index = u.order_index;
            r.seed = seed_word(u);
            r.history = history_for(u.user_id);
            r.max_length = model.config().max_length;
            requests.push_back(std::move(r));
        }
    }

    std::vector<GenerationRow> rows;
    rows.reserve(requests.size());
    for (const auto& r : requests) {
        GenerationRequest req;
        req.user_id = r.user_id;
        req.history_text = r.history;
        req.seed_word = r.seed;
        req.max_length = r.max_length;
        GenerationResult res = generate(req, model, tok, users);

        GenerationRow row;
        row.user_id = r.user_id;
        row.order_index = r.order_index;
        row.seed_word = r.seed;
        row.generated_text = res.text;
        row.generated_cmi = compute_cmi(tagger.tag(split_words(res.text)));
        rows.push_back(std::move(row));
    }

    std::string out_path = generations_of(cfg);
    if (!fs::path(out_path).parent_path().empty())
        fs::create_directories(fs::path(out_path).parent_path());
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + out_path);
    for (const auto& row : rows) {
        ordered_json j;
        j["user_id"] = row.user_id;
        j["order_index"] = row.order_index;
        j["seed_word"] = row.seed_word;
        j["generated_text"] = row.generated_text;
        j["generated_cmi"] = row.generated_cmi;
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("failed writing " + out_path);

    if (!cfg.out_dir.empty())
        cfg.save(join_path(cfg.out_dir, "generate_config.json"));
    return rows;
}

MetricReport cmd_evaluate(const RunConfig& cfg) {
    require_field(cfg.data_dir, "data_dir");
    require_field(cfg.out_dir, "out_dir");

    Model model = load_checkpoint(checkpoint_of(cfg),
                                  cfg.check_switches ? &cfg.model : nullptr);
    BpeTokenizer tok = tokenizer_from(cfg);
    UserTable users = UserTable::load(join_path(cfg.data_dir, "users.txt"));
    LexiconTagger tagger = tagger_from_data_dir(cfg.data_dir);
    SplitDataset split = split_from(cfg.data_dir);

    PairMode mode = pair_mode_from_name(cfg.pair_mode);
    ExampleSets sets = build_example_sets(split, tok, users, mode,
                                          model.config().max_length);

    MetricReport report;
    report.perplexity = perplexity(model, sets.validation);

    struct GenLine {
        std::string text;
    };
    std::map<std::pair<std::string, long>, GenLine> generated;
    {
        std::string path = generations_of(cfg);
        std::ifstream in(path);
        if (!in) throw IoError("cannot read " + path);
        std::string line;
        long line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            json j;
            try {
                j = json::parse(line);
            } catch (const json::parse_error& e) {
                throw IoError(path + ":" + std::to_string(line_no) +
                              ": invalid JSON: " + e.what());
            }
            if (!j.contains("user_id") || !j.contains("generated_text") ||
                !j.contains("order_index"))
                throw IoError(path + ":" + std::to_string(line_no) +
                              ": generation needs user_id, order_index, generated_text");
            std::pair<std::string, long> key{j.at("user_id").get<std::string>(),
                                             j.at("order_index").get<long>()};
            generated[key] = GenLine{j.at("generated_text").get<std::string>()};
        }
    }

    std::vector<std::string> missing;
    for (const auto& u : split.validation) {
        if (!generated.count({u.user_id, u.order_index}))
            missing.push_back(u.user_id + "/" + std::to_string(u.order_index));
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) {
            if (!list.empty()) list += ", ";
            list += m;
        }
        throw AlignmentError("generations missing for validation utterances: " + list);
    }

    double bleu_sum = 0.0, rouge1_sum = 0.0, rougeL_sum = 0.0;
    std::vector<double> gen_cmis, ref_cmis;
    for (const auto& u : split.validation) {
        const GenLine& g = generated.at({u.user_id, u.order_index});
        LangTagSeq cand = tagger.tag(split_words(g.text));
        const LangTagSeq& ref = u.tags;
        // an empty generation scores zero rather than aborting the report
        if (!cand.empty()) {
            bleu_sum += cm_bleu(cand, ref);
            rouge1_sum += cm_rouge1(cand, ref);
            rougeL_sum += cm_rougeL(cand, ref);
        }
        double gc = compute_cmi(cand);
        double rc = compute_cmi(ref);
        gen_cmis.push_back(gc);
        ref_cmis.push_back(rc);
        report.generated_cmi[u.user_id].push_back(gc);
        report.reference_cmi[u.user_id].push_back(rc);
    }
    report.pairs = split.validation.size();
    if (report.pairs == 0)
        throw DegenerateInputError("validation split is empty");
    report.bleu = bleu_sum / static_cast<double>(report.pairs);
    report.rouge1 = rouge1_sum / static_cast<double>(report.pairs);
    report.rougeL = rougeL_sum / static_cast<double>(report.pairs);
    report.ks = cm_ks(gen_cmis, ref_cmis);

    fs::create_directories(cfg.out_dir);
    spill(join_path(cfg.out_dir, "report.json"), report.to_json() + "\n");
    spill(join_path(cfg.out_dir, "report.csv"), report.to_csv());
    cfg.save(join_path(cfg.out_dir, "evaluate_config.json"));
    return report;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& cfg) {
    require_field(cfg.data_dir, "data_dir");
    require_field(cfg.out_dir, "out_dir");

    struct Variant {
        const char* label;
        const char* dir;
        void (*apply)(ModelConfig&);
    };
    const Variant variants[] = {
        {"full", "full", [](ModelConfig&) {}},
        {"(-) Contextual Persona", "no_persona",
         [](ModelConfig& m) { m.persona_mode = PersonaMode::off; }},
        {"(-) Speaker ID", "no_speaker_id",
         [](ModelConfig& m) { m.speaker_id_on = false; }},
        {"(-) Alignment", "no_alignment",
         [](ModelConfig& m) { m.alignment_on = false; }},
        {"(-) FAME", "no_fame", [](ModelConfig& m) { m.fame_on = false; }},
    };

    std::vector<AblationRow> rows;
    for (const Variant& v : variants) {
        RunConfig sub = cfg;
        sub.out_dir = join_path(cfg.out_dir, v.dir);
        sub.checkpoint.clear();
        sub.requests.clear();
        sub.generations.clear();
        sub.resume = false;
        sub.check_switches = true;
        v.apply(sub.model);

        cmd_train(sub);
        cmd_generate(sub);
        MetricReport report = cmd_evaluate(sub);
        rows.push_back(AblationRow{v.label, std::move(report)});
    }

    ordered_json out = ordered_json::array();
    for (const auto& row : rows) {
        ordered_json j = ordered_json::parse(row.report.to_json());
        ordered_json entry;
        entry["variant"] = row.variant;
        for (auto& [k, val] : j.items()) entry[k] = val;
        out.push_back(entry);
    }
    fs::create_directories(cfg.out_dir);
    spill(join_path(cfg.out_dir, "ablation.json"), out.dump(2) + "\n");

    std::ostringstream csv;
    csv << "Variant,Perplexity,CM BLEU,CM Rouge-1,CM Rouge-L,CM KS\n";
    for (const auto& row : rows) {
        const MetricReport& r = row.report;
        csv << row.variant << ',' << r.perplexity << ',' << r.bleu * 100.0 << ','
            << r.rouge1 * 100.0 << ',' << r.rougeL * 100.0 << ',' << r.ks << '\n';
    }
    spill(join_path(cfg.out_dir, "ablation.csv"), csv.str());
    cfg.save(join_path(cfg.out_dir, "ablate_config.json"));
    return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(26) << "Variant" << std::right << std::setw(12)
       << "Perplexity" << std::setw(10) << "CM BLEU" << std::setw(12) << "CM Rouge-1"
       << std::setw(12) << "CM Rouge-L" << std::setw(8) << "CM KS" << '\n';
    os << std::fixed << std::setprecision(2);
    for (const auto& row : rows) {
        const MetricReport& r = row.report;
        os << std::left << std::setw(26) << row.variant << std::right << std::setw(12)
           << r.perplexity << std::setw(10) << r.bleu * 100.0 << std::setw(12)
           << r.rouge1 * 100.0 << std::setw(12) << r.rougeL * 100.0 << std::setw(8)
           << r.ks << '\n';
    }
    return os.str();
}

} // namespace cmgen
