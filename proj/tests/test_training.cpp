#include <doctest.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "cmgen/checkpoint.hpp"
#include "cmgen/errors.hpp"
#include "cmgen/model.hpp"
#include "cmgen/rng.hpp"
#include "cmgen/tokenizer.hpp"
#include "cmgen/training.hpp"

#include "helpers.hpp"

using namespace cmgen;

namespace {

BpeTokenizer toy_tokenizer() {
    return BpeTokenizer::train({"wah kya baat", "kya baat hai",
                                "wah kya scene hai", "baat to sahi hai"},
                               48);
}

Utterance utt(const std::string& user, long order, const std::string& text) {
    Utterance u;
    u.user_id = user;
    u.order_index = order;
    u.clean_text = text;
    return u;
}

SplitDataset toy_split() {
    SplitDataset s;
    s.train = {utt("alice", 0, "wah kya baat"), utt("alice", 1, "kya baat hai"),
               utt("bob", 0, "baat to sahi hai"), utt("bob", 1, "wah kya scene hai")};
    s.validation = {utt("alice", 2, "wah kya scene hai"),
                    utt("bob", 2, "kya baat hai")};
    return s;
}

UserTable toy_users() {
    Utterance a, b;
    a.user_id = "alice";
    b.user_id = "bob";
    return UserTable::from_utterances({a, b});
}

ModelConfig toy_config(size_t vocab) {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers_enc = 1;
    cfg.n_layers_dec = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.vocab_size = vocab;
    cfg.n_users = 2;
    cfg.max_length = 16;
    cfg.dropout_p = 0.1;
    cfg.lambda = 0.5;
    return cfg;
}

} // namespace

TEST_CASE("pair modes parse from both written forms") {
    CHECK(pair_mode_from_name("reconstruction") == PairMode::reconstruction);
    CHECK(pair_mode_from_name("next-utterance") == PairMode::next_utterance);
    CHECK(pair_mode_from_name("next_utterance") == PairMode::next_utterance);
    CHECK(pair_mode_name(PairMode::next_utterance) == "next-utterance");
    CHECK(pair_mode_name(PairMode::reconstruction) == "reconstruction");
    CHECK_THROWS_AS(pair_mode_from_name("markov"), ContractError);
}

TEST_CASE("examples shift targets by one against the decoder input") {
    std::vector<int> enc{7, 8, 9};
    std::vector<int> tgt{10, 11};
    TrainingExample ex = make_example(enc, tgt, 1, 16);
    CHECK(ex.user_index == 1);
    CHECK(ex.encoder_ids == enc);
    CHECK(ex.decoder_input == std::vector<int>{kClsId, 10, 11});
    CHECK(ex.targets == std::vector<int>{10, 11, kSepId});
    CHECK(ex.decoder_input.size() == ex.targets.size());

    SUBCASE("long sequences are truncated to the length budget") {
        std::vector<int> longer{5, 6, 7, 8, 9, 10, 11, 12};
        TrainingExample t = make_example(longer, longer, 0, 6);
        CHECK(t.encoder_ids.size() == 6);
        CHECK(t.decoder_input.size() == 6);  // [CLS] + first five
        CHECK(t.targets.size() == 6);        // first five + [SEP]
        CHECK(t.decoder_input == std::vector<int>{kClsId, 5, 6, 7, 8, 9});
        CHECK(t.targets == std::vector<int>{5, 6, 7, 8, 9, kSepId});
    }

    CHECK_THROWS_AS(make_example({}, tgt, 0, 16), DegenerateInputError);
    CHECK_THROWS_AS(make_example(enc, {}, 0, 16), DegenerateInputError);
    CHECK_THROWS_AS(make_example(enc, tgt, 0, 1), ContractError);
}

TEST_CASE("reconstruction pairs every utterance with itself") {
    BpeTokenizer tok = toy_tokenizer();
    UserTable users = toy_users();
    SplitDataset split = toy_split();
    ExampleSets sets =
        build_example_sets(split, tok, users, PairMode::reconstruction, 16);

    CHECK(sets.train.size() == 4);
    CHECK(sets.validation.size() == 2);
    for (size_t i = 0; i < sets.train.size(); ++i) {
        const TrainingExample& ex = sets.train[i];
        std::vector<int> ids = tok.encode(split.train[i].clean_text);
        CHECK(ex.encoder_ids == ids);
        std::vector<int> want_dec{kClsId};
        want_dec.insert(want_dec.end(), ids.begin(), ids.end());
        CHECK(ex.decoder_input == want_dec);
        CHECK(ex.user_index == users.index_or_unknown(split.train[i].user_id));
    }
}

TEST_CASE("next-utterance pairs follow each user's timeline") {
    BpeTokenizer tok = toy_tokenizer();
    UserTable users = toy_users();
    SplitDataset split = toy_split();
    ExampleSets sets =
        build_example_sets(split, tok, users, PairMode::next_utterance, 16);

    // per user: (t0 -> t1) trains, (t1 -> t2) validates
    REQUIRE(sets.train.size() == 2);
    REQUIRE(sets.validation.size() == 2);

    const TrainingExample& alice = sets.train[0];
    CHECK(alice.user_index == *users.index_of("alice"));
    CHECK(alice.encoder_ids == tok.encode("wah kya baat"));
    std::vector<int> target = tok.encode("kya baat hai");
    std::vector<int> want_dec{kClsId};
    want_dec.insert(want_dec.end(), target.begin(), target.end());
    CHECK(alice.decoder_input == want_dec);

    const TrainingExample& alice_val = sets.validation[0];
    CHECK(alice_val.encoder_ids == tok.encode("kya baat hai"));

    SUBCASE("a user with a single utterance contributes no pair") {
        SplitDataset lone = split;
        lone.train.push_back(utt("carol", 0, "wah"));
        Utterance c;
        c.user_id = "carol";
        UserTable three = UserTable::from_utterances(
            {utt("alice", 0, ""), utt("bob", 0, ""), c});
        ExampleSets again =
            build_example_sets(lone, tok, three, PairMode::next_utterance, 16);
        CHECK(again.train.size() == 2);
        CHECK(again.validation.size() == 2);
    }

    SUBCASE("an empty training side is rejected") {
        SplitDataset none;
        none.validation = split.validation;
        CHECK_THROWS_AS(
            build_example_sets(none, tok, users, PairMode::reconstruction, 16),
            DegenerateInputError);
    }
}

TEST_CASE("a uniform-output model scores vocabulary-sized perplexity") {
    BpeTokenizer tok = toy_tokenizer();
    UserTable users = toy_users();
    ModelConfig cfg = toy_config(tok.vocab_size());
    Rng rng(3);
    Model model(cfg, rng);
    for (Tensor t : model.parameter_tensors())
        for (auto& v : t.mutable_values()) v = 0.0;

    ExampleSets sets =
        build_example_sets(toy_split(), tok, users, PairMode::reconstruction, 16);
    double ppl = perplexity(model, sets.validation);
    CHECK(ppl == doctest::Approx(static_cast<double>(cfg.vocab_size)).epsilon(1e-9));

    CHECK_THROWS_AS(validation_loss(model, {}), DegenerateInputError);
}

TEST_CASE("training drives the loss down and logs every epoch") {
    BpeTokenizer tok = toy_tokenizer();
    UserTable users = toy_users();
    ModelConfig cfg = toy_config(tok.vocab_size());
    Rng init(12);
    Model model(cfg, init);
    RngStreams streams(12);

    ExampleSets sets =
        build_example_sets(toy_split(), tok, users, PairMode::reconstruction, 16);

    std::string dir = testutil::scratch_dir("train");
    TrainOptions opts;
    opts.epochs = 12;
    opts.batch_size = 2;
    opts.patience = 12;
    opts.lr = 3e-3;
    opts.best_checkpoint_path = dir + "/best.bin";
    opts.last_checkpoint_path = dir + "/last.bin";
    opts.log_path = dir + "/log.jsonl";

    TrainResult result = train_model(model, sets.train, sets.validation, opts, streams);
    REQUIRE(result.history.size() == 12);
    CHECK(result.history.front().train_loss > result.history.back().train_loss);
    CHECK(result.best_val > 0.0);
    CHECK(result.best_epoch >= 1);

    for (const EpochStats& e : result.history) {
        CHECK(std::isfinite(e.train_loss));
        CHECK(e.val_ppl == doctest::Approx(std::exp(e.val_loss)).epsilon(1e-12));
        CHECK(e.train_l1 <= e.train_loss + 1e-12);
    }

    SUBCASE("the log file carries one json line per epoch") {
        std::ifstream in(opts.log_path);
        std::string line;
        size_t lines = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line);
            CHECK(j.contains("epoch"));
            CHECK(j.contains("train_loss"));
            CHECK(j.contains("train_l1"));
            CHECK(j.contains("train_l2"));
            CHECK(j.contains("train_perplexity"));
            CHECK(j.contains("val_loss"));
            CHECK(j.contains("val_perplexity"));
            ++lines;
        }
        CHECK(lines == 12);
    }

    SUBCASE("the best checkpoint reproduces the best validation loss") {
        Model best = load_checkpoint(opts.best_checkpoint_path);
        double loss = validation_loss(best, sets.validation);
        CHECK(loss == result.best_val);
    }
}

TEST_CASE("training with no KL channel logs a zero persona term") {
    BpeTokenizer tok = toy_tokenizer();
    UserTable users = toy_users();
    ExampleSets sets =
        build_example_sets(toy_split(), tok, users, PairMode::reconstruction, 16);

    auto run = [&](ModelConfig cfg) {
        Rng init(5);
        Model model(cfg, init);
        RngStreams streams(5);
        TrainOptions opts;
        opts.epochs = 3;
        opts.batch_size = 2;
        return train_model(model, sets.train, sets.validation, opts, streams);
    };

    ModelConfig zero_lambda = toy_config(tok.vocab_size());
    zero_lambda.lambda = 0.0;
    for (const EpochStats& e : run(zero_lambda).history) CHECK(e.train_l2 == 0.0);

    ModelConfig linear = toy_config(tok.vocab_size());
    linear.persona_mode = PersonaMode::linear;
    for (const EpochStats& e : run(linear).history) {
        CHECK(e.train_l2 == 0.0);
        CHECK(e.train_l1 == e.train_loss);
    }
}

TEST_CASE("interrupted training resumes bit-identically") {
    BpeTokenizer tok = toy_tokenizer();
    UserTable users = toy_users();
    ModelConfig cfg = toy_config(tok.vocab_size());
    ExampleSets sets =
        build_example_sets(toy_split(), tok, users, PairMode::reconstruction, 16);
    std::string dir = testutil::scratch_dir("resume");

    auto options = [&](const std::string& tag, size_t epochs) {
        TrainOptions o;
        o.epochs = epochs;
        o.batch_size = 2;
        o.patience = 100;
        o.best_checkpoint_path = dir + "/" + tag + "_best.bin";
        o.last_checkpoint_path = dir + "/" + tag + "_last.bin";
        o.log_path = dir + "/" + tag + "_log.jsonl";
        return o;
    };

    // one six-epoch run
    Rng init_a(31);
    Model straight(cfg, init_a);
    RngStreams streams_a(31);
    TrainResult full =
        train_model(straight, sets.train, sets.validation, options("full", 6), streams_a);

    // three epochs, stop, reload, three more
    Rng init_b(31);
    Model half(cfg, init_b);
    RngStreams streams_b(31);
    train_model(half, sets.train, sets.validation, options("half", 3), streams_b);

    TrainerSnapshot snap;
    bool has_trainer = false;
    Model resumed =
        load_checkpoint(dir + "/half_last.bin", nullptr, &snap, &has_trainer);
    REQUIRE(has_trainer);
    CHECK(snap.next_epoch == 3);  // epochs count from zero
    RngStreams streams_c(31);  // overwritten by the snapshot inside train_model
    TrainResult rest = train_model(resumed, sets.train, sets.validation,
                                   options("rest", 6), streams_c, &snap);

    REQUIRE(rest.history.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(rest.history[i].epoch == full.history[i + 3].epoch);
        CHECK(rest.history[i].train_loss == full.history[i + 3].train_loss);
        CHECK(rest.history[i].val_loss == full.history[i + 3].val_loss);
    }

    // identical bytes on disk, trainer state included
    CHECK(testutil::read_file(dir + "/rest_last.bin") ==
          testutil::read_file(dir + "/full_last.bin"));
}

TEST_CASE("non-finite losses abort with the offending parameter named") {
    BpeTokenizer tok = toy_tokenizer();
    UserTable users = toy_users();
    ModelConfig cfg = toy_config(tok.vocab_size());
    Rng init(8);
    Model model(cfg, init);
    // the output bias feeds every logit row, so this poisons the first loss
    model.parameter("out.b").mutable_values()[5] =
        std::numeric_limits<double>::quiet_NaN();

    ExampleSets sets =
        build_example_sets(toy_split(), tok, users, PairMode::reconstruction, 16);
    RngStreams streams(8);
    TrainOptions opts;
    opts.epochs = 2;
    opts.batch_size = 2;

    try {
        train_model(model, sets.train, sets.validation, opts, streams);
        FAIL("expected a NumericError");
    } catch (const NumericError& e) {
        std::string msg = e.what();
        CHECK(msg.find("non-finite") != std::string::npos);
        CHECK(msg.find("out.b") != std::string::npos);
        CHECK(msg.find("epoch 0") != std::string::npos);
    }
}

TEST_CASE("the perplexity target stops training early") {
    BpeTokenizer tok = toy_tokenizer();
    UserTable users = toy_users();
    ModelConfig cfg = toy_config(tok.vocab_size());
    cfg.dropout_p = 0.0;
    Rng init(44);
    Model model(cfg, init);
    RngStreams streams(44);
    ExampleSets sets =
        build_example_sets(toy_split(), tok, users, PairMode::reconstruction, 16);

    TrainOptions opts;
    opts.epochs = 400;
    opts.batch_size = 2;
    opts.patience = 400;
    opts.lr = 3e-3;
    opts.target_train_ppl = 3.0;

    TrainResult result = train_model(model, sets.train, sets.validation, opts, streams);
    CHECK(result.reached_target_ppl);
    CHECK(result.history.size() < 400);
    CHECK(result.history.back().train_ppl < 3.0);
}
