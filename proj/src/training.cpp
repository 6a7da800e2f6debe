#include "cmgen/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>

#include <json.hpp>

#include "cmgen/adam.hpp"
#include "cmgen/errors.hpp"

namespace cmgen {

namespace {

const std::string kReconstruction = "reconstruction";
const std::string kNextUtterance = "next-utterance";

std::string first_non_finite_parameter(const Model& model) {
    for (const auto& [name, t] : model.parameters()) {
        for (double v : t.values()) {
            if (!std::isfinite(v)) return name;
        }
    }
    return {};
}

} // namespace

const std::string& pair_mode_name(PairMode m) {
    return m == PairMode::reconstruction ? kReconstruction : kNextUtterance;
}

PairMode pair_mode_from_name(const std::string& name) {
    if (name == kReconstruction) return PairMode::reconstruction;
    if (name == kNextUtterance || name == "next_utterance")
        return PairMode::next_utterance;
    throw ContractError("unknown pair mode: " + name);
}

TrainingExample make_example(const std::vector<int>& encoder_tokens,
                             const std::vector<int>& target_tokens,
                             size_t user_index, size_t max_length) {
    if (encoder_tokens.empty() || target_tokens.empty())
        throw DegenerateInputError("training example needs non-empty token sequences");
    if (max_length < 2)
        throw ContractError("max_length must be at least 2");

    TrainingExample ex;
    ex.user_index = user_index;
    size_t enc_n = std::min(encoder_tokens.size(), max_length);
    ex.encoder_ids.assign(encoder_tokens.begin(), encoder_tokens.begin() + enc_n);
    size_t tgt_n = std::min(target_tokens.size(), max_length - 1);
    ex.decoder_input.reserve(tgt_n + 1);
    ex.decoder_input.push_back(kClsId);
    ex.decoder_input.insert(ex.decoder_input.end(), target_tokens.begin(),
                            target_tokens.begin() + tgt_n);
    ex.targets.assign(target_tokens.begin(), target_tokens.begin() + tgt_n);
    ex.targets.push_back(kSepId);
    return ex;
}

ExampleSets build_example_sets(const SplitDataset& split, const BpeTokenizer& tokenizer,
                               const UserTable& users, PairMode mode,
                               size_t max_length) {
    ExampleSets out;
    if (mode == PairMode::reconstruction) {
        auto fill = [&](const std::vector<Utterance>& part,
                        std::vector<TrainingExample>& dest) {
            for (const auto& u : part) {
                std::vector<int> ids = tokenizer.encode(u.clean_text);
                if (ids.empty()) continue;
                dest.push_back(make_example(ids, ids, users.index_or_unknown(u.user_id),
                                            max_length));
            }
        };
        fill(split.train, out.train);
        fill(split.validation, out.validation);
    } else {
        struct Entry {
            const Utterance* u;
            bool in_validation;
        };
        std::map<std::string, std::vector<Entry>> timelines;
        for (const auto& u : split.train) timelines[u.user_id].push_back({&u, false});
        for (const auto& u : split.validation) timelines[u.user_id].push_back({&u, true});
        for (auto& [uid, entries] : timelines) {
            std::stable_sort(entries.begin(), entries.end(),
                             [](const Entry& a, const Entry& b) {
                                 return a.u->order_index < b.u->order_index;
                             });
            for (size_t i = 1; i < entries.size(); ++i) {
                std::vector<int> history = tokenizer.encode(entries[i - 1].u->clean_text);
                std::vector<int> target = tokenizer.encode(entries[i].u->clean_text);
                if (history.empty() || target.empty()) continue;
                auto ex = make_example(history, target, users.index_or_unknown(uid),
                                       max_length);
                (entries[i].in_validation ? out.validation : out.train).push_back(ex);
            }
        }
    }
    if (out.train.empty())
        throw DegenerateInputError("no usable training examples");
    return out;
}

TrainResult train_model(Model& model, const std::vector<TrainingExample>& train,
                        const std::vector<TrainingExample>& validation,
                        const TrainOptions& opts, RngStreams& streams,
                        const TrainerSnapshot* resume) {
    if (train.empty())
        throw DegenerateInputError("training set is empty");
    if (validation.empty())
        throw DegenerateInputError("validation set is empty");
    if (opts.batch_size == 0)
        throw ContractError("batch_size must be positive");

    const ModelConfig& cfg = model.config();
    const bool kl_active =
        cfg.persona_mode == PersonaMode::randomized && cfg.lambda != 0.0;

    AdamState adam;
    adam.lr = opts.lr;
    adam.beta1 = opts.beta1;
    adam.beta2 = opts.beta2;
    adam.eps = opts.adam_eps;
    size_t start_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    bool has_best = false;
    size_t since_best = 0;
    size_t best_epoch = 0;
    if (resume != nullptr) {
        adam = resume->adam;
        streams.dropout.set_state(resume->dropout_state);
        streams.noise.set_state(resume->noise_state);
        streams.order.set_state(resume->order_state);
        start_epoch = static_cast<size_t>(resume->next_epoch);
        has_best = resume->has_best;
        if (has_best) best_val = resume->best_val;
        since_best = static_cast<size_t>(resume->epochs_since_best);
    }

    std::vector<Tensor> params = model.parameter_tensors();

    std::ofstream log;
    if (!opts.log_path.empty()) {
        log.open(opts.log_path, std::ios::app);
        if (!log) throw IoError("cannot open training log: " + opts.log_path);
    }

    TrainResult result;

    for (size_t epoch = start_epoch; epoch < opts.epochs; ++epoch) {
        std::vector<size_t> order(train.size());
        std::iota(order.begin(), order.end(), size_t{0});
        streams.order.shuffle(order);

        double epoch_loss = 0.0, epoch_l1 = 0.0, epoch_l2 = 0.0;
        double epoch_ce = 0.0;
        size_t epoch_tokens = 0, batches = 0;

        for (size_t b0 = 0; b0 < order.size(); b0 += opts.batch_size) {
            size_t b1 = std::min(b0 + opts.batch_size, order.size());

            ForwardOptions fwd;
            fwd.training = true;
            fwd.dropout_rng = &streams.dropout;
            fwd.noise_rng = &streams.noise;

            std::set<size_t> batch_users;
            for (size_t i = b0; i < b1; ++i) batch_users.insert(train[order[i]].user_index);
            std::map<size_t, PersonaState> personas;
            for (size_t u : batch_users) personas.emplace(u, model.persona_sample(u, fwd));

            std::optional<Tensor> alignment;
            if (cfg.alignment_on) alignment = model.alignment_matrix();
            const Tensor* alignment_ptr = alignment ? &*alignment : nullptr;

            std::optional<Tensor> ce_acc;
            size_t token_count = 0;
            for (size_t i = b0; i < b1; ++i) {
                const TrainingExample& ex = train[order[i]];
                const PersonaState& persona = personas.at(ex.user_index);
                EncoderOutput enc = model.encode(ex.encoder_ids, ex.user_index, fwd, &persona);
                DecoderLogits logits = model.decode_forward(ex.decoder_input, enc, fwd,
                                                            alignment_ptr);
                size_t count = 0;
                Tensor ce = cross_entropy_sum(logits.aligned, ex.targets, kPadId, &count);
                token_count += count;
                ce_acc = ce_acc ? add(*ce_acc, ce) : ce;
            }
            if (!ce_acc || token_count == 0)
                throw DegenerateInputError("batch produced no target tokens");

            Tensor l1 = scale(*ce_acc, 1.0 / static_cast<double>(token_count));
            Tensor l2 = Tensor::scalar(0.0);
            Tensor total = l1;
            if (kl_active) {
                std::optional<Tensor> kl_acc;
                for (const auto& [u, persona] : personas) {
                    Tensor k = model.kl_term(persona);
                    kl_acc = kl_acc ? add(*kl_acc, k) : k;
                }
                l2 = scale(*kl_acc, 1.0 / static_cast<double>(personas.size()));
                total = add(l1, scale(l2, cfg.lambda));
            }

            double total_value = total.item();
            if (!std::isfinite(total_value)) {
                std::string culprit = first_non_finite_parameter(model);
                std::string detail = culprit.empty()
                    ? "all parameters still finite"
                    : "first non-finite parameter: " + culprit;
                throw NumericError("training loss became non-finite at epoch " +
                                   std::to_string(epoch) + "; " + detail);
            }

            epoch_loss += total_value;
            epoch_l1 += l1.item();
            epoch_l2 += l2.item();
            epoch_ce += ce_acc->item();
            epoch_tokens += token_count;
            ++batches;

            backward(total);
            adam_step(params, adam);
            model.zero_grad();
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = epoch_loss / static_cast<double>(batches);
        stats.train_l1 = epoch_l1 / static_cast<double>(batches);
        stats.train_l2 = epoch_l2 / static_cast<double>(batches);
        stats.train_ppl = std::exp(epoch_ce / static_cast<double>(epoch_tokens));
        stats.val_loss = validation_loss(model, validation);
        stats.val_ppl = std::exp(stats.val_loss);
        result.history.push_back(stats);

        if (log) {
            nlohmann::ordered_json line;
            line["epoch"] = stats.epoch;
            line["train_loss"] = stats.train_loss;
            line["train_l1"] = stats.train_l1;
            line["train_l2"] = stats.train_l2;
            line["train_perplexity"] = stats.train_ppl;
            line["val_loss"] = stats.val_loss;
            line["val_perplexity"] = stats.val_ppl;
            log << line.dump() << '\n';
            log.flush();
        }
        if (opts.verbose) {
            std::cout << "epoch " << stats.epoch << " train_loss " << stats.train_loss
                      << " val_loss " << stats.val_loss << " val_ppl " << stats.val_ppl
                      << '\n';
        }

        bool improved = !has_best || stats.val_loss < best_val;
        if (improved) {
            best_val = stats.val_loss;
            has_best = true;
            since_best = 0;
            best_epoch = epoch;
            if (!opts.best_checkpoint_path.empty())
                save_checkpoint(opts.best_checkpoint_path, model, nullptr);
        } else {
            ++since_best;
        }

        if (!opts.last_checkpoint_path.empty()) {
            TrainerSnapshot snap;
            snap.adam = adam;
            snap.dropout_state = streams.dropout.state();
            snap.noise_state = streams.noise.state();
            snap.order_state = streams.order.state();
            snap.next_epoch = epoch + 1;
            snap.best_val = has_best ? best_val : 0.0;
            snap.has_best = has_best;
            snap.epochs_since_best = since_best;
            save_checkpoint(opts.last_checkpoint_path, model, &snap);
        }

        if (opts.target_train_ppl > 0.0 && stats.train_ppl < opts.target_train_ppl) {
            result.reached_target_ppl = true;
            break;
        }
        if (!improved && since_best >= opts.patience) {
            result.early_stopped = true;
            break;
        }
    }

    result.best_val = has_best ? best_val : 0.0;
    result.best_epoch = best_epoch;
    return result;
}

double validation_loss(const Model& model, const std::vector<TrainingExample>& examples) {
    if (examples.empty())
        throw DegenerateInputError("validation loss needs at least one example");
    NoGradGuard no_grad;
    ForwardOptions fwd;  // evaluation mode

    std::optional<Tensor> alignment;
    if (model.config().alignment_on) alignment = model.alignment_matrix();
    const Tensor* alignment_ptr = alignment ? &*alignment : nullptr;

    std::map<size_t, PersonaState> personas;
    double ce_sum = 0.0;
    size_t tokens = 0;
    for (const auto& ex : examples) {
        auto it = personas.find(ex.user_index);
        if (it == personas.end())
            it = personas.emplace(ex.user_index, model.persona_sample(ex.user_index, fwd)).first;
        EncoderOutput enc = model.encode(ex.encoder_ids, ex.user_index, fwd, &it->second);
        DecoderLogits logits = model.decode_forward(ex.decoder_input, enc, fwd, alignment_ptr);
        size_t count = 0;
        Tensor ce = cross_entropy_sum(logits.aligned, ex.targets, kPadId, &count);
        ce_sum += ce.item();
        tokens += count;
    }
    if (tokens == 0)
        throw DegenerateInputError("validation examples carry no target tokens");
    return ce_sum / static_cast<double>(tokens);
}

double perplexity(const Model& model, const std::vector<TrainingExample>& examples) {
    return std::exp(validation_loss(model, examples));
}

} // namespace cmgen
