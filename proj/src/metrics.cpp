#include "cmgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include <json.hpp>

#include "cmgen/errors.hpp"

namespace cmgen {

using json = nlohmann::ordered_json;

double compute_cmi(const LangTagSeq& tags) {
    size_t hi = 0, en = 0;
    for (LangTag t : tags) {
        if (t == LangTag::Hi) ++hi;
        else if (t == LangTag::En) ++en;
    }
    size_t total = hi + en;
    if (total == 0) return 0.0;
    // minority / total == 1 - majority/total, but exact for e.g. 1/5.
    return static_cast<double>(std::min(hi, en)) / static_cast<double>(total);
}

namespace {

using Gram = std::vector<LangTag>;

std::map<Gram, size_t> ngram_counts(const LangTagSeq& seq, size_t n) {
    std::map<Gram, size_t> counts;
    if (seq.size() < n) return counts;
    for (size_t i = 0; i + n <= seq.size(); ++i)
        ++counts[Gram(seq.begin() + i, seq.begin() + i + n)];
    return counts;
}

size_t clipped_overlap(const std::map<Gram, size_t>& cand,
                       const std::map<Gram, size_t>& ref) {
    size_t overlap = 0;
    for (const auto& [gram, count] : cand) {
        auto it = ref.find(gram);
        if (it != ref.end()) overlap += std::min(count, it->second);
    }
    return overlap;
}

void check_pair(const LangTagSeq& candidate, const LangTagSeq& reference,
                const char* op) {
    if (candidate.empty())
        throw DegenerateInputError(std::string(op) + ": empty candidate");
    if (reference.empty())
        throw DegenerateInputError(std::string(op) + ": empty reference");
}

double f1(double precision, double recall) {
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

} // namespace

double cm_bleu(const LangTagSeq& candidate, const LangTagSeq& reference) {
    check_pair(candidate, reference, "cm_bleu");
    double log_sum = 0.0;
    for (size_t n = 1; n <= 2; ++n) {
        auto cand = ngram_counts(candidate, n);
        auto ref = ngram_counts(reference, n);
        size_t total = 0;
        for (const auto& [gram, count] : cand) total += count;
        if (total == 0) {
            // neither side can form these n-grams: vacuously matched order
            if (ref.empty()) continue;
            return 0.0;
        }
        size_t overlap = clipped_overlap(cand, ref);
        if (overlap == 0) return 0.0;  // unsmoothed: any zero precision zeroes BLEU
        log_sum += 0.5 * std::log(static_cast<double>(overlap) /
                                  static_cast<double>(total));
    }
    double c = static_cast<double>(candidate.size());
    double r = static_cast<double>(reference.size());
    double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
    return bp * std::exp(log_sum);
}

double cm_rouge1(const LangTagSeq& candidate, const LangTagSeq& reference) {
    check_pair(candidate, reference, "cm_rouge1");
    auto cand = ngram_counts(candidate, 1);
    auto ref = ngram_counts(reference, 1);
    double overlap = static_cast<double>(clipped_overlap(cand, ref));
    double p = overlap / static_cast<double>(candidate.size());
    double r = overlap / static_cast<double>(reference.size());
    return f1(p, r);
}

double cm_rougeL(const LangTagSeq& candidate, const LangTagSeq& reference) {
    check_pair(candidate, reference, "cm_rougeL");
    size_t m = candidate.size(), n = reference.size();
    std::vector<size_t> prev(n + 1, 0), cur(n + 1, 0);
    for (size_t i = 1; i <= m; ++i) {
        for (size_t j = 1; j <= n; ++j) {
            if (candidate[i - 1] == reference[j - 1]) cur[j] = prev[j - 1] + 1;
            else cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    double lcs = static_cast<double>(prev[n]);
    double p = lcs / static_cast<double>(m);
    double r = lcs / static_cast<double>(n);
    return f1(p, r);
}

double cm_ks(const std::vector<double>& generated,
             const std::vector<double>& reference) {
    if (generated.empty() || reference.empty())
        throw DegenerateInputError("cm_ks: empty sample");
    std::vector<double> a = generated, b = reference;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    // Sup-norm of the empirical CDF difference, evaluated by sweeping the
    // pooled samples.
    double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    size_t ia = 0, ib = 0;
    double stat = 0.0;
    while (ia < a.size() && ib < b.size()) {
        double x = std::min(a[ia], b[ib]);
        while (ia < a.size() && a[ia] <= x) ++ia;
        while (ib < b.size() && b[ib] <= x) ++ib;
        stat = std::max(stat, std::abs(static_cast<double>(ia) / na -
                                       static_cast<double>(ib) / nb));
    }
    return stat;
}

std::string MetricReport::to_json() const {
    json j;
    json table;
    table["Perplexity"] = perplexity;
    table["CM BLEU"] = bleu * 100.0;
    table["CM Rouge-1"] = rouge1 * 100.0;
    table["CM Rouge-L"] = rougeL * 100.0;
    table["CM KS"] = ks;
    j["table"] = table;
    j["pairs"] = pairs;
    json per_user;
    for (const auto& [user, values] : generated_cmi) {
        json u;
        u["generated"] = values;
        auto it = reference_cmi.find(user);
        u["reference"] = it == reference_cmi.end() ? std::vector<double>{} : it->second;
        per_user[user] = u;
    }
    j["per_user_cmi"] = per_user;
    return j.dump(2);
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os << "Perplexity,CM BLEU,CM Rouge-1,CM Rouge-L,CM KS\n";
    os << perplexity << ',' << bleu * 100.0 << ',' << rouge1 * 100.0 << ','
       << rougeL * 100.0 << ',' << ks << '\n';
    return os.str();
}

} // namespace cmgen
