#pragma once

#include <map>
#include <string>
#include <vector>

#include "cmgen/corpus.hpp"

namespace cmgen {

// Code-mixing index: minority share among Hi/En tokens. Other tokens are
// ignored; a text with no Hi/En tokens scores 0. Range [0, 0.5].
double compute_cmi(const LangTagSeq& tags);

// BLEU over language-tag sequences: uniform 1/2-weighted unigram+bigram
// precision with brevity penalty, no smoothing; any zero precision gives 0.
double cm_bleu(const LangTagSeq& candidate, const LangTagSeq& reference);

// Unigram-overlap F1 over tag sequences.
double cm_rouge1(const LangTagSeq& candidate, const LangTagSeq& reference);

// Longest-common-subsequence F1 over tag sequences.
double cm_rougeL(const LangTagSeq& candidate, const LangTagSeq& reference);

// Two-sample Kolmogorov-Smirnov statistic between CMI samples.
double cm_ks(const std::vector<double>& generated, const std::vector<double>& reference);

struct MetricReport {
    double perplexity = 0.0;
    // All four on their natural [0,1] scale; reports multiply by 100.
    double bleu = 0.0;
    double rouge1 = 0.0;
    double rougeL = 0.0;
    double ks = 0.0;
    size_t pairs = 0;
    std::map<std::string, std::vector<double>> generated_cmi;
    std::map<std::string, std::vector<double>> reference_cmi;

    std::string to_json() const;  // includes the report-table column names
    std::string to_csv() const;
};

} // namespace cmgen
