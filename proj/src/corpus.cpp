#include "mhc/corpus.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mhc/errors.hpp"
#include "mhc/rng.hpp"

namespace mhc {

Corpus Corpus::from_text(std::string text, double holdout_fraction) {
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
        throw std::invalid_argument("corpus: holdout fraction must be in (0, 1)");
    Corpus c;
    c.text_ = std::move(text);
    c.tokens_ = text_to_tokens(c.text_);
    if (c.tokens_.size() < 2) throw std::invalid_argument("corpus: needs at least 2 tokens");
    c.split_ = static_cast<std::size_t>(static_cast<double>(c.tokens_.size()) * (1.0 - holdout_fraction));
    c.split_ = std::min(c.split_, c.tokens_.size() - 1);
    if (c.split_ == 0) c.split_ = 1;
    return c;
}

Corpus Corpus::from_file(const std::string& path, double holdout_fraction) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open corpus file: " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return from_text(buf.str(), holdout_fraction);
}

double Corpus::unigram_entropy() const {
    std::array<std::int64_t, 256> counts{};
    for (int t : tokens_) counts[static_cast<std::size_t>(t)]++;
    const double total = static_cast<double>(tokens_.size());
    double h = 0.0;
    for (std::int64_t c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / total;
        h -= p * std::log(p);
    }
    return h;
}

std::vector<int> text_to_tokens(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char ch : text) out.push_back(static_cast<int>(static_cast<unsigned char>(ch)));
    return out;
}

std::string tokens_to_text(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    return out;
}

std::vector<std::string> default_templates() {
    return {
        "The {adj} {noun} {verb} the {noun}.",
        "The {noun} {verb} the {adj} {noun}.",
        "The {noun} near the {noun} {verb} the {adj} {noun}.",
        "The {adj} {noun} and the {noun} {verb} the {noun}.",
    };
}

WordLists default_word_lists() {
    WordLists w;
    // grouped by byte length so every word has a same-length alternative
    w.adjectives = {"big", "old", "shy", "wet", "sly",  "icy",  "tall", "wise", "calm",
                    "dark", "warm", "pale", "quiet", "brave", "eager", "sunny", "rusty", "dusty"};
    w.nouns = {"cat", "dog", "fox", "owl", "hen", "ram", "bee", "ant",  "wolf", "hawk",  "lion",
               "bear", "crab", "toad", "mouse", "horse", "otter", "raven", "snake", "goose"};
    w.verbs = {"sees",   "pets",   "aids",   "tows",   "likes",  "calls",  "helps",  "meets",
               "chases", "greets", "avoids", "trusts", "follows", "watches"};
    return w;
}

namespace {

const std::vector<std::string>* list_for_slot(const WordLists& words, std::string_view slot) {
    if (slot == "adj") return &words.adjectives;
    if (slot == "noun") return &words.nouns;
    if (slot == "verb") return &words.verbs;
    return nullptr;
}

std::string fill_with_rng(const std::string& tmpl, const WordLists& words, SplitMix64& rng) {
    std::string out;
    out.reserve(tmpl.size() + 16);
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            const std::size_t close = tmpl.find('}', i);
            if (close == std::string::npos) throw std::invalid_argument("template: unterminated { in " + tmpl);
            const std::string slot = tmpl.substr(i + 1, close - i - 1);
            const auto* list = list_for_slot(words, slot);
            if (!list || list->empty())
                throw std::invalid_argument("template: unknown or empty slot {" + slot + "}");
            out += (*list)[static_cast<std::size_t>(rng.next_below(list->size()))];
            i = close + 1;
        } else {
            out.push_back(tmpl[i++]);
        }
    }
    return out;
}

}  // namespace

std::string fill_template(const std::string& tmpl, const WordLists& words, std::uint64_t seed) {
    SplitMix64 rng(seed);
    return fill_with_rng(tmpl, words, rng);
}

std::string generate_synthetic_text(int sentences, std::uint64_t seed,
                                    const std::vector<std::string>& templates, const WordLists& words) {
    if (sentences < 1) throw std::invalid_argument("synthetic corpus: sentence count must be >= 1");
    if (templates.empty()) throw std::invalid_argument("synthetic corpus: no templates");
    SplitMix64 rng(seed);
    std::string out;
    out.reserve(static_cast<std::size_t>(sentences) * 32);
    for (int s = 0; s < sentences; ++s) {
        const auto& tmpl = templates[static_cast<std::size_t>(rng.next_below(templates.size()))];
        out += fill_with_rng(tmpl, words, rng);
        out.push_back('\n');
    }
    return out;
}

std::string generate_synthetic_text(int sentences, std::uint64_t seed) {
    return generate_synthetic_text(sentences, seed, default_templates(), default_word_lists());
}

}  // namespace mhc
