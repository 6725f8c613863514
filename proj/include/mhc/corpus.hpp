#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mhc {

// Byte-level corpus: the token stream is the UTF-8 bytes themselves
// (vocab 256, no special tokens). The trailing holdout_fraction of the stream
// is held out for evaluation.
class Corpus {
public:
    static Corpus from_text(std::string text, double holdout_fraction);
    static Corpus from_file(const std::string& path, double holdout_fraction);

    const std::string& text() const { return text_; }
    std::span<const int> tokens() const { return tokens_; }
    std::span<const int> train_tokens() const { return {tokens_.data(), split_}; }
    std::span<const int> holdout_tokens() const { return {tokens_.data() + split_, tokens_.size() - split_}; }

    // Unigram entropy in nats of the full token stream (counting estimate).
    double unigram_entropy() const;

private:
    std::string text_;
    std::vector<int> tokens_;
    std::size_t split_ = 0;
};

// One sentence-template slot draws from one of these lists; words within a
// list are grouped by byte length so counterfactual swaps can stay
// length-preserving.
struct WordLists {
    std::vector<std::string> adjectives;
    std::vector<std::string> nouns;
    std::vector<std::string> verbs;
};

// Templates use {adj} / {noun} / {verb} placeholders.
std::vector<std::string> default_templates();
WordLists default_word_lists();

// Deterministic templated sentences ("The shy fox follows the old crab."),
// newline separated.
std::string generate_synthetic_text(int sentences, std::uint64_t seed);
std::string generate_synthetic_text(int sentences, std::uint64_t seed,
                                    const std::vector<std::string>& templates, const WordLists& words);

// Renders a single filled template; exposed for prompt construction.
std::string fill_template(const std::string& tmpl, const WordLists& words, std::uint64_t seed);

std::vector<int> text_to_tokens(std::string_view text);
std::string tokens_to_text(std::span<const int> tokens);

}  // namespace mhc
