#pragma once

// Synthetic multilingual corpora. Every language realizes a shared semantic
// payload (a sequence of integers below `semantic_vocab`) through its own
// token permutation, word-order rule and disjoint surface range, so language
// identity of any token is exact and every translation is recoverable.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "slmt/tokens.hpp"

namespace slmt::corpus {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class WordOrder { identity, reverse, rotate1 };

std::string to_string(WordOrder order);
WordOrder word_order_from_string(const std::string& name);

using Payload = std::vector<std::uint32_t>;

struct LanguageSpec {
  int id = 0;
  std::string name;                      // "L0"
  std::uint32_t offset = 0;              // first surface index of this language
  std::vector<std::uint32_t> permutation;  // semantic id -> local surface index
  WordOrder order = WordOrder::identity;

  std::vector<std::string> realize(const Payload& payload) const;
  // Inverse of realize; throws DataError on a token outside this language.
  Payload recover(const std::vector<std::string>& tokens) const;
  bool owns(std::uint32_t surface_index) const {
    return surface_index >= offset && surface_index < offset + permutation.size();
  }
};

// Closed vocabulary: <pad>, <eos>, one tag per language, then every surface
// token of every language.
class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kEos = 1;

  Vocabulary(std::size_t n_languages, std::size_t semantic_vocab);

  std::size_t size() const { return tokens_.size(); }
  std::size_t n_languages() const { return n_languages_; }
  std::int32_t language_token(int language) const;
  std::int32_t id(const std::string& token) const;  // throws DataError on unknown token
  const std::string& token(std::int32_t id) const;
  bool is_special(std::int32_t id) const { return id < first_word_id(); }
  std::int32_t first_word_id() const { return static_cast<std::int32_t>(2 + n_languages_); }
  // Owning language of a word id; nullopt for pad/eos/tags.
  std::optional<int> language_of(std::int32_t id) const;

 private:
  std::size_t n_languages_;
  std::size_t semantic_vocab_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct Direction {
  int source = 0;
  int target = 0;
  auto operator<=>(const Direction&) const = default;
};
std::string direction_name(const Direction& d, const std::vector<LanguageSpec>& languages);

struct ParallelExample {
  Payload payload;
  int source_language = 0;
  int target_language = 0;
  std::vector<std::int32_t> source;  // <src tag> x1 .. xn
  std::vector<std::int32_t> target;  // <tgt tag> y1 .. ym
};

// Prepends language tags and maps surface tokens to ids.
ParallelExample tag_and_encode(const std::vector<std::string>& source_tokens,
                               const std::vector<std::string>& target_tokens, int source_language,
                               int target_language, const Vocabulary& vocab);
// Drops the leading tag (and anything special) and maps ids back to tokens.
std::vector<std::string> surface_tokens(const std::vector<std::int32_t>& ids, const Vocabulary& vocab);

struct GenerateOptions {
  std::size_t n_languages = 4;
  int center = 0;
  std::size_t pairs_per_direction = 3000;
  std::size_t valid_size = 100;
  std::size_t test_size = 200;
  std::size_t min_len = 3;
  std::size_t max_len = 12;
  std::size_t semantic_vocab = 40;
  std::uint64_t seed = 1;
};

struct Corpus {
  GenerateOptions options;
  std::vector<LanguageSpec> languages;
  // split ("train", "valid", "test") -> direction -> examples
  std::map<std::string, std::map<Direction, std::vector<ParallelExample>>> splits;
  // Multiway test payloads (shared by all test directions), for representation analysis.
  std::vector<Payload> test_pool;

  Vocabulary vocabulary() const { return Vocabulary(options.n_languages, options.semantic_vocab); }
  std::vector<Direction> supervised_directions() const;
  std::vector<Direction> zero_shot_directions() const;
  bool is_supervised(const Direction& d) const { return d.source == options.center || d.target == options.center; }
  const LanguageSpec& language(const std::string& name) const;
  // All training examples, directions in order.
  std::vector<ParallelExample> training_examples() const;
};

std::vector<LanguageSpec> make_languages(std::size_t n_languages, std::size_t semantic_vocab, std::uint64_t seed);

Corpus generate_corpus(const GenerateOptions& options);

// Files: <dir>/manifest.json, <dir>/<split>/<src>-<tgt>.{src,tgt},
// <dir>/analysis.tsv (id \t language \t tokens over the multiway test pool).
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

std::string manifest_json(const Corpus& corpus);
Corpus corpus_from_manifest(const std::string& json_text);  // languages + options, no examples

std::string join_tokens(const std::vector<std::string>& tokens);
std::vector<std::string> split_tokens(const std::string& line);
std::vector<std::string> read_lines(const std::filesystem::path& path);

// ---- batching --------------------------------------------------------------

struct Batch {
  TokenMatrix source;         // <src tag> x ...
  TokenMatrix decoder_input;  // <tgt tag> y ...  (also the target encoded as a source)
  TokenMatrix gold;           // y ... <eos>
  std::vector<int> source_language;
  std::vector<int> target_language;
  std::size_t pairs() const { return source.rows; }
  std::size_t tokens() const;
};

Batch make_batch(const std::vector<ParallelExample>& examples);

struct BatchingStats {
  std::size_t dropped_singletons = 0;
};

// Shuffles with the epoch's data stream and packs pairs greedily so each batch
// holds at most max_tokens real tokens (source + target, tags included) and at
// least two pairs. A trailing single pair is held out of that epoch.
std::vector<Batch> make_batches(const std::vector<ParallelExample>& examples, std::size_t max_tokens,
                                std::uint64_t seed, std::uint64_t epoch, BatchingStats* stats = nullptr);

}  // namespace slmt::corpus
