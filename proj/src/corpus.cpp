#include "slmt/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "slmt/rng.hpp"

namespace slmt::corpus {

using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;
const char* const kSplits[] = {"train", "valid", "test"};

std::uint32_t parse_surface(const std::string& token) {
  std::uint32_t value = 0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || ptr != token.data() + token.size() || token.empty()) {
    throw DataError("not a surface token: '" + token + "'");
  }
  return value;
}

Payload random_payload(std::mt19937_64& rng, const GenerateOptions& o) {
  const std::size_t len = o.min_len + uniform_index(rng, o.max_len - o.min_len + 1);
  Payload p(len);
  for (auto& v : p) v = static_cast<std::uint32_t>(uniform_index(rng, o.semantic_vocab));
  return p;
}

std::vector<Payload> unique_pool(std::mt19937_64& rng, const GenerateOptions& o, std::size_t n,
                                 std::set<Payload>& taken) {
  std::vector<Payload> pool;
  std::size_t attempts = 0;
  while (pool.size() < n) {
    if (++attempts > 100 * (n + 10)) throw std::invalid_argument("generate_corpus: cannot draw enough distinct payloads");
    auto p = random_payload(rng, o);
    if (taken.insert(p).second) pool.push_back(std::move(p));
  }
  return pool;
}

ParallelExample realize_pair(const Payload& payload, const LanguageSpec& src, const LanguageSpec& tgt,
                             const Vocabulary& vocab) {
  auto ex = tag_and_encode(src.realize(payload), tgt.realize(payload), src.id, tgt.id, vocab);
  ex.payload = payload;
  return ex;
}

void check_options(const GenerateOptions& o) {
  if (o.n_languages < 3) {
    throw std::invalid_argument("generate_corpus: need at least 3 languages so zero-shot directions exist");
  }
  if (o.center < 0 || static_cast<std::size_t>(o.center) >= o.n_languages) {
    throw std::invalid_argument("generate_corpus: center language out of range");
  }
  if (o.semantic_vocab == 0 || o.min_len == 0 || o.min_len > o.max_len) {
    throw std::invalid_argument("generate_corpus: invalid length range or semantic vocabulary");
  }
  if (o.n_languages * o.semantic_vocab + o.n_languages + 2 > 1'000'000) {
    throw std::invalid_argument("generate_corpus: vocabulary overflow (languages x semantic vocab too large)");
  }
}

}  // namespace

std::string to_string(WordOrder order) {
  switch (order) {
    case WordOrder::identity: return "identity";
    case WordOrder::reverse: return "reverse";
    case WordOrder::rotate1: return "rotate-1";
  }
  return "identity";
}

WordOrder word_order_from_string(const std::string& name) {
  if (name == "identity") return WordOrder::identity;
  if (name == "reverse") return WordOrder::reverse;
  if (name == "rotate-1") return WordOrder::rotate1;
  throw DataError("unknown word order '" + name + "'");
}

// ---- LanguageSpec ------------------------------------------------------------

std::vector<std::string> LanguageSpec::realize(const Payload& payload) const {
  std::vector<std::uint32_t> local(payload.size());
  for (std::size_t i = 0; i < payload.size(); ++i) {
    if (payload[i] >= permutation.size()) throw DataError("payload symbol outside the semantic vocabulary");
    local[i] = offset + permutation[payload[i]];
  }
  if (order == WordOrder::reverse) {
    std::reverse(local.begin(), local.end());
  } else if (order == WordOrder::rotate1 && !local.empty()) {
    std::rotate(local.begin(), local.begin() + 1, local.end());
  }
  std::vector<std::string> out;
  out.reserve(local.size());
  for (auto v : local) out.push_back(std::to_string(v));
  return out;
}

Payload LanguageSpec::recover(const std::vector<std::string>& tokens) const {
  std::vector<std::uint32_t> local;
  local.reserve(tokens.size());
  for (const auto& tok : tokens) {
    const auto v = parse_surface(tok);
    if (!owns(v)) throw DataError("token '" + tok + "' does not belong to " + name);
    local.push_back(v - offset);
  }
  if (order == WordOrder::reverse) {
    std::reverse(local.begin(), local.end());
  } else if (order == WordOrder::rotate1 && !local.empty()) {
    std::rotate(local.rbegin(), local.rbegin() + 1, local.rend());
  }
  std::vector<std::uint32_t> inverse(permutation.size());
  for (std::uint32_t s = 0; s < permutation.size(); ++s) inverse[permutation[s]] = s;
  Payload payload(local.size());
  for (std::size_t i = 0; i < local.size(); ++i) payload[i] = inverse[local[i]];
  return payload;
}

std::vector<LanguageSpec> make_languages(std::size_t n_languages, std::size_t semantic_vocab, std::uint64_t seed) {
  RngStreams streams(seed);
  auto rng = streams.stream("corpus.languages");
  const WordOrder cycle[] = {WordOrder::reverse, WordOrder::rotate1, WordOrder::identity};
  std::vector<LanguageSpec> out;
  for (std::size_t i = 0; i < n_languages; ++i) {
    LanguageSpec spec;
    spec.id = static_cast<int>(i);
    spec.name = "L" + std::to_string(i);
    spec.offset = static_cast<std::uint32_t>(i * semantic_vocab);
    spec.permutation.resize(semantic_vocab);
    std::iota(spec.permutation.begin(), spec.permutation.end(), 0u);
    if (i == 0) {
      spec.order = WordOrder::identity;
    } else {
      for (std::size_t k = semantic_vocab; k > 1; --k) {
        std::swap(spec.permutation[k - 1], spec.permutation[uniform_index(rng, k)]);
      }
      spec.order = cycle[(i - 1) % 3];
    }
    out.push_back(std::move(spec));
  }
  return out;
}

// ---- Vocabulary ----------------------------------------------------------------

Vocabulary::Vocabulary(std::size_t n_languages, std::size_t semantic_vocab)
    : n_languages_(n_languages), semantic_vocab_(semantic_vocab) {
  tokens_.push_back("<pad>");
  tokens_.push_back("<eos>");
  for (std::size_t l = 0; l < n_languages; ++l) tokens_.push_back("<L" + std::to_string(l) + ">");
  for (std::size_t s = 0; s < n_languages * semantic_vocab; ++s) tokens_.push_back(std::to_string(s));
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<std::int32_t>(i));
}

std::int32_t Vocabulary::language_token(int language) const {
  if (language < 0 || static_cast<std::size_t>(language) >= n_languages_) {
    throw DataError("unknown language id " + std::to_string(language));
  }
  return 2 + language;
}

std::int32_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw DataError("unknown token '" + token + "'");
  return it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw DataError("token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocabulary::language_of(std::int32_t id) const {
  if (id < first_word_id() || static_cast<std::size_t>(id) >= tokens_.size()) return std::nullopt;
  return static_cast<int>(static_cast<std::size_t>(id - first_word_id()) / semantic_vocab_);
}

// ---- examples --------------------------------------------------------------------

std::string direction_name(const Direction& d, const std::vector<LanguageSpec>& languages) {
  return languages.at(d.source).name + "-" + languages.at(d.target).name;
}

ParallelExample tag_and_encode(const std::vector<std::string>& source_tokens,
                               const std::vector<std::string>& target_tokens, int source_language,
                               int target_language, const Vocabulary& vocab) {
  if (source_tokens.empty() || target_tokens.empty()) throw DataError("tag_and_encode: empty sentence");
  ParallelExample ex;
  ex.source_language = source_language;
  ex.target_language = target_language;
  ex.source.push_back(vocab.language_token(source_language));
  for (const auto& t : source_tokens) ex.source.push_back(vocab.id(t));
  ex.target.push_back(vocab.language_token(target_language));
  for (const auto& t : target_tokens) ex.target.push_back(vocab.id(t));
  return ex;
}

std::vector<std::string> surface_tokens(const std::vector<std::int32_t>& ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (auto id : ids) {
    if (!vocab.is_special(id)) out.push_back(vocab.token(id));
  }
  return out;
}

// ---- Corpus ----------------------------------------------------------------------

std::vector<Direction> Corpus::supervised_directions() const {
  std::vector<Direction> out;
  for (std::size_t l = 0; l < options.n_languages; ++l) {
    if (static_cast<int>(l) == options.center) continue;
    out.push_back({options.center, static_cast<int>(l)});
    out.push_back({static_cast<int>(l), options.center});
  }
  return out;
}

std::vector<Direction> Corpus::zero_shot_directions() const {
  std::vector<Direction> out;
  for (std::size_t s = 0; s < options.n_languages; ++s) {
    for (std::size_t t = 0; t < options.n_languages; ++t) {
      if (s == t || static_cast<int>(s) == options.center || static_cast<int>(t) == options.center) continue;
      out.push_back({static_cast<int>(s), static_cast<int>(t)});
    }
  }
  return out;
}

const LanguageSpec& Corpus::language(const std::string& name) const {
  for (const auto& l : languages) {
    if (l.name == name) return l;
  }
  throw DataError("unknown language '" + name + "'");
}

std::vector<ParallelExample> Corpus::training_examples() const {
  std::vector<ParallelExample> out;
  auto it = splits.find("train");
  if (it == splits.end()) return out;
  for (const auto& [dir, examples] : it->second) out.insert(out.end(), examples.begin(), examples.end());
  return out;
}

Corpus generate_corpus(const GenerateOptions& options) {
  check_options(options);
  Corpus corpus;
  corpus.options = options;
  corpus.languages = make_languages(options.n_languages, options.semantic_vocab, options.seed);
  const Vocabulary vocab = corpus.vocabulary();
  RngStreams streams(options.seed);

  std::set<Payload> taken;
  auto test_rng = streams.stream("corpus.test");
  corpus.test_pool = unique_pool(test_rng, options, options.test_size, taken);
  auto valid_rng = streams.stream("corpus.valid");
  const auto valid_pool = unique_pool(valid_rng, options, options.valid_size, taken);
  const std::set<Payload> reserved = taken;

  const auto supervised = corpus.supervised_directions();
  for (std::size_t i = 0; i < supervised.size(); ++i) {
    const auto& dir = supervised[i];
    const auto& src = corpus.languages[dir.source];
    const auto& tgt = corpus.languages[dir.target];
    auto rng = streams.stream("corpus.train", i);
    auto& train = corpus.splits["train"][dir];
    while (train.size() < options.pairs_per_direction) {
      auto payload = random_payload(rng, options);
      if (reserved.count(payload)) continue;
      train.push_back(realize_pair(payload, src, tgt, vocab));
    }
    auto& valid = corpus.splits["valid"][dir];
    for (const auto& p : valid_pool) valid.push_back(realize_pair(p, src, tgt, vocab));
  }
  for (std::size_t s = 0; s < options.n_languages; ++s) {
    for (std::size_t t = 0; t < options.n_languages; ++t) {
      if (s == t) continue;
      auto& test = corpus.splits["test"][Direction{static_cast<int>(s), static_cast<int>(t)}];
      for (const auto& p : corpus.test_pool) {
        test.push_back(realize_pair(p, corpus.languages[s], corpus.languages[t], vocab));
      }
    }
  }
  return corpus;
}

// ---- files ---------------------------------------------------------------------

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::string manifest_json(const Corpus& corpus) {
  const auto& o = corpus.options;
  json j;
  j["format"] = "slmt-corpus";
  j["version"] = kManifestVersion;
  j["seed"] = o.seed;
  j["n_languages"] = o.n_languages;
  j["center"] = corpus.languages.at(o.center).name;
  j["semantic_vocab"] = o.semantic_vocab;
  j["min_len"] = o.min_len;
  j["max_len"] = o.max_len;
  j["pairs_per_direction"] = o.pairs_per_direction;
  j["valid_size"] = o.valid_size;
  j["test_size"] = o.test_size;
  json langs = json::array();
  for (const auto& l : corpus.languages) {
    langs.push_back({{"id", l.id},
                     {"name", l.name},
                     {"offset", l.offset},
                     {"order", to_string(l.order)},
                     {"permutation", l.permutation}});
  }
  j["languages"] = langs;
  json splits = json::object();
  for (const char* split : kSplits) {
    json dirs = json::array();
    auto it = corpus.splits.find(split);
    if (it != corpus.splits.end()) {
      for (const auto& [dir, examples] : it->second) {
        dirs.push_back({{"direction", direction_name(dir, corpus.languages)},
                        {"role", corpus.is_supervised(dir) ? "supervised" : "zero-shot"},
                        {"sentences", examples.size()}});
      }
    }
    splits[split] = dirs;
  }
  j["splits"] = splits;
  return j.dump(2) + "\n";
}

Corpus corpus_from_manifest(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  if (j.value("format", "") != "slmt-corpus" || j.value("version", 0) != kManifestVersion) {
    throw DataError("manifest: unsupported format or version");
  }
  Corpus corpus;
  try {
    auto& o = corpus.options;
    o.seed = j.at("seed").get<std::uint64_t>();
    o.n_languages = j.at("n_languages").get<std::size_t>();
    o.semantic_vocab = j.at("semantic_vocab").get<std::size_t>();
    o.min_len = j.at("min_len").get<std::size_t>();
    o.max_len = j.at("max_len").get<std::size_t>();
    o.pairs_per_direction = j.at("pairs_per_direction").get<std::size_t>();
    o.valid_size = j.at("valid_size").get<std::size_t>();
    o.test_size = j.at("test_size").get<std::size_t>();
    for (const auto& l : j.at("languages")) {
      LanguageSpec spec;
      spec.id = l.at("id").get<int>();
      spec.name = l.at("name").get<std::string>();
      spec.offset = l.at("offset").get<std::uint32_t>();
      spec.order = word_order_from_string(l.at("order").get<std::string>());
      spec.permutation = l.at("permutation").get<std::vector<std::uint32_t>>();
      corpus.languages.push_back(std::move(spec));
    }
    o.center = corpus.language(j.at("center").get<std::string>()).id;
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  if (corpus.languages.size() != corpus.options.n_languages) throw DataError("manifest: language count mismatch");
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (const auto& [split, dirs] : corpus.splits) {
    fs::create_directories(dir / split);
    const Vocabulary vocab = corpus.vocabulary();
    for (const auto& [d, examples] : dirs) {
      const std::string stem = direction_name(d, corpus.languages);
      std::ofstream src(dir / split / (stem + ".src"), std::ios::binary);
      std::ofstream tgt(dir / split / (stem + ".tgt"), std::ios::binary);
      for (const auto& ex : examples) {
        src << join_tokens(surface_tokens(ex.source, vocab)) << '\n';
        tgt << join_tokens(surface_tokens(ex.target, vocab)) << '\n';
      }
      if (!src || !tgt) throw DataError("cannot write corpus files under " + (dir / split).string());
    }
  }
  std::ofstream analysis(dir / "analysis.tsv", std::ios::binary);
  for (std::size_t i = 0; i < corpus.test_pool.size(); ++i) {
    for (const auto& lang : corpus.languages) {
      analysis << i << '\t' << lang.name << '\t' << join_tokens(lang.realize(corpus.test_pool[i])) << '\n';
    }
  }
  std::ofstream manifest(dir / "manifest.json", std::ios::binary);
  manifest << manifest_json(corpus);
  if (!manifest || !analysis) throw DataError("cannot write manifest under " + dir.string());
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("no manifest.json in " + dir.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  Corpus corpus = corpus_from_manifest(buffer.str());
  const Vocabulary vocab = corpus.vocabulary();
  const json j = json::parse(buffer.str());
  for (const char* split : kSplits) {
    if (!j["splits"].contains(split)) continue;
    for (const auto& entry : j["splits"][split]) {
      const auto name = entry.at("direction").get<std::string>();
      const auto dash = name.find('-');
      if (dash == std::string::npos) throw DataError("manifest: bad direction '" + name + "'");
      const auto& src_lang = corpus.language(name.substr(0, dash));
      const auto& tgt_lang = corpus.language(name.substr(dash + 1));
      const auto src_lines = read_lines(dir / split / (name + ".src"));
      const auto tgt_lines = read_lines(dir / split / (name + ".tgt"));
      if (src_lines.size() != tgt_lines.size()) throw DataError("line count mismatch in " + name);
      auto& examples = corpus.splits[split][Direction{src_lang.id, tgt_lang.id}];
      for (std::size_t i = 0; i < src_lines.size(); ++i) {
        const auto src_tokens = split_tokens(src_lines[i]);
        const auto tgt_tokens = split_tokens(tgt_lines[i]);
        auto ex = tag_and_encode(src_tokens, tgt_tokens, src_lang.id, tgt_lang.id, vocab);
        ex.payload = src_lang.recover(src_tokens);
        if (tgt_lang.recover(tgt_tokens) != ex.payload) {
          throw DataError(name + " line " + std::to_string(i + 1) + ": source and target disagree");
        }
        examples.push_back(std::move(ex));
      }
    }
  }
  // The multiway pool is the payload list shared by every test direction.
  if (auto it = corpus.splits.find("test"); it != corpus.splits.end() && !it->second.empty()) {
    for (const auto& ex : it->second.begin()->second) corpus.test_pool.push_back(ex.payload);
  }
  return corpus;
}

// ---- batching ------------------------------------------------------------------

std::size_t Batch::tokens() const {
  std::size_t n = 0;
  for (auto m : source.mask) n += m;
  for (auto m : decoder_input.mask) n += m;
  return n;
}

Batch make_batch(const std::vector<ParallelExample>& examples) {
  std::vector<std::vector<std::int32_t>> src, dec, gold;
  Batch batch;
  for (const auto& ex : examples) {
    src.push_back(ex.source);
    dec.push_back(ex.target);
    std::vector<std::int32_t> g(ex.target.begin() + 1, ex.target.end());
    g.push_back(Vocabulary::kEos);
    gold.push_back(std::move(g));
    batch.source_language.push_back(ex.source_language);
    batch.target_language.push_back(ex.target_language);
  }
  batch.source = TokenMatrix::from_rows(src, Vocabulary::kPad);
  batch.decoder_input = TokenMatrix::from_rows(dec, Vocabulary::kPad);
  batch.gold = TokenMatrix::from_rows(gold, Vocabulary::kPad);
  return batch;
}

std::vector<Batch> make_batches(const std::vector<ParallelExample>& examples, std::size_t max_tokens,
                                std::uint64_t seed, std::uint64_t epoch, BatchingStats* stats) {
  if (examples.empty()) throw DataError("make_batches: empty corpus");
  for (const auto& ex : examples) {
    const std::size_t n = ex.source.size() + ex.target.size();
    if (n > max_tokens) {
      throw DataError("make_batches: an example of " + std::to_string(n) + " tokens exceeds max_tokens " +
                      std::to_string(max_tokens));
    }
    if (2 * n > max_tokens) {
      throw DataError("make_batches: max_tokens " + std::to_string(max_tokens) +
                      " cannot hold two pairs of the longest example");
    }
  }
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = RngStreams(seed).stream("data", epoch);
  for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[uniform_index(rng, k)]);

  std::vector<Batch> batches;
  std::vector<ParallelExample> current;
  std::size_t current_tokens = 0;
  for (auto idx : order) {
    const auto& ex = examples[idx];
    const std::size_t n = ex.source.size() + ex.target.size();
    if (current_tokens + n > max_tokens) {
      batches.push_back(make_batch(current));
      current.clear();
      current_tokens = 0;
    }
    current.push_back(ex);
    current_tokens += n;
  }
  if (current.size() >= 2) {
    batches.push_back(make_batch(current));
  } else if (stats) {
    stats->dropped_singletons += current.size();
  }
  return batches;
}

}  // namespace slmt::corpus
