#include "slmt/config.hpp"

#include <fmt/format.h>

#include <charconv>
#include <sstream>

#include "slmt/rng.hpp"

namespace slmt {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("config: " + key + " expects a non-negative integer, got '" + value + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double out = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + value + "'");
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || ffn_dim == 0 || n_enc_layers == 0 || n_dec_layers == 0 ||
      vocab_size == 0 || max_len == 0) {
    throw ConfigError("config: dimensions must be >= 1 (is vocab_size set?)");
  }
  if (use_ling_encoder && n_ling_layers == 0) {
    throw ConfigError("config: n_ling_layers must be >= 1 when the linguistic encoder is on");
  }
  if (d_model % n_heads != 0) throw ConfigError("config: d_model must be divisible by n_heads");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("config: dropout_p must lie in [0, 1)");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw ConfigError("config: label_smoothing must lie in [0, 1)");
  }
  if (lambda < 0.0 || lambda1 < 0.0 || lambda2 < 0.0) {
    throw ConfigError("config: lambda, lambda1, lambda2 must be >= 0");
  }
  if (use_det_loss && !use_disentangler) {
    throw ConfigError("config: use_det_loss requires use_disentangler");
  }
}

std::string ModelConfig::to_text() const {
  std::string out;
  auto line = [&out](const char* key, const auto& value) { out += fmt::format("{}={}\n", key, value); };
  line("d_model", d_model);
  line("dropout_p", dropout_p);
  line("ffn_dim", ffn_dim);
  line("label_smoothing", label_smoothing);
  line("lambda", lambda);
  line("lambda1", lambda1);
  line("lambda2", lambda2);
  line("max_len", max_len);
  line("n_dec_layers", n_dec_layers);
  line("n_enc_layers", n_enc_layers);
  line("n_heads", n_heads);
  line("n_ling_layers", n_ling_layers);
  line("use_det_loss", use_det_loss ? "true" : "false");
  line("use_disentangler", use_disentangler ? "true" : "false");
  line("use_ling_encoder", use_ling_encoder ? "true" : "false");
  line("vocab_size", vocab_size);
  return out;
}

std::uint64_t ModelConfig::digest() const { return fnv1a64(to_text()); }

void ModelConfig::apply(const std::map<std::string, std::string>& values) {
  for (const auto& [key, value] : values) {
    if (key == "d_model") d_model = parse_size(key, value);
    else if (key == "n_heads") n_heads = parse_size(key, value);
    else if (key == "ffn_dim") ffn_dim = parse_size(key, value);
    else if (key == "n_enc_layers") n_enc_layers = parse_size(key, value);
    else if (key == "n_dec_layers") n_dec_layers = parse_size(key, value);
    else if (key == "n_ling_layers") n_ling_layers = parse_size(key, value);
    else if (key == "vocab_size") vocab_size = parse_size(key, value);
    else if (key == "max_len") max_len = parse_size(key, value);
    else if (key == "dropout_p") dropout_p = parse_double(key, value);
    else if (key == "label_smoothing") label_smoothing = parse_double(key, value);
    else if (key == "use_disentangler") use_disentangler = parse_bool(key, value);
    else if (key == "use_det_loss") use_det_loss = parse_bool(key, value);
    else if (key == "use_ling_encoder") use_ling_encoder = parse_bool(key, value);
    else if (key == "lambda") lambda = parse_double(key, value);
    else if (key == "lambda1") lambda1 = parse_double(key, value);
    else if (key == "lambda2") lambda2 = parse_double(key, value);
    else throw ConfigError("config: unknown model key '" + key + "'");
  }
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig cfg;
  cfg.apply(parse_key_values(text));
  return cfg;
}

}  // namespace slmt
