#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

namespace slmt {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Architecture and objective hyperparameters. Defaults are the desk-scale
// configuration; the base Transformer sizes (512/8/2048/6/6) are expressible.
struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t n_ling_layers = 2;
  std::size_t vocab_size = 0;
  std::size_t max_len = 64;
  double dropout_p = 0.1;
  double label_smoothing = 0.1;

  bool use_disentangler = true;
  bool use_det_loss = true;
  bool use_ling_encoder = true;

  double lambda = 0.05;   // weight of the disentangling loss in the joint loss
  double lambda1 = 0.2;   // weight of the reconstruction term
  double lambda2 = 0.2;   // weight of the negative-pair terms

  void validate() const;

  // Canonical "key=value" lines, sorted by key. The digest hashes this text.
  std::string to_text() const;
  std::uint64_t digest() const;

  // Applies recognized keys; unknown keys raise ConfigError.
  void apply(const std::map<std::string, std::string>& values);
  static ModelConfig from_text(const std::string& text);
};

// Parses "key=value" lines; '#' starts a comment, blank lines are ignored.
std::map<std::string, std::string> parse_key_values(const std::string& text);

bool parse_bool(const std::string& key, const std::string& value);
std::size_t parse_size(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);

}  // namespace slmt
