#include "slmt/training.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace slmt::train {

double lr_at(std::uint64_t step, double peak, std::uint64_t warmup) {
  if (step == 0) throw std::invalid_argument("lr_at: steps are 1-based");
  if (warmup == 0) throw std::invalid_argument("lr_at: warmup must be >= 1");
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  return peak * std::sqrt(static_cast<double>(warmup) / static_cast<double>(step));
}

template <typename T>
Adam<T>::Adam(ParameterSet<T>& params, AdamOptions options) : params_(&params), options_(options) {
  for (const auto& [name, p] : params) {
    moments_[name] = Moments{std::vector<double>(p.numel(), 0.0), std::vector<double>(p.numel(), 0.0)};
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& [name, p] : *params_) {
    auto& mom = moments_.at(name);
    auto values = p.mutable_data();
    const auto grad = p.grad();
    const bool has = p.has_grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has ? static_cast<double>(grad[i]) : 0.0;
      mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
      mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
      const double m_hat = mom.m[i] / c1;
      const double v_hat = mom.v[i] / c2;
      values[i] = static_cast<T>(static_cast<double>(values[i]) - lr * m_hat / (std::sqrt(v_hat) + options_.eps));
    }
  }
}

template <typename T>
void Adam<T>::save(Checkpoint& ckpt) const {
  const std::uint64_t step = t_;
  ckpt.put<std::uint8_t>("optim.step", {8}, {reinterpret_cast<const std::uint8_t*>(&step), 8});
  for (const auto& [name, mom] : moments_) {
    ckpt.put<double>("optim.m." + name, {mom.m.size()}, mom.m);
    ckpt.put<double>("optim.v." + name, {mom.v.size()}, mom.v);
  }
}

template <typename T>
void Adam<T>::load(const Checkpoint& ckpt) {
  const auto step_bytes = ckpt.at("optim.step").values<std::uint8_t>();
  if (step_bytes.size() != 8) throw CheckpointError("checkpoint: malformed optim.step");
  std::memcpy(&t_, step_bytes.data(), 8);
  for (auto& [name, mom] : moments_) {
    auto m = ckpt.at("optim.m." + name).template values<double>();
    auto v = ckpt.at("optim.v." + name).template values<double>();
    if (m.size() != mom.m.size() || v.size() != mom.v.size()) {
      throw CheckpointError("checkpoint: optimizer state size mismatch for " + name);
    }
    mom.m = std::move(m);
    mom.v = std::move(v);
  }
}

template <typename T>
double grad_norm(const ParameterSet<T>& params) {
  double sq = 0.0;
  for (const auto& [_, p] : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (auto& [_, p] : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.node()->grad) g = static_cast<T>(static_cast<double>(g) * factor);
    }
  }
  return norm;
}

void TrainRunConfig::validate() const {
  if (!(peak_lr > 0.0)) throw ConfigError("train: peak_lr must be > 0");
  if (warmup == 0) throw ConfigError("train: warmup must be >= 1");
  if (total_steps == 0) throw ConfigError("train: total_steps must be >= 1");
  if (warmup > total_steps) throw ConfigError("train: warmup must not exceed total_steps");
  if (max_tokens == 0) throw ConfigError("train: max_tokens must be >= 1");
  if (checkpoint_interval == 0) throw ConfigError("train: checkpoint_interval must be >= 1");
  if (clip_norm < 0.0) throw ConfigError("train: clip_norm must be >= 0");
  if (select_top == 0 || keep_last < select_top) throw ConfigError("train: need keep_last >= select_top >= 1");
  if (select_metric != "valid_ce" && select_metric != "valid_bleu") {
    throw ConfigError("train: select_metric must be valid_ce or valid_bleu");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
    throw ConfigError("train: invalid Adam hyperparameters");
  }
}

std::string TrainRunConfig::to_text() const {
  std::string out;
  auto line = [&out](const char* key, const auto& value) { out += fmt::format("{}={}\n", key, value); };
  line("adam_beta1", adam.beta1);
  line("adam_beta2", adam.beta2);
  line("adam_eps", adam.eps);
  line("checkpoint_interval", checkpoint_interval);
  line("clip_norm", clip_norm);
  line("keep_last", keep_last);
  line("max_tokens", max_tokens);
  line("peak_lr", peak_lr);
  line("seed", seed);
  line("select_metric", select_metric);
  line("select_top", select_top);
  line("total_steps", total_steps);
  line("warmup", warmup);
  return out;
}

bool TrainRunConfig::apply(const std::string& key, const std::string& value) {
  if (key == "peak_lr") peak_lr = parse_double(key, value);
  else if (key == "warmup") warmup = parse_size(key, value);
  else if (key == "total_steps") total_steps = parse_size(key, value);
  else if (key == "max_tokens") max_tokens = parse_size(key, value);
  else if (key == "seed") seed = parse_size(key, value);
  else if (key == "checkpoint_interval") checkpoint_interval = parse_size(key, value);
  else if (key == "clip_norm") clip_norm = parse_double(key, value);
  else if (key == "keep_last") keep_last = parse_size(key, value);
  else if (key == "select_top") select_top = parse_size(key, value);
  else if (key == "select_metric") select_metric = value;
  else if (key == "adam_beta1") adam.beta1 = parse_double(key, value);
  else if (key == "adam_beta2") adam.beta2 = parse_double(key, value);
  else if (key == "adam_eps") adam.eps = parse_double(key, value);
  else return false;
  return true;
}

template <typename T>
StepLosses<T> compute_losses(const TranslationModel<T>& model, const corpus::Batch& batch,
                             const RngStreams& streams, std::uint64_t step, bool training) {
  const auto& cfg = model.config();
  const double p = training ? cfg.dropout_p : 0.0;
  auto enc_rng = streams.stream("dropout.encoder", step);
  auto dec_rng = streams.stream("dropout.decoder", step);
  auto ling_rng = streams.stream("dropout.lingenc", step);
  ForwardContexts ctx{{training, p, &enc_rng}, {training, p, &dec_rng}, {training, p, &ling_rng}};

  auto fwd = model.forward(batch.source, batch.decoder_input, ctx);
  auto ce = objectives::cross_entropy(fwd.logits, batch.gold, cfg.label_smoothing);
  const double d_avg = objectives::average_length(batch.source);
  const objectives::LossWeights weights{cfg.lambda, cfg.lambda1, cfg.use_det_loss};

  StepLosses<T> out;
  if (!cfg.use_det_loss) {
    out.joint = ce;
    out.breakdown = objectives::joint_loss(ce.item(), 0.0, 0.0, 0.0, d_avg, weights);
    return out;
  }

  // Targets go through the same encoder, tagged with their own language.
  auto tgt_rng = streams.stream("dropout.encoder.targets", step);
  auto targets = model.encode_source(batch.decoder_input, nn::RunContext{training, p, &tgt_rng});
  const auto& src = *fwd.source.disentangled;
  const auto& tgt = *targets.disentangled;

  using objectives::pool;
  auto sem = ad::concat<T>({pool(src.semantic, std::span<const std::uint8_t>(batch.source.mask)),
                            pool(tgt.semantic, std::span<const std::uint8_t>(batch.decoder_input.mask))},
                           0);
  auto lang = ad::concat<T>({pool(src.language, std::span<const std::uint8_t>(batch.source.mask)),
                             pool(tgt.language, std::span<const std::uint8_t>(batch.decoder_input.mask))},
                            0);

  auto layout = objectives::SentenceLayout::from_languages(batch.source_language, batch.target_language);
  auto sampling_rng = streams.stream("sampling", step);
  auto samples = objectives::sample_pairs(layout, sampling_rng);
  out.language_skipped = samples.language_skipped;

  auto l_sem = objectives::semantic_loss(sem, samples.semantic, cfg.lambda2);
  auto l_lang = objectives::language_loss(lang, samples.language, cfg.lambda2);
  // h is the reconstruction target: the branches move towards it, the encoder is not pulled towards them.
  auto l_recons =
      objectives::reconstruction_loss(fwd.source.encoder.states.detach(), src.semantic, src.language, batch.source);

  auto l_det = ad::add(ad::add(l_sem, l_lang), ad::scale(l_recons, T(cfg.lambda1)));
  out.joint = ad::add(ce, ad::scale(l_det, T(cfg.lambda * d_avg)));
  out.breakdown = objectives::joint_loss(ce.item(), l_sem.item(), l_lang.item(), l_recons.item(), d_avg, weights);
  return out;
}

namespace {

bool finite(const LossBreakdown& b) {
  for (double v : {b.l_ce, b.l_sem, b.l_lang, b.l_recons, b.l_det, b.l_joint, b.d_avg}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace

template <typename T>
StepResult train_step(TranslationModel<T>& model, Adam<T>& optimizer, const corpus::Batch& batch,
                      const TrainRunConfig& config, std::uint64_t step) {
  if (step != optimizer.steps() + 1) {
    throw std::logic_error(fmt::format("train_step: step {} does not follow optimizer step {}", step,
                                       optimizer.steps()));
  }
  const RngStreams streams(config.seed);
  auto losses = compute_losses(model, batch, streams, step, true);
  StepResult result;
  result.step = step;
  result.losses = losses.breakdown;
  result.language_skipped = losses.language_skipped;
  if (!finite(losses.breakdown) || !std::isfinite(static_cast<double>(losses.joint.item()))) {
    throw NumericalError("non-finite loss at step " + std::to_string(step) + ": " +
                         objectives::to_record(step, losses.breakdown));
  }
  model.params().zero_grad();
  ad::backward(losses.joint);
  result.grad_norm = config.clip_norm > 0.0 ? clip_grad_norm(model.params(), config.clip_norm)
                                            : grad_norm(model.params());
  if (!std::isfinite(result.grad_norm)) {
    throw NumericalError("non-finite gradient at step " + std::to_string(step) + ": " +
                         objectives::to_record(step, losses.breakdown));
  }
  result.lr = lr_at(step, config.peak_lr, config.warmup);
  optimizer.step(result.lr);
  model.params().zero_grad();
  return result;
}

template <typename T>
double validation_ce(const TranslationModel<T>& model, const std::vector<corpus::Batch>& batches) {
  ad::NoGradGuard no_grad;
  double weighted = 0.0;
  double tokens = 0.0;
  for (const auto& batch : batches) {
    auto fwd = model.forward(batch.source, batch.decoder_input, ForwardContexts::eval());
    const double ce = objectives::cross_entropy(fwd.logits, batch.gold, model.config().label_smoothing).item();
    double n = 0.0;
    for (auto m : batch.gold.mask) n += m;
    weighted += ce * n;
    tokens += n;
  }
  if (tokens == 0.0) throw std::invalid_argument("validation_ce: no validation tokens");
  return weighted / tokens;
}

template <typename T>
void save_parameters(const ParameterSet<T>& params, Checkpoint& ckpt) {
  for (const auto& [name, p] : params) ckpt.put<T>(name, p.shape(), p.data());
}

namespace {

bool reserved(const std::string& name) { return name.rfind("meta.", 0) == 0 || name.rfind("optim.", 0) == 0; }

}  // namespace

template <typename T>
void load_parameters(ParameterSet<T>& params, const Checkpoint& ckpt) {
  for (const auto& e : ckpt.entries) {
    if (!reserved(e.name) && !params.contains(e.name)) {
      throw CheckpointError("checkpoint: unexpected parameter '" + e.name + "'");
    }
  }
  for (auto& [name, p] : params) {
    const auto& e = ckpt.at(name);
    if (e.shape != p.shape()) {
      throw CheckpointError("checkpoint: shape mismatch for '" + name + "': " + ad::to_string(e.shape) + " vs " +
                            ad::to_string(p.shape()));
    }
    auto values = e.template values<T>();
    std::copy(values.begin(), values.end(), p.mutable_data().begin());
  }
}

template <typename T>
Checkpoint make_checkpoint(const TranslationModel<T>& model, const Adam<T>* optimizer,
                           const std::string& corpus_manifest, const std::string& train_config) {
  Checkpoint ckpt;
  ckpt.config_digest = model.config().digest();
  ckpt.put_text("meta.config", model.config().to_text());
  if (!corpus_manifest.empty()) ckpt.put_text("meta.manifest", corpus_manifest);
  if (!train_config.empty()) ckpt.put_text("meta.train", train_config);
  save_parameters(model.params(), ckpt);
  if (optimizer) optimizer->save(ckpt);
  return ckpt;
}

ModelConfig config_from_checkpoint(const Checkpoint& ckpt) {
  auto cfg = ModelConfig::from_text(ckpt.at("meta.config").text());
  if (cfg.digest() != ckpt.config_digest) throw CheckpointError("checkpoint: config digest mismatch");
  return cfg;
}

template <typename T>
Trainer<T>::Trainer(TranslationModel<T>& model, TrainRunConfig config, std::vector<corpus::ParallelExample> train)
    : model_(&model), config_(std::move(config)), train_(std::move(train)), optimizer_(model.params(), config_.adam) {
  config_.validate();
  seek(0);
}

template <typename T>
void Trainer<T>::seek(std::uint64_t done) {
  epoch_ = 0;
  batches_ = corpus::make_batches(train_, config_.max_tokens, config_.seed, epoch_);
  if (batches_.empty()) throw corpus::DataError("training set yields no batches");
  cursor_ = 0;
  while (done >= batches_.size() - cursor_) {
    done -= batches_.size() - cursor_;
    ++epoch_;
    batches_ = corpus::make_batches(train_, config_.max_tokens, config_.seed, epoch_);
    cursor_ = 0;
  }
  cursor_ = static_cast<std::size_t>(done);
}

template <typename T>
const corpus::Batch& Trainer<T>::next_batch() {
  if (cursor_ == batches_.size()) {
    ++epoch_;
    batches_ = corpus::make_batches(train_, config_.max_tokens, config_.seed, epoch_);
    cursor_ = 0;
  }
  return batches_[cursor_++];
}

template <typename T>
StepResult Trainer<T>::step() {
  const auto& batch = next_batch();
  return train_step(*model_, optimizer_, batch, config_, optimizer_.steps() + 1);
}

template <typename T>
void Trainer<T>::restore(const Checkpoint& ckpt) {
  if (ckpt.config_digest != model_->config().digest()) {
    throw CheckpointError("checkpoint was written for a different model configuration");
  }
  load_parameters(model_->params(), ckpt);
  optimizer_.load(ckpt);
  seek(optimizer_.steps());
}

Selection checkpoint_select(std::vector<CheckpointScore> scores, std::size_t last_k, std::size_t top_n,
                            bool higher_is_better) {
  if (top_n == 0 || last_k < top_n) throw std::invalid_argument("checkpoint_select: need last_k >= top_n >= 1");
  if (scores.size() < top_n) {
    throw std::invalid_argument(fmt::format("checkpoint_select: {} checkpoints available, {} required",
                                            scores.size(), top_n));
  }
  std::sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
  if (scores.size() > last_k) scores.erase(scores.begin(), scores.end() - static_cast<std::ptrdiff_t>(last_k));
  std::sort(scores.begin(), scores.end(), [higher_is_better](const auto& a, const auto& b) {
    if (a.metric != b.metric) return higher_is_better ? a.metric > b.metric : a.metric < b.metric;
    return a.step > b.step;
  });
  Selection sel;
  sel.selected.assign(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(top_n));
  double total = 0.0;
  for (const auto& s : sel.selected) total += s.metric;
  sel.mean_metric = total / static_cast<double>(top_n);
  return sel;
}

#define SLMT_INSTANTIATE(T)                                                                                    \
  template class Adam<T>;                                                                                      \
  template class Trainer<T>;                                                                                   \
  template double grad_norm(const ParameterSet<T>&);                                                           \
  template double clip_grad_norm(ParameterSet<T>&, double);                                                    \
  template StepLosses<T> compute_losses(const TranslationModel<T>&, const corpus::Batch&, const RngStreams&,  \
                                        std::uint64_t, bool);                                                  \
  template StepResult train_step(TranslationModel<T>&, Adam<T>&, const corpus::Batch&, const TrainRunConfig&, \
                                 std::uint64_t);                                                               \
  template double validation_ce(const TranslationModel<T>&, const std::vector<corpus::Batch>&);               \
  template void save_parameters(const ParameterSet<T>&, Checkpoint&);                                          \
  template void load_parameters(ParameterSet<T>&, const Checkpoint&);                                          \
  template Checkpoint make_checkpoint(const TranslationModel<T>&, const Adam<T>*, const std::string&,          \
                                      const std::string&);

SLMT_INSTANTIATE(float)
SLMT_INSTANTIATE(double)

#undef SLMT_INSTANTIATE

}  // namespace slmt::train
