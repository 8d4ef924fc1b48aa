#include "glyphdm/diffusion.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <cstring>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "glyphdm/log.hpp"
#include "glyphdm/rng.hpp"

namespace glyphdm {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainingConfig::validate() const {
  if (batch_size <= 0) throw std::invalid_argument("training: batch_size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("training: learning_rate must be positive");
  if (!(lr_decay_factor > 0.0) || lr_decay_factor > 1.0) throw std::invalid_argument("training: lr_decay_factor must be in (0, 1]");
  if (lr_decay_every <= 0) throw std::invalid_argument("training: lr_decay_every must be positive");
  if (epochs <= 0) throw std::invalid_argument("training: epochs must be positive");
  if (T_train <= 1) throw std::invalid_argument("training: T_train must exceed 1");
  if (grad_clip_norm < 0.0) throw std::invalid_argument("training: grad_clip_norm must be non-negative");
  if (max_steps < 0 || keep_checkpoints < 0) throw std::invalid_argument("training: max_steps and keep_checkpoints must be non-negative");
}

json TrainingConfig::to_json() const {
  return {{"batch_size", batch_size},       {"learning_rate", learning_rate}, {"lr_decay_factor", lr_decay_factor},
          {"lr_decay_every", lr_decay_every}, {"epochs", epochs},             {"T_train", T_train},
          {"beta_start", beta_start},       {"beta_end", beta_end},         {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},       {"adam_eps", adam_eps},         {"grad_clip_norm", grad_clip_norm},
          {"max_steps", max_steps},         {"keep_checkpoints", keep_checkpoints}, {"seed", seed}};
}

TrainingConfig TrainingConfig::from_json(const json& j) {
  TrainingConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
  c.epochs = j.value("epochs", c.epochs);
  c.T_train = j.value("T_train", c.T_train);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.keep_checkpoints = j.value("keep_checkpoints", c.keep_checkpoints);
  c.seed = j.value("seed", c.seed);
  for (const auto& [key, _] : j.items()) {
    static const std::set<std::string> known = {"batch_size", "learning_rate", "lr_decay_factor", "lr_decay_every",
                                                "epochs", "T_train", "beta_start", "beta_end", "adam_beta1",
                                                "adam_beta2", "adam_eps", "grad_clip_norm", "max_steps",
                                                "keep_checkpoints", "seed", "unet"};
    if (!known.count(key)) throw std::invalid_argument("training config: unknown field '" + key + "'");
  }
  c.validate();
  return c;
}

double learning_rate_at(const TrainingConfig& cfg, int epoch) {
  return cfg.learning_rate * std::pow(cfg.lr_decay_factor, epoch / cfg.lr_decay_every);
}

NoisePredictor bind_model(UNetImpl& model, const Conditioning& cond) {
  return [&model, cond](const torch::Tensor& x, const torch::Tensor& t) { return model.forward(x, t, cond); };
}

LossSample training_loss(const torch::Tensor& x0, const NoisePredictor& model, const NoiseSchedule& schedule,
                         at::Generator& t_gen, at::Generator& eps_gen) {
  const int64_t b = x0.size(0);
  auto t = torch::randint(1, schedule.steps() + 1, {b}, t_gen, torch::kLong);
  auto eps = torch::randn(x0.sizes(), eps_gen, x0.options());
  auto x_t = q_sample(x0, t, eps, schedule);
  auto eps_hat = model(x_t, t);
  auto loss = (eps - eps_hat).pow(2).mean();
  return {loss, t, eps, x_t};
}

// --- optimizer state ---------------------------------------------------------

std::map<std::string, torch::Tensor> adam_state(torch::optim::Adam& opt, torch::nn::Module& model) {
  std::map<std::string, torch::Tensor> out;
  auto& state = opt.state();
  for (const auto& p : model.named_parameters()) {
    auto it = state.find(p.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    out[std::string(kOptimizerPrefix) + "exp_avg." + p.key()] = s.exp_avg();
    out[std::string(kOptimizerPrefix) + "exp_avg_sq." + p.key()] = s.exp_avg_sq();
  }
  return out;
}

void load_adam_state(torch::optim::Adam& opt, torch::nn::Module& model,
                     const std::map<std::string, torch::Tensor>& state, int64_t steps) {
  auto& dst = opt.state();
  dst.clear();
  std::size_t used = 0;
  for (const auto& p : model.named_parameters()) {
    const auto m = state.find(std::string(kOptimizerPrefix) + "exp_avg." + p.key());
    const auto v = state.find(std::string(kOptimizerPrefix) + "exp_avg_sq." + p.key());
    if (m == state.end() && v == state.end()) continue;
    if (m == state.end() || v == state.end()) throw std::runtime_error("optimizer state incomplete for " + p.key());
    if (!m->second.sizes().equals(p.value().sizes()) || !v->second.sizes().equals(p.value().sizes())) {
      throw std::runtime_error("optimizer state shape mismatch for " + p.key());
    }
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(steps);
    s->exp_avg(m->second.to(p.value().options()).clone());
    s->exp_avg_sq(v->second.to(p.value().options()).clone());
    dst[p.value().unsafeGetTensorImpl()] = std::move(s);
    used += 2;
  }
  if (used != state.size()) throw std::runtime_error("optimizer state names do not match the model");
}

// --- training data -----------------------------------------------------------

Conditioning TrainingSet::conditioning(const torch::Tensor& index) const {
  const auto idx = index.to(torch::kLong).contiguous();
  const auto* p = idx.data_ptr<int64_t>();
  std::vector<const EmbeddingSequence*> imps, lets;
  for (int64_t i = 0; i < idx.numel(); ++i) {
    const auto pair = static_cast<std::size_t>(p[i]);
    imps.push_back(&font_impressions.at(static_cast<std::size_t>(font_of.at(pair))));
    lets.push_back(&letter_embeddings.at(static_cast<std::size_t>(letter_of.at(pair))));
  }
  return collate(imps, lets);
}

std::string TrainingSet::describe(int64_t pair) const {
  const auto i = static_cast<std::size_t>(pair);
  return font_ids.at(static_cast<std::size_t>(font_of.at(i))) + "/" + letter_at(letter_of.at(i));
}

TrainingSet TrainingSet::from_fonts(const std::vector<std::string>& font_ids,
                                    const std::vector<std::vector<std::string>>& keywords,
                                    const std::vector<std::array<GlyphImage, kNumLetters>>& glyphs,
                                    const TextEncoder& encoder) {
  if (font_ids.size() != keywords.size() || font_ids.size() != glyphs.size()) {
    throw std::invalid_argument("training set: font ids, keywords and glyphs differ in length");
  }
  if (font_ids.empty()) throw std::invalid_argument("training set: no fonts");
  TrainingSet set;
  set.font_ids = font_ids;
  set.encoder_hash = encoder.checkpoint_hash();
  for (int l = 0; l < kNumLetters; ++l) set.letter_embeddings.push_back(encoder.embed_letter(letter_at(l)));
  const auto n_fonts = static_cast<int64_t>(font_ids.size());
  set.images = torch::empty({n_fonts * kNumLetters, 1, kGlyphSize, kGlyphSize});
  auto* out = set.images.data_ptr<float>();
  for (std::size_t f = 0; f < font_ids.size(); ++f) {
    set.sentences.push_back(keywords_to_sentence(keywords[f]));
    set.font_impressions.push_back(encoder.embed_impressions(set.sentences.back()));
    for (int l = 0; l < kNumLetters; ++l) {
      const auto& px = glyphs[f][static_cast<std::size_t>(l)].pixels;
      if (px.size() != static_cast<std::size_t>(kGlyphSize * kGlyphSize)) {
        throw std::invalid_argument("training set: glyph " + font_ids[f] + "/" + letter_at(l) + " is not 32x32");
      }
      std::copy(px.begin(), px.end(), out);
      out += px.size();
      set.font_of.push_back(static_cast<int>(f));
      set.letter_of.push_back(l);
    }
  }
  return set;
}

TrainingSet TrainingSet::from_manifest(const Manifest& manifest, const TextEncoder& encoder, const std::string& split) {
  std::vector<std::string> ids;
  std::vector<std::vector<std::string>> keywords;
  std::vector<std::array<GlyphImage, kNumLetters>> glyphs;
  for (const auto* font : manifest.fonts_in(split)) {
    ids.push_back(font->font_id);
    keywords.push_back(font->keywords);
    auto& g = glyphs.emplace_back();
    for (int l = 0; l < kNumLetters; ++l) g[static_cast<std::size_t>(l)] = manifest.load_glyph(*font, l);
  }
  if (ids.empty()) throw std::invalid_argument("manifest has no fonts in split '" + split + "'");
  return from_fonts(ids, keywords, glyphs, encoder);
}

// --- trainer -----------------------------------------------------------------

Trainer::Trainer(TrainingConfig config, UNetConfig unet, std::shared_ptr<const TrainingSet> data)
    : config_(std::move(config)), data_(std::move(data)) {
  config_.validate();
  if (!data_ || data_->size() == 0) throw std::invalid_argument("trainer: empty training set");
  if (unet.text_dim != data_->letter_embeddings.front().dim()) {
    throw std::invalid_argument("trainer: UNet text_dim " + std::to_string(unet.text_dim) +
                                " does not match encoder dim " + std::to_string(data_->letter_embeddings.front().dim()));
  }
  schedule_ = build_linear_schedule(config_.T_train, config_.beta_start, config_.beta_end);
  model_ = UNet(unet);
  initialize_weights(*model_, derive_seed(config_.seed, "init"));
  auto opts = torch::optim::AdamOptions(config_.learning_rate)
                  .betas({config_.adam_beta1, config_.adam_beta2})
                  .eps(config_.adam_eps);
  optimizer_ = std::make_unique<torch::optim::Adam>(model_->parameters(), opts);
}

bool Trainer::finished() const {
  return epoch_ >= config_.epochs || (config_.max_steps > 0 && global_step_ >= config_.max_steps);
}

double Trainer::train_step(const torch::Tensor& batch_index, at::Generator& t_gen, at::Generator& eps_gen, double lr) {
  for (auto& group : optimizer_->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  model_->train();
  const auto x0 = data_->images.index_select(0, batch_index);
  const auto cond = data_->conditioning(batch_index);
  optimizer_->zero_grad();
  auto sample = training_loss(x0, bind_model(*model_, cond), schedule_, t_gen, eps_gen);
  const double loss = sample.loss.item<double>();
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at epoch " << epoch_ << " step " << global_step_ << "; batch:";
    const auto idx = batch_index.contiguous();
    const auto n = std::min<int64_t>(idx.numel(), 8);
    for (int64_t i = 0; i < n; ++i) {
      msg << ' ' << data_->describe(idx[i].item<int64_t>()) << "@t=" << sample.t[i].item<int64_t>();
    }
    if (idx.numel() > n) msg << " ...";
    throw NonFiniteLoss(msg.str());
  }
  sample.loss.backward();
  if (config_.grad_clip_norm > 0.0) torch::nn::utils::clip_grad_norm_(model_->parameters(), config_.grad_clip_norm);
  optimizer_->step();
  ++global_step_;
  return loss;
}

std::vector<StepRecord> Trainer::run_epoch(const std::function<bool()>& should_stop) {
  std::vector<StepRecord> records;
  if (finished()) return records;
  const auto e = static_cast<std::uint64_t>(epoch_);
  auto order_gen = make_generator(derive_seed(config_.seed, "batch_order", e));
  auto t_gen = make_generator(derive_seed(config_.seed, "t_draws", e));
  auto eps_gen = make_generator(derive_seed(config_.seed, "eps_draws", e));
  const double lr = learning_rate_at(config_, epoch_);
  const int64_t n = data_->size();
  const auto order = torch::randperm(n, order_gen, torch::kLong);
  for (int64_t start = 0; start < n; start += config_.batch_size) {
    if ((should_stop && should_stop()) || (config_.max_steps > 0 && global_step_ >= config_.max_steps)) {
      return records;
    }
    const auto idx = order.slice(0, start, std::min(n, start + config_.batch_size));
    const double loss = train_step(idx, t_gen, eps_gen, lr);
    records.push_back({epoch_, global_step_, lr, loss});
  }
  ++epoch_;
  return records;
}

void Trainer::save(const fs::path& path) {
  CheckpointHeader h;
  h.unet = model_->config();
  h.schedule = schedule_.to_json();
  h.encoder_hash = data_->encoder_hash;
  h.epoch = epoch_;
  h.global_step = global_step_;
  h.seed = config_.seed;
  h.training = config_.to_json();
  h.optimizer = {{"type", "adam"},
                 {"beta1", config_.adam_beta1},
                 {"beta2", config_.adam_beta2},
                 {"eps", config_.adam_eps},
                 {"steps", global_step_}};
  save_checkpoint(path, *model_, h, adam_state(*optimizer_, *model_));
}

void Trainer::resume(const fs::path& path) {
  auto ckpt = load_checkpoint(path);
  const auto& h = ckpt.header;
  if (!(h.unet == model_->config())) throw std::runtime_error("resume: checkpoint UNet config differs from the trainer's");
  if (h.seed != config_.seed) throw std::runtime_error("resume: checkpoint seed differs from the training config");
  if (h.encoder_hash != data_->encoder_hash) throw std::runtime_error("resume: checkpoint was trained with a different text encoder");
  if (ckpt.schedule.steps() != schedule_.steps() || ckpt.schedule.beta_start() != schedule_.beta_start() ||
      ckpt.schedule.beta_end() != schedule_.beta_end()) {
    throw std::runtime_error("resume: checkpoint schedule differs from the training config");
  }
  const int saved_batch = h.training.value("batch_size", config_.batch_size);
  if (saved_batch != config_.batch_size) throw std::runtime_error("resume: batch_size differs from the checkpoint's");
  torch::NoGradGuard guard;
  for (auto& p : model_->named_parameters()) p.value().copy_(ckpt.model->named_parameters()[p.key()]);
  load_adam_state(*optimizer_, *model_, ckpt.extra, h.global_step);
  epoch_ = h.epoch;
  global_step_ = h.global_step;
}

// --- train loop --------------------------------------------------------------

namespace {

std::string epoch_file(int epoch) {
  std::ostringstream s;
  s << "checkpoint-e" << std::setw(4) << std::setfill('0') << epoch << ".safetensors";
  return s.str();
}

}  // namespace

TrainOutcome train(const TrainingConfig& config, const UNetConfig& unet, const Manifest& manifest,
                   const TextEncoder& encoder, const fs::path& out_dir, const std::optional<fs::path>& resume_from,
                   const std::atomic<bool>* stop_flag) {
  fs::create_directories(out_dir);
  auto data = std::make_shared<const TrainingSet>(TrainingSet::from_manifest(manifest, encoder, "train"));
  log::info("training on " + std::to_string(data->size()) + " glyphs from " + std::to_string(data->font_ids.size()) + " fonts");
  Trainer trainer(config, unet, data);
  if (resume_from) {
    trainer.resume(*resume_from);
    log::info("resumed at epoch " + std::to_string(trainer.epoch()) + ", step " + std::to_string(trainer.global_step()));
  }
  {
    std::ofstream(out_dir / "config.json") << json{{"training", config.to_json()}, {"unet", unet.to_json()}}.dump(2) << '\n';
  }
  const auto csv_path = out_dir / "loss.csv";
  const bool append = resume_from.has_value() && fs::exists(csv_path);
  std::ofstream csv(csv_path, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
  if (!append) csv << "epoch,step,lr,loss\n";
  csv << std::setprecision(9);

  TrainOutcome outcome;
  outcome.last_checkpoint = resume_from.value_or(fs::path{});
  const auto stop = [stop_flag] { return stop_flag && stop_flag->load(); };
  while (!trainer.finished()) {
    const int before = trainer.epoch();
    const auto records = trainer.run_epoch(stop);
    for (const auto& r : records) csv << r.epoch << ',' << r.step << ',' << r.lr << ',' << r.loss << '\n';
    csv.flush();
    if (!records.empty()) outcome.last_loss = records.back().loss;
    if (trainer.epoch() == before) {
      // Interrupted or step-capped mid-epoch: the previous epoch's checkpoint stays the resume point.
      outcome.interrupted = stop();
      break;
    }
    const auto path = out_dir / epoch_file(trainer.epoch());
    trainer.save(path);
    trainer.save(out_dir / "latest.safetensors");
    outcome.last_checkpoint = path;
    if (config.keep_checkpoints > 0 && trainer.epoch() > config.keep_checkpoints) {
      fs::remove(out_dir / epoch_file(trainer.epoch() - config.keep_checkpoints));
    }
    log::info("epoch " + std::to_string(trainer.epoch()) + " loss " + std::to_string(outcome.last_loss));
    if (stop()) {
      outcome.interrupted = true;
      break;
    }
  }
  outcome.epochs_completed = trainer.epoch();
  outcome.steps = trainer.global_step();
  return outcome;
}

// --- samplers ----------------------------------------------------------------

void SamplerConfig::validate(int T) const {
  if (method == "ddim") {
    if (steps <= 0 || T % steps != 0) {
      throw std::invalid_argument("ddim steps must be a positive divisor of T=" + std::to_string(T));
    }
    if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("ddim eta must be in [0, 1]");
  } else if (method != "ddpm") {
    throw std::invalid_argument("unknown sampling method '" + method + "' (expected ddim or ddpm)");
  }
}

std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps <= 0 || steps > T || T % steps != 0) {
    throw std::invalid_argument("ddim steps " + std::to_string(steps) + " must divide T=" + std::to_string(T));
  }
  std::vector<int> ts;
  const int stride = T / steps;
  for (int i = 1; i <= steps; ++i) ts.push_back(i * stride);
  return ts;
}

namespace {

torch::Tensor predict(const NoisePredictor& model, const torch::Tensor& x, int t) {
  auto eps = model(x, torch::full({x.size(0)}, t, torch::kLong));
  if (!torch::isfinite(eps).all().item<bool>()) {
    throw SamplingError("non-finite noise prediction at t=" + std::to_string(t));
  }
  return eps;
}

}  // namespace

torch::Tensor ddim_loop(torch::Tensor x, const NoisePredictor& model, const NoiseSchedule& schedule, int steps,
                        double eta, at::Generator* gen) {
  const auto ts = ddim_timesteps(schedule.steps(), steps);
  if (eta > 0.0 && gen == nullptr) throw std::invalid_argument("ddim with eta > 0 needs a generator");
  for (std::size_t i = ts.size(); i-- > 0;) {
    const int t = ts[i];
    const int t_prev = i > 0 ? ts[i - 1] : 0;
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    auto eps = predict(model, x, t);
    const auto x0_hat = ((x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab)).clamp(-1.0, 1.0);
    // 1/sqrt(ab) blows small eps errors up at large t; clipping keeps x_t on the data range
    eps = (x - std::sqrt(ab) * x0_hat) / std::sqrt(1.0 - ab);
    const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    x = std::sqrt(ab_prev) * x0_hat + dir * eps;
    if (sigma > 0.0) x = x + sigma * torch::randn(x.sizes(), *gen, x.options());
  }
  return x;
}

torch::Tensor ddpm_loop(torch::Tensor x, const NoisePredictor& model, const NoiseSchedule& schedule,
                        at::Generator& gen, double sigma_scale) {
  for (int t = schedule.steps(); t >= 1; --t) {
    const double ab = schedule.alpha_bar(t);
    const auto eps = predict(model, x, t);
    x = (x - schedule.beta(t) / std::sqrt(1.0 - ab) * eps) / std::sqrt(schedule.alpha(t));
    if (t > 1) x = x + sigma_scale * std::sqrt(schedule.posterior_variance(t)) * torch::randn(x.sizes(), gen, x.options());
  }
  return x;
}

namespace {

Conditioning repeat_pair(const ConditioningPair& cond, int n) {
  std::vector<const EmbeddingSequence*> imps(static_cast<std::size_t>(n), &cond.impressions);
  std::vector<const EmbeddingSequence*> lets(static_cast<std::size_t>(n), &cond.letter);
  return collate(imps, lets);
}

int image_size(const UNetImpl& model) { return model.config().image_size; }

}  // namespace

torch::Tensor sample_ddpm(int n, const ConditioningPair& cond, UNetImpl& model, const NoiseSchedule& schedule,
                          std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("sample count must be positive");
  torch::NoGradGuard guard;
  model.eval();
  auto gen = make_generator(seed);
  const int s = image_size(model);
  auto x = torch::randn({n, 1, s, s}, gen, torch::kFloat32);
  return ddpm_loop(x, bind_model(model, repeat_pair(cond, n)), schedule, gen).clamp(-1.0, 1.0);
}

torch::Tensor sample_ddim(int n, const ConditioningPair& cond, UNetImpl& model, const NoiseSchedule& schedule,
                          int steps, double eta, std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("sample count must be positive");
  torch::NoGradGuard guard;
  model.eval();
  auto gen = make_generator(seed);
  const int s = image_size(model);
  auto x = torch::randn({n, 1, s, s}, gen, torch::kFloat32);
  return ddim_loop(x, bind_model(model, repeat_pair(cond, n)), schedule, steps, eta, &gen).clamp(-1.0, 1.0);
}

std::vector<GrayImage> to_gray_images(const torch::Tensor& images) {
  if (images.dim() < 2) throw std::invalid_argument("to_gray_images: expected (N, [1,] H, W)");
  const auto h = images.size(-2), w = images.size(-1);
  auto u8 = ((images.detach().to(torch::kFloat32).clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch::kUInt8)
                .reshape({-1, h, w})
                .contiguous();
  std::vector<GrayImage> out;
  for (int64_t i = 0; i < u8.size(0); ++i) {
    GrayImage g(static_cast<int>(w), static_cast<int>(h));
    std::memcpy(g.pixels.data(), u8[i].data_ptr<std::uint8_t>(), g.pixels.size());
    out.push_back(std::move(g));
  }
  return out;
}

// --- glyph sampler -----------------------------------------------------------

GlyphSampler::GlyphSampler(UNet model, NoiseSchedule schedule, std::shared_ptr<const TextEncoder> encoder)
    : model_(std::move(model)), schedule_(std::move(schedule)), encoder_(std::move(encoder)) {
  if (!model_ || !encoder_) throw std::invalid_argument("GlyphSampler needs a model and an encoder");
  if (encoder_->dim() != model_->config().text_dim) {
    throw std::invalid_argument("encoder dim " + std::to_string(encoder_->dim()) + " does not match UNet text_dim " +
                                std::to_string(model_->config().text_dim));
  }
  for (int l = 0; l < kNumLetters; ++l) letters_[static_cast<std::size_t>(l)] = encoder_->embed_letter(letter_at(l));
  // Set once here so concurrent generate() calls never touch module state.
  model_->eval();
}

torch::Tensor GlyphSampler::generate(const std::string& letters, const std::string& sentence,
                                     const SamplerConfig& sampler, int n_variants) const {
  sampler.validate(schedule_.steps());
  if (letters.empty()) throw std::invalid_argument("letters must not be empty");
  if (n_variants <= 0) throw std::invalid_argument("n_variants must be positive");
  std::vector<const EmbeddingSequence*> lets;
  for (char c : letters) lets.push_back(&letters_.at(static_cast<std::size_t>(letter_index(c))));
  const auto imp = encoder_->embed_impressions(sentence);
  const std::vector<const EmbeddingSequence*> imps(lets.size(), &imp);
  const auto cond = collate(imps, lets);

  torch::NoGradGuard guard;
  auto predictor = bind_model(*model_.ptr(), cond);
  const int s = model_->config().image_size;
  const auto n = static_cast<int64_t>(lets.size());
  std::vector<torch::Tensor> variants;
  for (int v = 0; v < n_variants; ++v) {
    auto gen = make_generator(sampler.seed + static_cast<std::uint64_t>(v));
    auto x = torch::randn({1, 1, s, s}, gen, torch::kFloat32).expand({n, 1, s, s}).contiguous();
    auto x0 = sampler.method == "ddim" ? ddim_loop(x, predictor, schedule_, sampler.steps, sampler.eta, &gen)
                                       : ddpm_loop(x, predictor, schedule_, gen);
    variants.push_back(x0.clamp(-1.0, 1.0));
  }
  return torch::stack(variants);
}

}  // namespace glyphdm
