// glyphdm: dataset preparation, training, sampling, evaluation and serving.

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "glyphdm/checkpoint.hpp"
#include "glyphdm/dataset.hpp"
#include "glyphdm/diffusion.hpp"
#include "glyphdm/evaluation.hpp"
#include "glyphdm/log.hpp"
#include "glyphdm/service.hpp"
#include "glyphdm/synthetic.hpp"
#include "glyphdm/text_encoder.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace glyphdm;

namespace {

std::atomic<bool> g_stop{false};
std::atomic<bool> g_reload{false};

extern "C" void on_signal(int sig) {
  if (sig == SIGHUP) {
    g_reload = true;
  } else {
    g_stop = true;
  }
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

std::vector<std::string> split_keywords(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::string require_encoder(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("GLYPHDM_ENCODER"); env && *env) return env;
  throw std::invalid_argument("no text encoder: pass --encoder DIR or set GLYPHDM_ENCODER");
}

std::shared_ptr<const TextEncoder> open_encoder(const std::string& dir, const std::string& cache_dir) {
  std::shared_ptr<const TextEncoder> enc = BertTextEncoder::load(dir);
  if (!cache_dir.empty()) enc = std::make_shared<CachedTextEncoder>(enc, std::make_shared<EmbeddingCache>(cache_dir));
  return enc;
}

void check_device(const std::string& device) {
  if (device != "cpu") throw std::invalid_argument("device '" + device + "' is not supported by this build (use cpu)");
}

std::shared_ptr<const GlyphSampler> open_sampler(const std::string& ckpt, const std::string& encoder) {
  return load_snapshot(ckpt, open_encoder(encoder, ""))->sampler;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Impression-conditioned glyph diffusion"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Intra-op threads (0 keeps the library default)");

  // dataset
  auto* dataset = app.add_subcommand("dataset", "Corpus preparation");
  dataset->require_subcommand(1);
  std::string root, out, manifest_path, tags;
  std::uint64_t seed = 0;
  unsigned io_threads = 1;
  auto* build = dataset->add_subcommand("build", "Filter, split and preprocess a raw corpus");
  build->add_option("--root", root, "Corpus root: <font>/<Letter>.png plus tags.txt")->required();
  build->add_option("--out", out, "Output directory")->required();
  build->add_option("--seed", seed, "Split seed")->required();
  build->add_option("--tags", tags, "Optional JSON tag manifest {font_id: [keywords]}");
  build->add_option("--io-threads", io_threads, "Parallel readers");
  auto* stats = dataset->add_subcommand("stats", "Print the statistics table of a manifest");
  stats->add_option("--manifest", manifest_path)->required();
  int synth_count = 12;
  auto* synth = dataset->add_subcommand("synth", "Write a procedurally drawn demo corpus");
  synth->add_option("--out", out)->required();
  synth->add_option("--fonts", synth_count, "Number of fonts");
  synth->add_option("--seed", seed);

  // encoder
  auto* encoder_cmd = app.add_subcommand("encoder", "Text encoder utilities");
  encoder_cmd->require_subcommand(1);
  auto* desk = encoder_cmd->add_subcommand("init-desk", "Write a small random-weight encoder for offline work");
  desk->add_option("--out", out)->required();
  desk->add_option("--seed", seed);
  desk->add_option("--manifest", manifest_path, "Add this manifest's keywords to the vocabulary");
  auto* hash_cmd = encoder_cmd->add_subcommand("hash", "Print the checkpoint hash of an encoder directory");
  std::string encoder_dir;
  hash_cmd->add_option("--encoder", encoder_dir)->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the denoiser");
  std::string config_path, resume, cache_dir;
  train_cmd->add_option("--manifest", manifest_path)->required();
  train_cmd->add_option("--config", config_path, "JSON training config, optional \"unet\" object")->required();
  train_cmd->add_option("--out", out)->required();
  train_cmd->add_option("--encoder", encoder_dir, "Encoder directory (default $GLYPHDM_ENCODER)");
  train_cmd->add_option("--resume", resume, "Checkpoint to continue from");
  train_cmd->add_option("--cache", cache_dir, "Embedding cache directory (default <out>/embedding-cache)");

  // sample
  auto* sample_cmd = app.add_subcommand("sample", "Generate glyphs");
  std::string ckpt, letters = "QUICKFOX", keywords, method = "ddim";
  int steps = 100, variants = 1;
  double eta = 0.0;
  sample_cmd->add_option("--ckpt", ckpt)->required();
  sample_cmd->add_option("--letters", letters, "Capital letters, e.g. QUICKFOX or ABCHERONS");
  sample_cmd->add_option("--keywords", keywords, "Comma-separated impression keywords")->required();
  sample_cmd->add_option("--seed", seed);
  sample_cmd->add_option("--method", method)->check(CLI::IsMember({"ddim", "ddpm"}));
  sample_cmd->add_option("--steps", steps, "DDIM steps (must divide T)");
  sample_cmd->add_option("--eta", eta, "DDIM stochasticity");
  sample_cmd->add_option("--n-variants", variants);
  sample_cmd->add_option("--out", out)->required();
  sample_cmd->add_option("--encoder", encoder_dir);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "FID protocols");
  eval_cmd->require_subcommand(1);
  int64_t n_fonts = 5000, min_fonts = 200, per_keyword = 200;
  std::string extractor = "random", report;
  int64_t feature_dim = 16;
  auto add_eval_common = [&](CLI::App* c) {
    c->add_option("--ckpt", ckpt)->required();
    c->add_option("--manifest", manifest_path)->required();
    c->add_option("--seed", seed);
    c->add_option("--encoder", encoder_dir);
    c->add_option("--extractor", extractor, "\"random\" or a TorchScript feature network file");
    c->add_option("--feature-dim", feature_dim, "Random-projection width");
    c->add_option("--steps", steps, "DDIM steps");
    c->add_option("--report", report, "Write the JSON report here");
    c->add_option("--cache", cache_dir, "Real-moment cache directory");
  };
  auto* fid_cmd = eval_cmd->add_subcommand("fid", "Global FID over randomly selected fonts");
  add_eval_common(fid_cmd);
  fid_cmd->add_option("--n-fonts", n_fonts);
  auto* intra_cmd = eval_cmd->add_subcommand("intra-fid", "Mean per-keyword FID over frequent keywords");
  add_eval_common(intra_cmd);
  intra_cmd->add_option("--min-fonts", min_fonts, "Keywords must be carried by more than this many fonts");
  intra_cmd->add_option("--samples-per-keyword", per_keyword);

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "HTTP inference service");
  auto serve_opts = ServeOptions::from_env();
  std::string serve_ckpt, serve_encoder, serve_manifest;
  serve_cmd->add_option("--ckpt", serve_ckpt, "Checkpoint (default $GLYPHDM_CHECKPOINT)");
  serve_cmd->add_option("--encoder", serve_encoder, "Encoder directory (default $GLYPHDM_ENCODER)");
  serve_cmd->add_option("--manifest", serve_manifest, "Manifest for /keywords (default $GLYPHDM_MANIFEST)");
  serve_cmd->add_option("--host", serve_opts.host);
  serve_cmd->add_option("--port", serve_opts.port, "Port (default $GLYPHDM_PORT or 8080)");
  serve_cmd->add_option("--device", serve_opts.device);

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) torch::set_num_threads(threads);

  try {
    if (build->parsed()) {
      auto r = build_dataset(root, out, seed, tags.empty() ? std::nullopt : std::optional<fs::path>(tags), io_threads);
      std::cout << "loaded " << r.loaded_fonts << " fonts, kept " << r.manifest.fonts.size() << "\n"
                << format_stats_table({{"Train Set", r.train_stats}, {"Test Set", r.test_stats}});
    } else if (stats->parsed()) {
      const auto m = read_manifest(manifest_path);
      std::vector<std::vector<std::string>> tr, te;
      for (const auto& f : m.fonts) (f.split == "train" ? tr : te).push_back(f.keywords);
      std::cout << format_stats_table({{"Train Set", compute_stats(tr)}, {"Test Set", compute_stats(te)}});
    } else if (synth->parsed()) {
      for (const auto& f : synthetic_fonts(synth_count, seed)) write_synthetic_font(out, f);
      std::cout << "wrote " << synth_count << " fonts to " << out << "\n";
    } else if (desk->parsed()) {
      std::vector<std::string> words;
      if (!manifest_path.empty()) {
        for (const auto& [k, _] : keyword_counts(read_manifest(manifest_path))) {
          std::stringstream ss(k);
          for (std::string w; ss >> w;) words.push_back(w);
        }
      }
      write_desk_encoder(out, seed, words);
      std::cout << encoder_checkpoint_hash(out) << "\n";
    } else if (hash_cmd->parsed()) {
      std::cout << encoder_checkpoint_hash(encoder_dir) << "\n";
    } else if (train_cmd->parsed()) {
      const auto manifest = read_manifest(manifest_path);
      auto cfg_json = read_json(config_path);
      const auto training = TrainingConfig::from_json(cfg_json);
      const auto enc = open_encoder(require_encoder(encoder_dir),
                                    cache_dir.empty() ? (fs::path(out) / "embedding-cache").string() : cache_dir);
      auto unet_json = UNetConfig::with_base(64, static_cast<int>(enc->dim())).to_json();
      if (cfg_json.contains("unet")) {
        if (cfg_json["unet"].contains("base_channels") && !cfg_json["unet"].contains("time_embed_dim")) {
          unet_json["time_embed_dim"] = 4 * cfg_json["unet"]["base_channels"].get<int>();
        }
        unet_json.update(cfg_json["unet"]);
      }
      const auto unet = UNetConfig::from_json(unet_json);
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const auto outcome = train(training, unet, manifest, *enc, out,
                                 resume.empty() ? std::nullopt : std::optional<fs::path>(resume), &g_stop);
      std::cout << (outcome.interrupted ? "interrupted" : "finished") << " after " << outcome.epochs_completed
                << " epochs / " << outcome.steps << " steps; last checkpoint " << outcome.last_checkpoint.string()
                << "\n";
      return outcome.interrupted ? 130 : 0;
    } else if (sample_cmd->parsed()) {
      const auto sampler = open_sampler(ckpt, require_encoder(encoder_dir));
      GenerationRequest req;
      json body = {{"letters", letters}, {"keywords", split_keywords(keywords)}, {"seed", seed},
                   {"method", method},   {"n_variants", variants}};
      if (method == "ddim") body["steps"] = steps;
      req = GenerationRequest::parse(body, sampler->schedule().steps());
      auto cfg = req.sampler();
      cfg.eta = eta;
      const auto images = sampler->generate(req.letters, keywords_to_sentence(req.keywords), cfg, req.n_variants);
      fs::create_directories(out);
      std::vector<std::vector<GrayImage>> grid;
      for (int v = 0; v < req.n_variants; ++v) {
        grid.push_back(to_gray_images(images[v]));
        for (std::size_t l = 0; l < req.letters.size(); ++l) {
          write_png(fs::path(out) / (std::string(1, req.letters[l]) + "_v" + std::to_string(v) + ".png"), grid.back()[l]);
        }
      }
      write_png(fs::path(out) / "sheet.png", contact_sheet(grid));
      std::ofstream(fs::path(out) / "request.json") << req.to_json().dump(2) << "\n";
      std::cout << "wrote " << req.letters.size() * static_cast<std::size_t>(req.n_variants) << " glyphs to " << out << "\n";
    } else if (fid_cmd->parsed() || intra_cmd->parsed()) {
      const auto manifest = read_manifest(manifest_path);
      auto sampler = open_sampler(ckpt, require_encoder(encoder_dir));
      std::unique_ptr<FeatureExtractor> fx;
      if (extractor == "random") {
        fx = std::make_unique<RandomProjectionExtractor>(feature_dim, 0);
      } else {
        fx = std::make_unique<TorchScriptExtractor>(extractor);
      }
      SamplerConfig sc;
      sc.steps = steps;
      EvalOptions opts;
      opts.seed = seed;
      if (!cache_dir.empty()) opts.cache_dir = cache_dir;
      const auto gen = sampler_generator(sampler, sc);
      const auto rep = fid_cmd->parsed() ? protocol_global_fid(manifest, *fx, gen, n_fonts, opts)
                                         : protocol_intra_fid(manifest, *fx, gen, min_fonts, opts, per_keyword);
      std::cout << rep.to_json().dump(2) << "\n";
      if (!report.empty()) {
        std::ofstream(report) << rep.to_json().dump(2) << "\n";
        if (intra_cmd->parsed()) rep.write_csv(fs::path(report).replace_extension(".csv"));
      }
    } else if (serve_cmd->parsed()) {
      if (!serve_ckpt.empty()) serve_opts.checkpoint = serve_ckpt;
      if (!serve_encoder.empty()) serve_opts.encoder = serve_encoder;
      if (!serve_manifest.empty()) serve_opts.manifest = serve_manifest;
      check_device(serve_opts.device);
      if (!serve_opts.checkpoint || !serve_opts.encoder) {
        throw std::invalid_argument("serve needs a checkpoint and an encoder (flags or GLYPHDM_CHECKPOINT / GLYPHDM_ENCODER)");
      }
      auto service = std::make_shared<GlyphService>();
      if (serve_opts.manifest) service->set_keywords(keyword_counts(read_manifest(*serve_opts.manifest)));
      HttpServer server(service);
      const int port = server.bind(serve_opts.host, serve_opts.port);
      log::info("listening on " + serve_opts.host + ":" + std::to_string(port));
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::signal(SIGHUP, on_signal);
      const auto encoder = open_encoder(serve_opts.encoder->string(), "");
      const auto ckpt_path = *serve_opts.checkpoint;
      std::thread control([&] {
        try {
          service->set_snapshot(load_snapshot(ckpt_path, encoder));
          log::info("model ready: " + service->snapshot()->checkpoint_hash);
        } catch (const std::exception& e) {
          log::error(std::string("model load failed: ") + e.what());
        }
        while (!g_stop) {
          if (g_reload.exchange(false)) {
            try {
              service->set_snapshot(load_snapshot(ckpt_path, encoder));
              log::info("model reloaded: " + service->snapshot()->checkpoint_hash);
            } catch (const std::exception& e) {
              log::error(std::string("reload failed, keeping the current model: ") + e.what());
            }
          }
          std::this_thread::sleep_for(std::chrono::milliseconds(100));
        }
        server.stop();
      });
      server.serve();
      g_stop = true;
      control.join();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
