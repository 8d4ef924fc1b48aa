#include "glyphdm/service.hpp"

#include <chrono>
#include <cstdlib>
#include <set>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "glyphdm/checkpoint.hpp"
#include "glyphdm/dataset.hpp"
#include "glyphdm/log.hpp"

namespace glyphdm {

using nlohmann::json;

// --- request -------------------------------------------------------------------

namespace {

template <typename T>
T field_as(const json& body, const char* name, const char* expected) {
  try {
    return body.at(name).get<T>();
  } catch (const json::exception&) {
    throw RequestError(name, std::string("must be ") + expected);
  }
}

}  // namespace

GenerationRequest GenerationRequest::parse(const json& body, int T) {
  if (!body.is_object()) throw RequestError("body", "must be a JSON object");
  static const std::set<std::string> known = {"letters", "keywords", "seed", "method", "steps", "n_variants"};
  for (const auto& [key, _] : body.items()) {
    if (!known.count(key)) throw RequestError(key, "unknown field");
  }
  GenerationRequest r;
  if (!body.contains("letters")) throw RequestError("letters", "is required");
  r.letters = field_as<std::string>(body, "letters", "a string");
  if (r.letters.empty()) throw RequestError("letters", "must not be empty");
  if (r.letters.size() > static_cast<std::size_t>(kMaxLetters)) {
    throw RequestError("letters", "at most " + std::to_string(kMaxLetters) + " letters");
  }
  for (char c : r.letters) {
    if (c < 'A' || c > 'Z') throw RequestError("letters", "only capital letters A-Z are allowed");
  }
  if (!body.contains("keywords")) throw RequestError("keywords", "is required");
  if (!body["keywords"].is_array()) throw RequestError("keywords", "must be a list of strings");
  for (const auto& k : body["keywords"]) {
    if (!k.is_string()) throw RequestError("keywords", "must be a list of strings");
    if (k.get<std::string>().find_first_not_of(" \t\r\n") == std::string::npos) {
      throw RequestError("keywords", "entries must not be blank");
    }
    r.keywords.push_back(k.get<std::string>());
  }
  if (r.keywords.empty()) throw RequestError("keywords", "must not be empty");
  if (body.contains("seed")) {
    if (!body["seed"].is_number_integer() || (body["seed"].is_number_integer() && !body["seed"].is_number_unsigned() &&
                                              body["seed"].get<int64_t>() < 0)) {
      throw RequestError("seed", "must be a non-negative integer");
    }
    r.seed = body["seed"].get<std::uint64_t>();
  }
  if (body.contains("method")) r.method = field_as<std::string>(body, "method", "a string");
  if (r.method != "ddim" && r.method != "ddpm") throw RequestError("method", "must be \"ddim\" or \"ddpm\"");
  if (r.method == "ddpm") r.steps = T;
  if (body.contains("steps")) {
    if (!body["steps"].is_number_integer()) throw RequestError("steps", "must be an integer");
    const auto s = body["steps"].get<int64_t>();
    if (s <= 0 || s > T) throw RequestError("steps", "must be in 1.." + std::to_string(T));
    r.steps = static_cast<int>(s);
  }
  if (r.method == "ddim" && T % r.steps != 0) throw RequestError("steps", "must divide T=" + std::to_string(T) + " for ddim");
  if (r.method == "ddpm" && r.steps != T) throw RequestError("steps", "ddpm always runs all T=" + std::to_string(T) + " steps");
  if (body.contains("n_variants")) {
    if (!body["n_variants"].is_number_integer()) throw RequestError("n_variants", "must be an integer");
    const auto n = body["n_variants"].get<int64_t>();
    if (n < 1 || n > kMaxVariants) throw RequestError("n_variants", "must be in 1.." + std::to_string(kMaxVariants));
    r.n_variants = static_cast<int>(n);
  }
  return r;
}

json GenerationRequest::to_json() const {
  return {{"letters", letters}, {"keywords", keywords}, {"seed", seed},
          {"method", method},   {"steps", steps},       {"n_variants", n_variants}};
}

SamplerConfig GenerationRequest::sampler() const {
  SamplerConfig c;
  c.method = method;
  c.steps = steps;
  c.seed = seed;
  return c;
}

// --- generation ----------------------------------------------------------------

std::shared_ptr<const ModelSnapshot> load_snapshot(const std::filesystem::path& checkpoint,
                                                   std::shared_ptr<const TextEncoder> encoder) {
  auto ckpt = load_checkpoint(checkpoint);
  if (ckpt.header.encoder_hash != encoder->checkpoint_hash()) {
    throw std::runtime_error("checkpoint " + checkpoint.string() + " was trained with encoder " +
                             ckpt.header.encoder_hash + ", but the loaded encoder is " + encoder->checkpoint_hash());
  }
  auto snap = std::make_shared<ModelSnapshot>();
  snap->encoder_hash = encoder->checkpoint_hash();
  snap->checkpoint_hash = ckpt.file_hash;
  snap->checkpoint_path = checkpoint;
  snap->sampler = std::make_shared<const GlyphSampler>(ckpt.model, ckpt.schedule, std::move(encoder));
  return snap;
}

GenerationResult run_generation(const ModelSnapshot& snapshot, const GenerationRequest& request) {
  const auto start = std::chrono::steady_clock::now();
  const auto images = snapshot.sampler->generate(request.letters, keywords_to_sentence(request.keywords),
                                                 request.sampler(), request.n_variants);
  GenerationResult result;
  result.request = request;
  result.checkpoint_hash = snapshot.checkpoint_hash;
  for (int64_t v = 0; v < images.size(0); ++v) result.images.push_back(to_gray_images(images[v]));
  result.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return result;
}

GrayImage contact_sheet(const std::vector<std::vector<GrayImage>>& grid, int gutter) {
  if (grid.empty() || grid.front().empty()) throw std::invalid_argument("contact sheet needs at least one image");
  const int cw = grid.front().front().width, ch = grid.front().front().height;
  const int cols = static_cast<int>(grid.front().size()), rows = static_cast<int>(grid.size());
  GrayImage sheet(cols * cw + (cols + 1) * gutter, rows * ch + (rows + 1) * gutter);
  for (int r = 0; r < rows; ++r) {
    if (static_cast<int>(grid[static_cast<std::size_t>(r)].size()) != cols) throw std::invalid_argument("ragged contact sheet");
    for (int c = 0; c < cols; ++c) {
      const auto& img = grid[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      if (img.width != cw || img.height != ch) throw std::invalid_argument("contact sheet images differ in size");
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) sheet.at(gutter + c * (cw + gutter) + x, gutter + r * (ch + gutter) + y) = img.at(x, y);
    }
  }
  return sheet;
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("base64 length must be a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw std::invalid_argument("invalid base64");
  std::size_t len = static_cast<std::size_t>(n);
  // EVP_DecodeBlock keeps the bytes produced by '=' padding.
  if (!text.empty() && text.back() == '=') --len;
  if (text.size() > 1 && text[text.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

// --- service -------------------------------------------------------------------

namespace {

HttpReply json_reply(int status, const json& body) { return {status, "application/json", body.dump()}; }

HttpReply error_reply(int status, const std::string& message, const std::string& field = {}) {
  json body = {{"error", message}};
  if (!field.empty()) body["field"] = field;
  return json_reply(status, body);
}

}  // namespace

void GlyphService::set_snapshot(std::shared_ptr<const ModelSnapshot> snapshot) {
  std::lock_guard lock(mutex_);
  snapshot_ = std::move(snapshot);
}

std::shared_ptr<const ModelSnapshot> GlyphService::snapshot() const {
  std::lock_guard lock(mutex_);
  return snapshot_;
}

void GlyphService::set_keywords(std::vector<std::pair<std::string, int64_t>> counts) {
  std::stable_sort(counts.begin(), counts.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  auto shared = std::make_shared<const std::vector<std::pair<std::string, int64_t>>>(std::move(counts));
  std::lock_guard lock(mutex_);
  keywords_ = std::move(shared);
}

HttpReply GlyphService::generate(const std::string& body, const std::string& accept) const {
  const auto snap = snapshot();
  if (!snap) return error_reply(503, "model not loaded");
  json parsed;
  try {
    parsed = json::parse(body);
  } catch (const json::parse_error& e) {
    return error_reply(400, std::string("body: invalid JSON (") + e.what() + ")", "body");
  }
  GenerationRequest request;
  try {
    request = GenerationRequest::parse(parsed, snap->sampler->schedule().steps());
  } catch (const RequestError& e) {
    return error_reply(400, e.what(), e.field());
  }
  const auto result = run_generation(*snap, request);
  if (accept.find("image/png") != std::string::npos) {
    const auto png = encode_png(contact_sheet(result.images));
    return {200, "image/png", std::string(png.begin(), png.end())};
  }
  json images = json::array();
  for (std::size_t v = 0; v < result.images.size(); ++v) {
    for (std::size_t l = 0; l < result.images[v].size(); ++l) {
      images.push_back({{"letter", std::string(1, request.letters[l])},
                        {"variant", v},
                        {"seed", request.seed + v},
                        {"png", base64_encode(encode_png(result.images[v][l]))}});
    }
  }
  return json_reply(200, {{"images", images},
                          {"request", request.to_json()},
                          {"checkpoint_hash", result.checkpoint_hash},
                          {"wall_ms", result.wall_ms}});
}

HttpReply GlyphService::keywords(const std::string& filter) const {
  std::shared_ptr<const std::vector<std::pair<std::string, int64_t>>> counts;
  {
    std::lock_guard lock(mutex_);
    counts = keywords_;
  }
  if (!counts) return error_reply(503, "manifest not loaded");
  json list = json::array();
  for (const auto& [k, c] : *counts) {
    if (filter.empty() || k.find(filter) != std::string::npos) list.push_back({{"keyword", k}, {"count", c}});
  }
  return json_reply(200, {{"keywords", list}});
}

HttpReply GlyphService::health() const {
  const auto snap = snapshot();
  if (!snap) return json_reply(200, {{"status", "loading"}, {"checkpoint_hash", nullptr}, {"T", nullptr}, {"encoder_hash", nullptr}});
  return json_reply(200, {{"status", "ready"},
                          {"checkpoint_hash", snap->checkpoint_hash},
                          {"T", snap->sampler->schedule().steps()},
                          {"encoder_hash", snap->encoder_hash}});
}

// --- transport -----------------------------------------------------------------

HttpServer::HttpServer(std::shared_ptr<GlyphService> service)
    : service_(std::move(service)), server_(std::make_unique<httplib::Server>()) {
  const auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body, reply.content_type);
  };
  auto svc = service_;
  server_->Post("/generate", [svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc->generate(req.body, req.get_header_value("Accept")));
  });
  server_->Get("/keywords", [svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc->keywords(req.has_param("q") ? req.get_param_value("q") : std::string()));
  });
  server_->Get("/health", [svc, send](const httplib::Request&, httplib::Response& res) { send(res, svc->health()); });
  server_->set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(json{{"error", what}}.dump(), "application/json");
  });
  server_->set_logger([](const httplib::Request& req, const httplib::Response& res) {
    log::info(json{{"method", req.method}, {"path", req.path}, {"status", res.status}, {"bytes", res.body.size()}}.dump());
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::serve() { server_->listen_after_bind(); }

void HttpServer::stop() {
  if (server_) server_->stop();
}

ServeOptions ServeOptions::from_env() {
  ServeOptions o;
  const auto env = [](const char* name) -> std::optional<std::string> {
    const char* v = std::getenv(name);
    if (v == nullptr || *v == '\0') return std::nullopt;
    return std::string(v);
  };
  if (auto v = env("GLYPHDM_CHECKPOINT")) o.checkpoint = *v;
  if (auto v = env("GLYPHDM_ENCODER")) o.encoder = *v;
  if (auto v = env("GLYPHDM_MANIFEST")) o.manifest = *v;
  if (auto v = env("GLYPHDM_HOST")) o.host = *v;
  if (auto v = env("GLYPHDM_DEVICE")) o.device = *v;
  if (auto v = env("GLYPHDM_PORT")) {
    try {
      o.port = std::stoi(*v);
    } catch (const std::exception&) {
      throw std::invalid_argument("GLYPHDM_PORT must be an integer, got '" + *v + "'");
    }
  }
  return o;
}

}  // namespace glyphdm
