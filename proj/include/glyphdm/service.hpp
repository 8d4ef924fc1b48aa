#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "glyphdm/diffusion.hpp"
#include "glyphdm/image.hpp"

namespace httplib {
class Server;
}

namespace glyphdm {

/// A request field that violates its contract; `field` names it in the 400 body.
class RequestError : public std::invalid_argument {
public:
  RequestError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

private:
  std::string field_;
};

inline constexpr int kMaxVariants = 16;
inline constexpr int kMaxLetters = 64;

struct GenerationRequest {
  std::string letters;
  std::vector<std::string> keywords;
  std::uint64_t seed = 0;
  std::string method = "ddim";
  int steps = 100;
  int n_variants = 1;

  /// Validates every field against schedule length `T`; unknown fields are rejected.
  static GenerationRequest parse(const nlohmann::json& body, int T);
  nlohmann::json to_json() const;
  SamplerConfig sampler() const;
};

/// Immutable model state shared by in-flight requests.
struct ModelSnapshot {
  std::shared_ptr<const GlyphSampler> sampler;
  std::string checkpoint_hash;
  std::string encoder_hash;
  std::filesystem::path checkpoint_path;
};

std::shared_ptr<const ModelSnapshot> load_snapshot(const std::filesystem::path& checkpoint,
                                                   std::shared_ptr<const TextEncoder> encoder);

struct GenerationResult {
  GenerationRequest request;
  std::vector<std::vector<GrayImage>> images;  // [variant][letter]
  std::string checkpoint_hash;
  double wall_ms = 0.0;
};

GenerationResult run_generation(const ModelSnapshot& snapshot, const GenerationRequest& request);

/// Variants as rows, letters as columns, white gutters between cells and around the border.
GrayImage contact_sheet(const std::vector<std::vector<GrayImage>>& grid, int gutter = 2);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

struct HttpReply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// Endpoint logic independent of the HTTP transport.
class GlyphService {
public:
  GlyphService() = default;

  /// Atomically replaces the model; requests already running keep their snapshot.
  void set_snapshot(std::shared_ptr<const ModelSnapshot> snapshot);
  std::shared_ptr<const ModelSnapshot> snapshot() const;
  void set_keywords(std::vector<std::pair<std::string, int64_t>> counts);

  HttpReply generate(const std::string& body, const std::string& accept) const;
  HttpReply keywords(const std::string& filter) const;
  HttpReply health() const;

private:
  mutable std::mutex mutex_;
  std::shared_ptr<const ModelSnapshot> snapshot_;
  std::shared_ptr<const std::vector<std::pair<std::string, int64_t>>> keywords_;
};

/// httplib server bound to a GlyphService; logs one JSON line per request.
class HttpServer {
public:
  explicit HttpServer(std::shared_ptr<GlyphService> service);
  ~HttpServer();

  /// Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void serve();
  void stop();

private:
  std::shared_ptr<GlyphService> service_;
  std::unique_ptr<httplib::Server> server_;
};

/// Settings read from GLYPHDM_CHECKPOINT, GLYPHDM_ENCODER, GLYPHDM_MANIFEST,
/// GLYPHDM_PORT, GLYPHDM_HOST and GLYPHDM_DEVICE (command-line values win).
struct ServeOptions {
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> encoder;
  std::optional<std::filesystem::path> manifest;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string device = "cpu";

  static ServeOptions from_env();
};

}  // namespace glyphdm
