#pragma once

// Text-completion clients and the content-addressed response cache used to
// fetch per-class anomaly vocabularies.

#include <filesystem>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>

namespace filo {

class LlmClient {
 public:
  virtual ~LlmClient() = default;
  virtual std::string model() const = 0;
  // Throws on transport or API failure.
  virtual std::string complete(const std::string& prompt) = 0;
};

// Chat-completions client for OpenAI-compatible endpoints. The API key is read
// from the named environment variable at construction.
class OpenAiClient : public LlmClient {
 public:
  OpenAiClient(std::string base_url, std::string model, const std::string& api_key_env);
  std::string model() const override { return model_; }
  std::string complete(const std::string& prompt) override;
  bool has_key() const { return !api_key_.empty(); }

 private:
  std::string base_url_;
  std::string model_;
  std::string api_key_;
};

std::string sha256_hex(const std::string& data);

// Responses keyed by sha256(model, prompt). Files live under `dir` as
// <hex>.json; an in-memory layer fronts the directory. Single writer, many
// readers.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir = {});

  std::optional<std::string> get(const std::string& model, const std::string& prompt) const;
  void put(const std::string& model, const std::string& prompt, const std::string& response);

 private:
  static std::string key(const std::string& model, const std::string& prompt);

  std::filesystem::path dir_;
  mutable std::shared_mutex mu_;
  mutable std::unordered_map<std::string, std::string> memory_;
};

}  // namespace filo
