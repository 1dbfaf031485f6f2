#include "filo/llm.hpp"

#include "filo/error.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>
#include <openssl/evp.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>

namespace filo {

std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

OpenAiClient::OpenAiClient(std::string base_url, std::string model, const std::string& api_key_env)
    : base_url_(std::move(base_url)), model_(std::move(model)) {
  if (const char* key = std::getenv(api_key_env.c_str())) api_key_ = key;
}

std::string OpenAiClient::complete(const std::string& prompt) {
  if (api_key_.empty()) throw IoError("no API key configured for the LLM client");
  httplib::Client cli(base_url_);
  cli.set_connection_timeout(10);
  cli.set_read_timeout(60);
  nlohmann::json body = {{"model", model_},
                         {"messages", {{{"role", "user"}, {"content", prompt}}}},
                         {"temperature", 0}};
  httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};
  auto res = cli.Post("/v1/chat/completions", headers, body.dump(), "application/json");
  if (!res) throw IoError("LLM request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) throw IoError("LLM request returned HTTP " + std::to_string(res->status));
  try {
    auto j = nlohmann::json::parse(res->body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("unexpected LLM response: ") + e.what());
  }
}

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::string ResponseCache::key(const std::string& model, const std::string& prompt) {
  return sha256_hex(model + '\0' + prompt);
}

std::optional<std::string> ResponseCache::get(const std::string& model,
                                              const std::string& prompt) const {
  const std::string k = key(model, prompt);
  {
    std::shared_lock lock(mu_);
    auto it = memory_.find(k);
    if (it != memory_.end()) return it->second;
  }
  if (dir_.empty()) return std::nullopt;
  std::ifstream f(dir_ / (k + ".json"));
  if (!f) return std::nullopt;
  try {
    nlohmann::json j;
    f >> j;
    auto response = j.at("response").get<std::string>();
    std::unique_lock lock(mu_);
    memory_.emplace(k, response);
    return response;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

void ResponseCache::put(const std::string& model, const std::string& prompt,
                        const std::string& response) {
  const std::string k = key(model, prompt);
  std::unique_lock lock(mu_);
  memory_[k] = response;
  if (dir_.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  const auto final_path = dir_ / (k + ".json");
  const auto tmp_path = dir_ / (k + ".json.tmp");
  {
    std::ofstream f(tmp_path, std::ios::trunc);
    if (!f) return;
    f << nlohmann::json{{"model", model}, {"prompt", prompt}, {"response", response}}.dump(2);
  }
  std::filesystem::rename(tmp_path, final_path, ec);
}

}  // namespace filo
