#include "duet/remote_model.hpp"

#include <cstdlib>
#include <mutex>

#include <httplib.h>
#include <json.hpp>

namespace duet {

using nlohmann::json;

struct RemoteModel::Impl {
  std::mutex mu;
  std::unique_ptr<httplib::Client> client;
};

namespace {

std::unique_ptr<httplib::Client> make_client(const RemoteConfig& cfg) {
  auto c = std::make_unique<httplib::Client>(cfg.base_url);
  c->set_connection_timeout(cfg.timeout_sec, 0);
  c->set_read_timeout(cfg.timeout_sec, 0);
  const char* key =
      cfg.api_key_env.empty() ? nullptr : std::getenv(cfg.api_key_env.c_str());
  if (key != nullptr && key[0] != '\0')
    c->set_default_headers({{"Authorization", std::string("Bearer ") + key}});
  return c;
}

json post_completion(httplib::Client& client, const RemoteConfig& cfg,
                     json body) {
  auto res = client.Post(cfg.path, body.dump(), "application/json");
  if (!res)
    throw BackendUnavailable("remote backend unreachable: " + cfg.base_url +
                             " (" + httplib::to_string(res.error()) + ")");
  if (res->status != 200)
    throw BackendUnavailable("remote backend returned HTTP " +
                             std::to_string(res->status) + ": " + res->body);
  json j = json::parse(res->body, nullptr, false);
  if (j.is_discarded() || !j.contains("choices") || j["choices"].empty())
    throw UnparseableResponse("remote backend: malformed completion body");
  return j;
}

}  // namespace

RemoteModel::RemoteModel(ModelProfile profile, Token eos, RemoteConfig cfg)
    : profile_(std::move(profile)),
      eos_(eos),
      cfg_(std::move(cfg)),
      impl_(std::make_unique<Impl>()) {
  profile_.validate();
  impl_->client = make_client(cfg_);
}

RemoteModel::~RemoteModel() = default;

StepOutput RemoteModel::step(const TokenSequence& seq) const {
  json body = {
      {"model", cfg_.model},         {"prompt", seq.ids()},
      {"max_tokens", 1},             {"temperature", 0.0},
      {"logprobs", cfg_.logprobs},
  };
  json j;
  {
    std::lock_guard<std::mutex> lock(impl_->mu);
    j = post_completion(*impl_->client, cfg_, std::move(body));
  }
  const json& choice = j["choices"][0];

  StepOutput out;
  out.hidden.assign(static_cast<std::size_t>(profile_.hidden_dim), 0.0);
  out.logits.assign(static_cast<std::size_t>(profile_.vocab_size), 0.0);

  if (!choice.contains("logprobs") || !choice["logprobs"].contains("top_logprobs") ||
      choice["logprobs"]["top_logprobs"].empty())
    throw UnparseableResponse("remote backend: missing top_logprobs");
  const json& top = choice["logprobs"]["top_logprobs"][0];

  double min_lp = 0.0;
  bool any = false;
  std::vector<std::pair<std::int32_t, double>> entries;
  for (auto it = top.begin(); it != top.end(); ++it) {
    std::int32_t id;
    try {
      id = static_cast<std::int32_t>(std::stol(it.key()));
    } catch (const std::exception&) {
      continue;  // token-string keyed entry without an id; skip
    }
    if (id < 0 || id >= profile_.vocab_size) continue;
    const double lp = it.value().get<double>();
    entries.emplace_back(id, lp);
    if (!any || lp < min_lp) min_lp = lp;
    any = true;
  }
  if (!any)
    throw UnparseableResponse("remote backend: no usable logprob entries");
  const double floor = min_lp - 100.0;
  for (auto& v : out.logits) v = floor;
  for (auto [id, lp] : entries) out.logits[static_cast<std::size_t>(id)] = lp;
  out.token = Token{static_cast<std::int32_t>(argmax_lowest(out.logits))};
  return out;
}

std::string remote_complete_text(const RemoteConfig& cfg,
                                 const std::string& prompt, int max_tokens,
                                 double temperature) {
  auto client = make_client(cfg);
  json body = {
      {"model", cfg.model},
      {"prompt", prompt},
      {"max_tokens", max_tokens},
      {"temperature", temperature},
  };
  json j = post_completion(*client, cfg, std::move(body));
  const json& choice = j["choices"][0];
  if (!choice.contains("text"))
    throw UnparseableResponse("remote backend: choice without text");
  return choice["text"].get<std::string>();
}

}  // namespace duet
