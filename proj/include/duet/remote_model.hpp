#pragma once

#include <memory>
#include <string>

#include "duet/model.hpp"

namespace duet {

// Connection to an OpenAI-style completions endpoint.
//
// Requests POST {prompt: [token ids], max_tokens: 1, temperature: 0,
// logprobs: k} to `base_url + path` with an optional bearer token read from
// the environment variable named by `api_key_env`.
struct RemoteConfig {
  std::string base_url;  // e.g. "http://127.0.0.1:8080"
  std::string path = "/v1/completions";
  std::string model;     // model name sent in the request body
  std::string api_key_env = "DUET_API_KEY";
  int logprobs = 20;     // top-logprob entries requested per step
  int timeout_sec = 60;
};

// Remote autoregressive backend.
//
// Limitations relative to local table models, by design:
//  - hidden states are not exposed over the wire, so step() returns an
//    all-zero hidden vector; remote outputs are excluded from router
//    training for this reason.
//  - only the top `logprobs` logits come back; the remaining vocabulary
//    entries are filled with (min returned logprob - 100) so that logits
//    stay finite and the returned ordering is preserved.
class RemoteModel : public Model {
 public:
  RemoteModel(ModelProfile profile, Token eos, RemoteConfig cfg);
  ~RemoteModel() override;

  const ModelProfile& profile() const override { return profile_; }
  Token eos() const override { return eos_; }
  StepOutput step(const TokenSequence& seq) const override;

 private:
  ModelProfile profile_;
  Token eos_;
  RemoteConfig cfg_;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// One plain-text completion round trip against the same wire protocol; used
// by the LLM-backed verifier. Throws BackendUnavailable on transport errors.
std::string remote_complete_text(const RemoteConfig& cfg,
                                 const std::string& prompt, int max_tokens,
                                 double temperature);

}  // namespace duet
