#pragma once

#include <map>
#include <mutex>
#include <string>

#include "redloop/backend.h"
#include "redloop/config.h"

namespace redloop {

// OpenAI-compatible HTTP provider:
//   POST /chat/completions        adversary generation, in-context and chat judging
//   POST /completions             fine-tuned completion judges (" 0" / " 1", logprobs)
//   POST /files                   fine-tune training upload (JSONL, see datastore)
//   POST /fine_tuning/jobs        start;  GET /fine_tuning/jobs/{id}  poll
//   GET  /fine_tuning/jobs/{id}/events   loss curve (metrics events)
//   POST /embeddings
// The API key is read from the environment variable named in the config; an
// unset variable sends no Authorization header (local providers).
//
// 429 raises RateLimitError (honouring Retry-After), 5xx and transport
// failures BackendError, other 4xx BackendFatalError.
class RemoteBackend : public ModelBackend {
 public:
  RemoteBackend(RemoteConfig config, std::string judge_system_message);

  std::string name() const override { return "remote"; }

  std::string generate_prompt(const ChatRequest& request, const std::string& model) override;
  JudgeVerdict classify(const std::string& prompt_text, const std::string& model) override;
  JudgeVerdict classify_in_context(const ChatRequest& request, const std::string& prompt_text,
                                   const std::string& model) override;
  FineTuneJob start_fine_tune(const std::string& base_model, const Dataset& dataset,
                              int epochs) override;
  FineTuneJob poll_fine_tune(const std::string& job_id) override;
  EmbeddingVector embed(const std::string& text, const std::string& model_tag) override;

 private:
  Json post_json(const std::string& path, const Json& body) const;
  Json get_json(const std::string& path) const;
  std::string upload_file(const std::string& filename, const std::string& content) const;
  FineTuneJob job_from_json(const Json& j);

  RemoteConfig config_;
  std::string judge_system_message_;
  std::string origin_;  // scheme://host[:port]
  std::string prefix_;  // path prefix, e.g. /v1
  std::string api_key_;
  std::mutex mu_;
  std::map<std::string, std::string> job_datasets_;
};

// Chat messages for a ChatRequest: system, alternating example turns, then
// the instruction (generation) or the prompt under test (classification).
Json chat_messages(const ChatRequest& request, const std::string* prompt_under_test);

// Verdict from a completion response's text and first-token logprobs.
JudgeVerdict verdict_from_completion(const Json& choice);

}  // namespace redloop
