#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "redloop/domain.h"
#include "redloop/error.h"

namespace redloop {

struct ChatExample {
  std::string text;
  int label = 1;
};

struct ChatRequest {
  std::string system_message;
  std::vector<ChatExample> in_context_examples;  // oldest first
  std::string instruction;
  double temperature = 1.0;
  int max_tokens = 256;
  // Distinguishes otherwise identical dialogues within a round. Sent to
  // remote providers as the sampling seed.
  std::uint64_t sample_nonce = 0;
};

enum class JobStatus { Pending, Running, Succeeded, Failed };

std::string_view to_string(JobStatus s);
JobStatus job_status_from_string(std::string_view s);

struct FineTuneJob {
  std::string job_id;
  std::string base_model;
  std::string dataset_id;
  int epochs = 1;
  JobStatus status = JobStatus::Pending;
  std::vector<LossPoint> loss_curve;
  std::optional<std::string> result_model;  // present iff Succeeded
  std::string message;                      // provider detail on failure

  bool terminal() const { return status == JobStatus::Succeeded || status == JobStatus::Failed; }
};

void to_json(Json& j, const FineTuneJob& v);
void from_json(const Json& j, FineTuneJob& v);

struct EmbeddingVector {
  std::vector<double> values;
  std::string model_tag;
};

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b);

// All model computation goes through this interface. Implementations must be
// safe to call from several threads at once.
class ModelBackend {
 public:
  virtual ~ModelBackend() = default;

  virtual std::string name() const = 0;

  // One candidate prompt. May be empty or a refusal; the annotator discards
  // those. Throws BackendError (retryable) on transport failure.
  virtual std::string generate_prompt(const ChatRequest& request, const std::string& model) = 0;

  virtual JudgeVerdict classify(const std::string& prompt_text, const std::string& model) = 0;

  // Classification by a chat model shown labelled examples in its context.
  virtual JudgeVerdict classify_in_context(const ChatRequest& request,
                                           const std::string& prompt_text,
                                           const std::string& model) = 0;

  virtual FineTuneJob start_fine_tune(const std::string& base_model, const Dataset& dataset,
                                      int epochs) = 0;
  virtual FineTuneJob poll_fine_tune(const std::string& job_id) = 0;

  virtual EmbeddingVector embed(const std::string& text, const std::string& model_tag) = 0;
};

// Parses a completion into a verdict: optional whitespace, then "0" or "1",
// then optional whitespace. Anything else throws UnparseableVerdictError.
JudgeVerdict parse_verdict_text(const std::string& completion);

struct RetryPolicy {
  int max_retries = 3;
  double base_delay_s = 0.5;
  std::function<void(double)> sleep = [](double s) {
    std::this_thread::sleep_for(std::chrono::duration<double>(s));
  };
};

// Runs `op`, retrying BackendError up to policy.max_retries times with
// exponential backoff (honouring retry-after on rate limits). The final
// failure propagates.
template <class Op>
auto with_retry(const RetryPolicy& policy, Op&& op) -> decltype(op()) {
  for (int attempt = 0;; ++attempt) {
    try {
      return op();
    } catch (const RateLimitError& e) {
      if (attempt >= policy.max_retries) throw;
      double backoff = policy.base_delay_s * static_cast<double>(1 << attempt);
      policy.sleep(e.retry_after_s() > backoff ? e.retry_after_s() : backoff);
    } catch (const BackendError&) {
      if (attempt >= policy.max_retries) throw;
      policy.sleep(policy.base_delay_s * static_cast<double>(1 << attempt));
    }
  }
}

struct PollPolicy {
  double interval_s = 0.0;
  int max_polls = 100000;
  std::function<void(double)> sleep = [](double s) {
    if (s > 0) std::this_thread::sleep_for(std::chrono::duration<double>(s));
  };
};

// Starts a job and polls it to a terminal status.
FineTuneJob fine_tune(ModelBackend& backend, const std::string& base_model,
                      const Dataset& dataset, int epochs, const PollPolicy& poll = {},
                      const RetryPolicy& retry = {});

FineTuneJob wait_for_job(ModelBackend& backend, FineTuneJob job, const PollPolicy& poll = {},
                         const RetryPolicy& retry = {});

}  // namespace redloop
