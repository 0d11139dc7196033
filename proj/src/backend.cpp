#include "redloop/backend.h"

#include <cctype>
#include <cmath>

namespace redloop {

std::string_view to_string(JobStatus s) {
  switch (s) {
    case JobStatus::Pending: return "pending";
    case JobStatus::Running: return "running";
    case JobStatus::Succeeded: return "succeeded";
    case JobStatus::Failed: return "failed";
  }
  return "?";
}

JobStatus job_status_from_string(std::string_view s) {
  if (s == "pending" || s == "validating_files" || s == "queued") return JobStatus::Pending;
  if (s == "running") return JobStatus::Running;
  if (s == "succeeded") return JobStatus::Succeeded;
  if (s == "failed" || s == "cancelled") return JobStatus::Failed;
  throw SchemaError("unknown job status '" + std::string(s) + "'");
}

void to_json(Json& j, const FineTuneJob& v) {
  j = Json{{"job_id", v.job_id},
           {"base_model", v.base_model},
           {"dataset_id", v.dataset_id},
           {"epochs", v.epochs},
           {"status", to_string(v.status)},
           {"loss_curve", v.loss_curve},
           {"result_model", v.result_model ? Json(*v.result_model) : Json(nullptr)},
           {"message", v.message}};
}

void from_json(const Json& j, FineTuneJob& v) {
  v.job_id = j.at("job_id").get<std::string>();
  v.base_model = j.at("base_model").get<std::string>();
  v.dataset_id = j.at("dataset_id").get<std::string>();
  v.epochs = j.at("epochs").get<int>();
  v.status = job_status_from_string(j.at("status").get<std::string>());
  v.loss_curve = j.at("loss_curve").get<std::vector<LossPoint>>();
  const Json& r = j.at("result_model");
  v.result_model = r.is_null() ? std::nullopt : std::optional<std::string>(r.get<std::string>());
  v.message = j.value("message", "");
}

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.values.size() != b.values.size())
    throw PreconditionError("cosine_similarity: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    dot += a.values[i] * b.values[i];
    na += a.values[i] * a.values[i];
    nb += b.values[i] * b.values[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / std::sqrt(na * nb);
}

JudgeVerdict parse_verdict_text(const std::string& completion) {
  std::size_t i = 0;
  while (i < completion.size() && std::isspace(static_cast<unsigned char>(completion[i]))) ++i;
  if (i == completion.size() || (completion[i] != '0' && completion[i] != '1'))
    throw UnparseableVerdictError(completion);
  const char digit = completion[i++];
  while (i < completion.size() && std::isspace(static_cast<unsigned char>(completion[i]))) ++i;
  if (i != completion.size()) throw UnparseableVerdictError(completion);
  return verdict_from_score(digit == '1' ? 1.0 : 0.0);
}

FineTuneJob wait_for_job(ModelBackend& backend, FineTuneJob job, const PollPolicy& poll,
                         const RetryPolicy& retry) {
  for (int i = 0; !job.terminal(); ++i) {
    if (i >= poll.max_polls)
      throw BackendFatalError("fine-tune job " + job.job_id + " did not finish");
    if (i > 0) poll.sleep(poll.interval_s);
    const std::string id = job.job_id;
    job = with_retry(retry, [&] { return backend.poll_fine_tune(id); });
  }
  return job;
}

FineTuneJob fine_tune(ModelBackend& backend, const std::string& base_model,
                      const Dataset& dataset, int epochs, const PollPolicy& poll,
                      const RetryPolicy& retry) {
  if (epochs < 1) throw PreconditionError("fine_tune: epochs must be >= 1");
  if (dataset.examples.empty()) throw PreconditionError("fine_tune: empty dataset");
  validate_labels(dataset);
  FineTuneJob job =
      with_retry(retry, [&] { return backend.start_fine_tune(base_model, dataset, epochs); });
  return wait_for_job(backend, std::move(job), poll, retry);
}

}  // namespace redloop
