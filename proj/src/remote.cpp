#include "redloop/remote.h"

#include <cmath>
#include <cstdlib>

#include <httplib.h>

#include "redloop/datastore.h"
#include "redloop/error.h"

namespace redloop {

namespace {

std::string label_token(int label) { return label == 1 ? "1" : "0"; }

[[noreturn]] void raise_http(const std::string& what, int status, const std::string& body,
                             const std::string& retry_after) {
  std::string detail = body;
  try {
    const Json j = Json::parse(body);
    if (j.contains("error") && j["error"].is_object()) detail = j["error"].value("message", body);
  } catch (const Json::exception&) {
  }
  const std::string msg = what + ": HTTP " + std::to_string(status) + ": " + detail;
  if (status == 429) {
    double after = 1.0;
    try {
      if (!retry_after.empty()) after = std::stod(retry_after);
    } catch (const std::exception&) {
    }
    throw RateLimitError(msg, after);
  }
  if (status >= 500 || status == 408 || status == 409) throw BackendError(msg);
  throw BackendFatalError(msg);
}

JobStatus map_status(const std::string& s) {
  if (s == "succeeded") return JobStatus::Succeeded;
  if (s == "failed" || s == "cancelled") return JobStatus::Failed;
  if (s == "running") return JobStatus::Running;
  return JobStatus::Pending;  // validating_files, queued, pending
}

}  // namespace

Json chat_messages(const ChatRequest& request, const std::string* prompt_under_test) {
  Json messages = Json::array();
  std::string system = request.system_message;
  if (prompt_under_test && !request.instruction.empty()) system += "\n\n" + request.instruction;
  messages.push_back({{"role", "system"}, {"content", system}});
  for (const auto& ex : request.in_context_examples) {
    messages.push_back({{"role", "user"}, {"content", ex.text}});
    messages.push_back({{"role", "assistant"}, {"content", label_token(ex.label)}});
  }
  if (prompt_under_test)
    messages.push_back({{"role", "user"}, {"content", *prompt_under_test}});
  else
    messages.push_back({{"role", "user"}, {"content", request.instruction}});
  return messages;
}

JudgeVerdict verdict_from_completion(const Json& choice) {
  const JudgeVerdict parsed = parse_verdict_text(choice.value("text", std::string()));
  const Json lp = choice.value("logprobs", Json(nullptr));
  if (!lp.is_object() || !lp.contains("top_logprobs") || !lp["top_logprobs"].is_array() ||
      lp["top_logprobs"].empty())
    return parsed;
  const Json& top = lp["top_logprobs"][0];
  double p1 = -1.0, p0 = -1.0;
  for (const auto& [token, value] : top.items()) {
    std::string t = token;
    t.erase(0, t.find_first_not_of(" \t\n"));
    if (t == "1") p1 = std::max(p1, std::exp(value.get<double>()));
    if (t == "0") p0 = std::max(p0, std::exp(value.get<double>()));
  }
  double score;
  if (p1 >= 0 && p0 >= 0) score = p1 / (p1 + p0);
  else if (p1 >= 0) score = std::min(p1, 1.0);
  else if (p0 >= 0) score = 1.0 - std::min(p0, 1.0);
  else return parsed;
  // Greedy decoding picked the parsed token; keep the score on its side.
  JudgeVerdict v = verdict_from_score(score);
  if (v.classification != parsed.classification) return parsed;
  return v;
}

RemoteBackend::RemoteBackend(RemoteConfig config, std::string judge_system_message)
    : config_(std::move(config)), judge_system_message_(std::move(judge_system_message)) {
  const std::string& url = config_.base_url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw PreconditionError("base_url needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  origin_ = url.substr(0, path_start);
  prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
}

namespace {

httplib::Client make_client(const std::string& origin, const std::string& key, double timeout_s) {
  httplib::Client cli(origin);
  const auto secs = static_cast<time_t>(timeout_s);
  const auto usecs = static_cast<time_t>((timeout_s - static_cast<double>(secs)) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  if (!key.empty()) cli.set_bearer_token_auth(key);
  return cli;
}

}  // namespace

Json RemoteBackend::post_json(const std::string& path, const Json& body) const {
  auto cli = make_client(origin_, api_key_, config_.timeout_s);
  auto res = cli.Post(prefix_ + path, body.dump(), "application/json");
  if (!res) throw BackendError("POST " + path + ": " + httplib::to_string(res.error()));
  if (res->status / 100 != 2) raise_http("POST " + path, res->status, res->body, res->get_header_value("Retry-After"));
  try {
    return Json::parse(res->body);
  } catch (const Json::parse_error& e) {
    throw BackendError("POST " + path + ": invalid JSON response: " + e.what());
  }
}

Json RemoteBackend::get_json(const std::string& path) const {
  auto cli = make_client(origin_, api_key_, config_.timeout_s);
  auto res = cli.Get(prefix_ + path);
  if (!res) throw BackendError("GET " + path + ": " + httplib::to_string(res.error()));
  if (res->status / 100 != 2) raise_http("GET " + path, res->status, res->body, res->get_header_value("Retry-After"));
  try {
    return Json::parse(res->body);
  } catch (const Json::parse_error& e) {
    throw BackendError("GET " + path + ": invalid JSON response: " + e.what());
  }
}

std::string RemoteBackend::upload_file(const std::string& filename, const std::string& content) const {
  auto cli = make_client(origin_, api_key_, config_.timeout_s);
  httplib::MultipartFormDataItems items = {
      {"purpose", "fine-tune", "", ""},
      {"file", content, filename, "application/jsonl"},
  };
  auto res = cli.Post(prefix_ + "/files", items);
  if (!res) throw BackendError("POST /files: " + httplib::to_string(res.error()));
  if (res->status / 100 != 2) raise_http("POST /files", res->status, res->body, res->get_header_value("Retry-After"));
  return Json::parse(res->body).at("id").get<std::string>();
}

std::string RemoteBackend::generate_prompt(const ChatRequest& request, const std::string& model) {
  if (request.system_message.empty()) throw PreconditionError("generate_prompt: empty system message");
  Json body{{"model", model},
            {"messages", chat_messages(request, nullptr)},
            {"temperature", request.temperature},
            {"max_tokens", request.max_tokens},
            {"seed", request.sample_nonce & 0x7fffffffffffffffULL}};
  const Json res = post_json("/chat/completions", body);
  try {
    const Json& content = res.at("choices").at(0).at("message").at("content");
    return content.is_null() ? std::string() : content.get<std::string>();
  } catch (const Json::exception& e) {
    throw BackendError(std::string("chat completion without content: ") + e.what());
  }
}

JudgeVerdict RemoteBackend::classify(const std::string& prompt_text, const std::string& model) {
  if (prompt_text.empty()) throw PreconditionError("classify: empty prompt");
  if (config_.judge_mode == "chat") {
    ChatRequest req;
    req.system_message = judge_system_message_;
    return classify_in_context(req, prompt_text, model);
  }
  Json body{{"model", model},
            {"prompt", prompt_text + std::string(kPromptSeparator)},
            {"max_tokens", 1},
            {"temperature", 0},
            {"logprobs", 2}};
  const Json res = post_json("/completions", body);
  try {
    return verdict_from_completion(res.at("choices").at(0));
  } catch (const Json::exception& e) {
    throw BackendError(std::string("completion without choices: ") + e.what());
  }
}

JudgeVerdict RemoteBackend::classify_in_context(const ChatRequest& request, const std::string& prompt_text,
                                                const std::string& model) {
  if (prompt_text.empty()) throw PreconditionError("classify_in_context: empty prompt");
  Json body{{"model", model},
            {"messages", chat_messages(request, &prompt_text)},
            {"temperature", 0},
            {"max_tokens", 1}};
  const Json res = post_json("/chat/completions", body);
  std::string text;
  try {
    const Json& content = res.at("choices").at(0).at("message").at("content");
    if (!content.is_null()) text = content.get<std::string>();
  } catch (const Json::exception& e) {
    throw BackendError(std::string("chat completion without content: ") + e.what());
  }
  return parse_verdict_text(text);
}

FineTuneJob RemoteBackend::job_from_json(const Json& j) {
  FineTuneJob job;
  job.job_id = j.at("id").get<std::string>();
  job.base_model = j.value("model", std::string());
  job.status = map_status(j.value("status", std::string("queued")));
  if (j.contains("hyperparameters") && j["hyperparameters"].is_object()) {
    const Json& e = j["hyperparameters"].value("n_epochs", Json(1));
    job.epochs = e.is_number() ? e.get<int>() : 1;
  }
  if (job.status == JobStatus::Succeeded && j.contains("fine_tuned_model") && j["fine_tuned_model"].is_string())
    job.result_model = j["fine_tuned_model"].get<std::string>();
  if (job.status == JobStatus::Succeeded && !job.result_model) {
    job.status = JobStatus::Failed;
    job.message = "job succeeded without a fine_tuned_model";
  }
  if (j.contains("error") && j["error"].is_object()) job.message = j["error"].value("message", job.message);
  std::lock_guard lock(mu_);
  if (auto it = job_datasets_.find(job.job_id); it != job_datasets_.end()) job.dataset_id = it->second;
  return job;
}

FineTuneJob RemoteBackend::start_fine_tune(const std::string& base_model, const Dataset& dataset, int epochs) {
  if (epochs < 1) throw PreconditionError("fine_tune: epochs must be >= 1");
  if (dataset.examples.empty()) throw PreconditionError("fine_tune: empty dataset");
  validate_labels(dataset);
  const std::string file_id = upload_file(safe_name(dataset.id) + ".jsonl", dataset_to_jsonl(dataset));
  Json body{{"training_file", file_id},
            {"model", base_model},
            {"hyperparameters", {{"n_epochs", epochs}}}};
  const Json res = post_json("/fine_tuning/jobs", body);
  {
    std::lock_guard lock(mu_);
    job_datasets_[res.at("id").get<std::string>()] = dataset.id;
  }
  FineTuneJob job = job_from_json(res);
  job.base_model = base_model;
  job.epochs = epochs;
  return job;
}

FineTuneJob RemoteBackend::poll_fine_tune(const std::string& job_id) {
  FineTuneJob job = job_from_json(get_json("/fine_tuning/jobs/" + job_id));
  if (job.status == JobStatus::Succeeded) {
    try {
      const Json events = get_json("/fine_tuning/jobs/" + job_id + "/events");
      for (const auto& e : events.value("data", Json::array())) {
        if (e.value("type", std::string()) != "metrics" || !e.contains("data")) continue;
        const Json& d = e["data"];
        if (d.contains("step") && d.contains("train_loss"))
          job.loss_curve.push_back({d["step"].get<int>(), d["train_loss"].get<double>()});
      }
      std::sort(job.loss_curve.begin(), job.loss_curve.end(),
                [](const LossPoint& a, const LossPoint& b) { return a.step < b.step; });
    } catch (const Error&) {
      // The curve is diagnostic; a provider without events still succeeds.
    }
  }
  return job;
}

EmbeddingVector RemoteBackend::embed(const std::string& text, const std::string& model_tag) {
  if (text.empty()) throw PreconditionError("embed: empty text");
  const Json res = post_json("/embeddings", Json{{"model", model_tag}, {"input", text}});
  try {
    return EmbeddingVector{res.at("data").at(0).at("embedding").get<std::vector<double>>(), model_tag};
  } catch (const Json::exception& e) {
    throw BackendError(std::string("embedding response malformed: ") + e.what());
  }
}

}  // namespace redloop
