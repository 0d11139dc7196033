#include "redloop/simulator.h"

#include <cmath>
#include <set>

#include "redloop/fsutil.h"

namespace redloop {

namespace {

Json model_json(const logistic::Model& m) { return Json{{"weights", m.weights}, {"bias", m.bias}}; }

logistic::Model model_from_json(const Json& j) {
  return logistic::Model{j.at("weights").get<std::vector<double>>(), j.at("bias").get<double>()};
}

std::uint64_t model_digest(const logistic::Model& m, Fnv1a h) {
  for (double w : m.weights) h.add(w);
  return h.add(m.bias).value();
}

std::uint64_t dataset_digest(const Dataset& d) {
  Fnv1a h;
  for (const auto& e : d.examples) h.add(e.text).add(static_cast<std::uint64_t>(e.label));
  h.add(static_cast<std::uint64_t>(d.has_tag(DatasetTag::ExternalTransfer)));
  return h.value();
}

}  // namespace

std::uint64_t request_digest(const ChatRequest& r) {
  Fnv1a h;
  h.add(r.system_message).add(r.instruction).add(r.temperature);
  h.add(static_cast<std::uint64_t>(r.max_tokens)).add(r.sample_nonce);
  for (const auto& e : r.in_context_examples) h.add(e.text).add(static_cast<std::uint64_t>(e.label));
  return h.value();
}

SimulatorBackend::SimulatorBackend(sim::WorldConfig config, std::filesystem::path state_dir)
    : world_(config), state_dir_(std::move(state_dir)) {
  JudgeRule base;
  base.kind = JudgeRule::Kind::TriggerFraction;
  base.model = logistic::zeros(world_.feature_count());
  base.prior = base.model;
  judges_[kBaseJudge] = base;
}

sim::Draw SimulatorBackend::draw(const ChatRequest& request, const std::string& model) const {
  if (request.system_message.empty())
    throw PreconditionError("generate_prompt: empty system message");
  Rng rng(Fnv1a().add(world_.config().seed).add(model).add(request_digest(request)).value());
  return world_.adversary_draw(world_.tier(request.in_context_examples.size()), rng);
}

std::string SimulatorBackend::generate_prompt(const ChatRequest& request, const std::string& model) {
  std::lock_guard lock(mu_);
  return draw(request, model).text;
}

JudgeVerdict SimulatorBackend::classify(const std::string& prompt_text, const std::string& model) {
  if (prompt_text.empty()) throw PreconditionError("classify: empty prompt");
  std::lock_guard lock(mu_);
  const JudgeRule rule = resolve_locked(model);
  const logistic::Row x = world_.featurize(prompt_text);
  if (rule.kind == JudgeRule::Kind::TriggerFraction) {
    int present = 0;
    for (int f : x) present += world_.is_overt(f) ? 1 : 0;
    return verdict_from_score(static_cast<double>(present) / world_.config().overt_features);
  }
  return verdict_from_score(logistic::predict(rule.model, x));
}

JudgeVerdict SimulatorBackend::classify_in_context(const ChatRequest& request,
                                                   const std::string& prompt_text,
                                                   const std::string& model) {
  if (prompt_text.empty()) throw PreconditionError("classify_in_context: empty prompt");
  std::lock_guard lock(mu_);
  const auto& cfg = world_.config();
  if (cfg.chat_garbage_rate > 0) {
    Rng rng(Fnv1a().add(cfg.seed).add(model).add(prompt_text)
                .add(static_cast<std::uint64_t>(request.in_context_examples.size())).value());
    if (rng.chance(cfg.chat_garbage_rate))
      throw UnparseableVerdictError("It depends on the context of the request.");
  }
  // The chat model already recognises overt triggers; each positive example
  // teaches it the harmful features it contains. Nested example lists
  // therefore give monotonically better recall and no false positives.
  std::set<int> recognised;
  for (int i = 0; i < cfg.overt_features; ++i) recognised.insert(world_.overt(i));
  for (const auto& ex : request.in_context_examples) {
    if (ex.label != 1) continue;
    for (int f : world_.vocab_features(ex.text))
      if (world_.is_harmful(f)) recognised.insert(f);
  }
  for (int f : world_.vocab_features(prompt_text))
    if (recognised.count(f)) return verdict_from_score(1.0);
  return verdict_from_score(0.0);
}

FineTuneJob SimulatorBackend::start_fine_tune(const std::string& base_model, const Dataset& dataset,
                                              int epochs) {
  if (epochs < 1) throw PreconditionError("fine_tune: epochs must be >= 1");
  if (dataset.examples.empty()) throw PreconditionError("fine_tune: empty dataset");
  validate_labels(dataset);

  std::lock_guard lock(mu_);
  const std::string job_id =
      "simft-" + hex16(Fnv1a().add(base_model).add(dataset.id).add(dataset_digest(dataset))
                           .add(static_cast<std::uint64_t>(epochs)).value());
  if (auto it = jobs_.find(job_id); it != jobs_.end()) {
    FineTuneJob pending = it->second;
    pending.status = JobStatus::Pending;
    pending.result_model.reset();
    return pending;
  }

  const JudgeRule base = resolve_locked(base_model);
  const bool logistic_base = base.kind == JudgeRule::Kind::Logistic;
  const logistic::Model start = logistic_base ? base.model : logistic::zeros(world_.feature_count());
  const logistic::Model prior =
      (logistic_base && dataset.has_tag(DatasetTag::ExternalTransfer)) ? base.model : base.prior;

  std::vector<logistic::Row> rows;
  std::vector<int> labels;
  rows.reserve(dataset.size());
  for (const auto& ex : dataset.examples) {
    rows.push_back(world_.featurize(ex.text));
    labels.push_back(ex.label);
  }
  double l2 = world_.config().judge_l2;
  if (dataset.has_tag(DatasetTag::ExternalTransfer))
    l2 = std::max(l2, world_.config().transfer_anchor * static_cast<double>(rows.size()) / epochs);
  logistic::Problem problem{rows, labels, world_.feature_count(), l2, &prior};
  const logistic::Model fitted = logistic::fit(problem).model;

  FineTuneJob job;
  job.job_id = job_id;
  job.base_model = base_model;
  job.dataset_id = dataset.id;
  job.epochs = epochs;
  job.status = JobStatus::Pending;
  // Synthetic curve: objective along a geometric path from the base judge to
  // the refit optimum; strictly decreasing by convexity.
  const double n = static_cast<double>(rows.size());
  for (int e = 1; e <= epochs; ++e) {
    double t = e == epochs ? 1.0 : 1.0 - std::pow(0.5, e);
    job.loss_curve.push_back({e, logistic::objective(problem, logistic::interpolate(start, fitted, t)) / n});
  }
  JudgeRule child{JudgeRule::Kind::Logistic, fitted, prior};
  job.result_model = store_judge_locked(child);
  jobs_[job_id] = job;
  persist("jobs", job_id, job);
  FineTuneJob pending = job;
  pending.result_model.reset();
  return pending;
}

FineTuneJob SimulatorBackend::poll_fine_tune(const std::string& job_id) {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) {
    auto j = load("jobs", job_id);
    if (!j) throw BackendFatalError("unknown fine-tune job " + job_id);
    it = jobs_.emplace(job_id, j->get<FineTuneJob>()).first;
  }
  FineTuneJob job = it->second;
  job.status = job.result_model ? JobStatus::Succeeded : JobStatus::Failed;
  return job;
}

EmbeddingVector SimulatorBackend::embed(const std::string& text, const std::string& model_tag) {
  if (text.empty()) throw PreconditionError("embed: empty text");
  return EmbeddingVector{world_.embed(text), model_tag};
}

SimulatorBackend::JudgeRule SimulatorBackend::judge_rule(const std::string& handle) {
  std::lock_guard lock(mu_);
  return resolve_locked(handle);
}

std::string SimulatorBackend::register_judge(const JudgeRule& rule) {
  std::lock_guard lock(mu_);
  return store_judge_locked(rule);
}

SimulatorBackend::JudgeRule SimulatorBackend::resolve_locked(const std::string& handle) {
  if (auto it = judges_.find(handle); it != judges_.end()) return it->second;
  if (auto j = load("judges", handle)) {
    JudgeRule r;
    r.kind = j->at("kind") == "trigger_fraction" ? JudgeRule::Kind::TriggerFraction
                                                 : JudgeRule::Kind::Logistic;
    r.model = model_from_json(j->at("model"));
    r.prior = model_from_json(j->at("prior"));
    judges_[handle] = r;
    return r;
  }
  throw BackendFatalError("unknown simulator model '" + handle + "'");
}

std::string SimulatorBackend::store_judge_locked(const JudgeRule& rule) {
  Fnv1a h;
  h.add(static_cast<std::uint64_t>(rule.kind));
  const std::string handle =
      "sim-judge-" + hex16(model_digest(rule.prior, Fnv1a().add(model_digest(rule.model, h))));
  if (!judges_.count(handle)) {
    judges_[handle] = rule;
    persist("judges", handle,
            Json{{"kind", rule.kind == JudgeRule::Kind::TriggerFraction ? "trigger_fraction" : "logistic"},
                 {"model", model_json(rule.model)},
                 {"prior", model_json(rule.prior)}});
  }
  return handle;
}

void SimulatorBackend::persist(const std::string& kind, const std::string& id, const Json& body) const {
  if (state_dir_.empty()) return;
  write_file_atomic(state_dir_ / kind / (id + ".json"), body.dump() + "\n");
}

std::optional<Json> SimulatorBackend::load(const std::string& kind, const std::string& id) const {
  if (state_dir_.empty()) return std::nullopt;
  const auto path = state_dir_ / kind / (id + ".json");
  if (!std::filesystem::exists(path)) return std::nullopt;
  return Json::parse(read_file(path));
}

}  // namespace redloop
