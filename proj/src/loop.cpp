#include "redloop/loop.h"

#include <algorithm>
#include <chrono>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <set>

#include "redloop/error.h"
#include "redloop/metrics.h"
#include "redloop/parallel.h"
#include "redloop/rng.h"

namespace redloop {

std::vector<AnnotatedPrompt> select_fooling_examples(const std::vector<AnnotatedPrompt>& history,
                                                     std::optional<int> cap) {
  std::vector<AnnotatedPrompt> out;
  for (const auto& a : history)
    if (a.human != HumanLabel::Discarded && derive_fooled(a)) out.push_back(a);
  if (cap && static_cast<int>(out.size()) > *cap)
    out.erase(out.begin(), out.end() - *cap);
  return out;
}

double compute_adversary_loss(const RoundRecord& record) {
  if (record.generated.empty()) throw PreconditionError("adversary loss of an empty round");
  std::size_t fooled = 0;
  for (const auto& a : record.generated) fooled += derive_fooled(a) ? 1 : 0;
  return static_cast<double>(fooled) / static_cast<double>(record.generated.size());
}

double compute_judge_bce(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw PreconditionError("bce: " + std::to_string(scores.size()) + " scores vs " +
                            std::to_string(labels.size()) + " labels");
  if (scores.empty()) throw PreconditionError("bce: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double p = std::clamp(scores[i], kBceEpsilon, 1.0 - kBceEpsilon);
    sum += labels[i] == 1 ? std::log(p) : std::log(1.0 - p);
  }
  return -sum / static_cast<double>(scores.size());
}

MetricsReport evaluate_judge(ModelBackend& backend, const std::string& model,
                             const Dataset& dataset, int parallelism, const RetryPolicy& retry) {
  if (dataset.examples.empty()) throw PreconditionError("evaluate: empty dataset " + dataset.id);
  std::vector<double> scores;
  try {
    scores = parallel_map<double>(dataset.size(), parallelism, [&](std::size_t i) {
      return with_retry(retry, [&] { return backend.classify(dataset.examples[i].text, model); }).score;
    });
  } catch (const UnparseableVerdictError& e) {
    throw StageError("evaluating " + model + " on " + dataset.id + ": " + e.what());
  }
  std::vector<int> labels;
  for (const auto& ex : dataset.examples) labels.push_back(ex.label);
  MetricsReport r = metrics::evaluate(scores, labels);
  r.model_version = model;
  r.test_set = dataset.id;
  return r;
}

ModelVersion child_judge(const ModelVersion& parent, const std::string& id, const FineTuneJob& job) {
  if (!job.result_model) throw PreconditionError("job " + job.job_id + " has no result model");
  ModelVersion v;
  v.id = id;
  v.kind = ModelKind::Judge;
  v.iteration = parent.iteration + 1;
  v.parent = parent.id;
  v.backend_ref = *job.result_model;
  v.training_dataset_snapshot = job.dataset_id;
  return v;
}

FinetuneOutcome run_finetune_stage(Store& store, ModelBackend& backend, const ModelVersion& judge,
                                   const std::string& dataset_id, int epochs,
                                   const std::string& new_version_id, const PollPolicy& poll,
                                   const RetryPolicy& retry) {
  if (epochs < 1) throw PreconditionError("epochs must be >= 1");
  const Dataset dataset = store.get_dataset(dataset_id);
  FineTuneJob job = fine_tune(backend, judge.backend_ref, dataset, epochs, poll, retry);
  if (job.status != JobStatus::Succeeded)
    throw StageError("fine-tune job " + job.job_id + " failed: " + job.message);
  ModelVersion v = child_judge(judge, new_version_id, job);
  store.put_version(v);
  return {v, job};
}

Dataset seeded_subset(const Dataset& dataset, int n, std::uint64_t seed) {
  if (n < 1 || static_cast<std::size_t>(n) > dataset.size())
    throw PreconditionError("subset size " + std::to_string(n) + " outside [1, " +
                            std::to_string(dataset.size()) + "]");
  Dataset out;
  out.id = dataset.id + ".subset-" + std::to_string(n) + "-" + std::to_string(seed);
  out.tags = dataset.tags;
  if (static_cast<std::size_t>(n) == dataset.size()) {
    out.examples = dataset.examples;
    return out;
  }
  std::vector<std::size_t> idx(dataset.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(Fnv1a().add(seed).add(dataset.id).value());
  for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
    out.examples.push_back(dataset.examples[idx[i]]);
  }
  return out;
}

TransferResult run_transfer_finetune(ModelBackend& backend, const std::string& base_model,
                                     const Dataset& train, const Dataset& test,
                                     const TransferConfig& config, const PollPolicy& poll,
                                     const RetryPolicy& retry) {
  if (!train.has_tag(DatasetTag::ExternalTransfer))
    throw PreconditionError("transfer dataset " + train.id + " is not tagged external_transfer");
  if (config.epochs < 1) throw PreconditionError("epochs must be >= 1");
  validate_labels(train);
  const Dataset subset = seeded_subset(train, config.subset_size, config.seed);
  TransferResult r;
  r.base_model = base_model;
  r.job = fine_tune(backend, base_model, subset, config.epochs, poll, retry);
  if (r.job.status != JobStatus::Succeeded)
    throw StageError("fine-tune job " + r.job.job_id + " failed: " + r.job.message);
  r.report = evaluate_judge(backend, *r.job.result_model, test, 4, retry);
  return r;
}

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::InitialFineTune: return "initial_finetune";
    case Stage::Evaluate: return "evaluate";
    case Stage::Prompting: return "prompting";
    case Stage::FineTune: return "finetune";
    case Stage::Completed: return "completed";
  }
  return "?";
}

Stage stage_from_string(std::string_view s) {
  for (Stage v : {Stage::InitialFineTune, Stage::Evaluate, Stage::Prompting, Stage::FineTune,
                  Stage::Completed})
    if (to_string(v) == s) return v;
  throw SchemaError("unknown stage '" + std::string(s) + "'");
}

void to_json(Json& j, const RunStatus& v) {
  j = Json{{"run_id", v.run_id},
           {"stage", to_string(v.stage)},
           {"round_index", v.round_index},
           {"iteration", v.iteration},
           {"prompts_labelled", v.prompts_labelled},
           {"quota", v.quota},
           {"pending", v.pending},
           {"discarded", v.discarded},
           {"paused", v.paused},
           {"suspended_reason", v.suspended_reason ? Json(*v.suspended_reason) : Json(nullptr)},
           {"judge_version", v.judge_version},
           {"adversary_version", v.adversary_version}};
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t dataset_digest(const Dataset& d) {
  Fnv1a h;
  for (const auto& e : d.examples) h.add(e.prompt_id).add(e.text).add(static_cast<std::uint64_t>(e.label));
  return h.value();
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

// Stores a version, tolerating an identical copy left by an interrupted step.
void ensure_version(Store& store, const ModelVersion& v) {
  if (store.has_version(v.id)) {
    if (!(store.get_version(v.id) == v))
      throw StageError("version " + v.id + " already exists with different content");
    return;
  }
  store.put_version(v);
}

}  // namespace

RunEngine::RunEngine(Store& store, ModelBackend& backend, std::string run_id, RunConfig config,
                     EngineOptions options)
    : store_(store),
      backend_(backend),
      run_id_(std::move(run_id)),
      config_(std::move(config)),
      options_(std::move(options)) {}

std::string RunEngine::accumulated_id() const { return run_id_ + ".accumulated"; }
std::string RunEngine::train_snapshot_id(int iteration) const {
  return run_id_ + ".train-" + std::to_string(iteration);
}

std::uint64_t RunEngine::holdout_digest() const {
  return dataset_digest(store_.get_dataset(config_.holdout_dataset_id));
}

std::unique_ptr<RunEngine> RunEngine::create(Store& store, ModelBackend& backend, RunConfig config,
                                             EngineOptions options) {
  config.validate();
  if (!store.has_dataset(config.seed_dataset_id))
    throw PreconditionError("seed dataset '" + config.seed_dataset_id + "' not found");
  if (!store.has_dataset(config.holdout_dataset_id))
    throw PreconditionError("holdout dataset '" + config.holdout_dataset_id + "' not found");
  const Dataset seed = store.get_dataset(config.seed_dataset_id);
  const Dataset holdout = store.get_dataset(config.holdout_dataset_id);
  if (!holdout.has_tag(DatasetTag::HoldoutTest))
    throw PreconditionError("dataset '" + holdout.id + "' is not tagged holdout_test");
  if (seed.has_tag(DatasetTag::HoldoutTest))
    throw PreconditionError("seed dataset '" + seed.id + "' is tagged holdout_test");
  if (seed.examples.empty()) throw PreconditionError("seed dataset is empty");
  std::set<std::string> seed_ids;
  for (const auto& e : seed.examples) seed_ids.insert(e.prompt_id);
  for (const auto& e : holdout.examples)
    if (seed_ids.count(e.prompt_id))
      throw PreconditionError("prompt '" + e.prompt_id + "' is in both seed and holdout");
  validate_labels(seed);
  validate_labels(holdout);

  const std::string id = store.allocate_run_id();
  std::unique_ptr<RunEngine> engine(new RunEngine(store, backend, id, config, std::move(options)));
  engine->seed_size_ = seed.size();
  engine->holdout_digest_ = hex16(dataset_digest(holdout));
  Dataset acc{engine->accumulated_id(), seed.examples,
              {DatasetTag::SeedTrain, DatasetTag::RoundAccumulated}};
  store.put_dataset(acc);
  std::lock_guard lock(engine->mu_);
  engine->persist_locked("created");
  return engine;
}

std::unique_ptr<RunEngine> RunEngine::open(Store& store, ModelBackend& backend,
                                           const std::string& run_id, EngineOptions options) {
  auto state = store.get_run_state(run_id);
  if (!state) throw NotFoundError("run '" + run_id + "' not found");
  RunConfig config = state->at("config").get<RunConfig>();
  std::unique_ptr<RunEngine> engine(new RunEngine(store, backend, run_id, config, std::move(options)));
  engine->load_state(*state);
  return engine;
}

Json RunEngine::state_json_locked() const {
  Json pending = Json::array();
  for (const auto& p : pending_)
    pending.push_back({{"prompt", p.prompt}, {"judge", p.judge}, {"judged_at", p.judged_at}});
  Json round = nullptr;
  if (round_) {
    round = Json{{"index", round_->index},
                 {"adversary_version", round_->adversary_version},
                 {"judge_before", round_->judge_before},
                 {"generated", round_->generated},
                 {"discards", round_->discards},
                 {"dialogues", round_->dialogues}};
  }
  return Json{{"run_id", run_id_},
              {"config", config_},
              {"stage", to_string(stage_)},
              {"iteration", iteration_},
              {"clock", clock_},
              {"next_prompt", next_prompt_},
              {"judge_version", judge_version_},
              {"holdout_digest", holdout_digest_},
              {"seed_size", seed_size_},
              {"job", job_ ? Json(*job_) : Json(nullptr)},
              {"pending", pending},
              {"round", round},
              {"paused", paused_},
              {"suspended", suspended_ ? Json(*suspended_) : Json(nullptr)}};
}

void RunEngine::load_state(const Json& j) {
  std::lock_guard lock(mu_);
  stage_ = stage_from_string(j.at("stage").get<std::string>());
  iteration_ = j.at("iteration").get<int>();
  clock_ = j.at("clock").get<Tick>();
  next_prompt_ = j.at("next_prompt").get<std::int64_t>();
  judge_version_ = j.at("judge_version").get<std::string>();
  holdout_digest_ = j.at("holdout_digest").get<std::string>();
  seed_size_ = j.at("seed_size").get<std::size_t>();
  job_.reset();
  if (!j.at("job").is_null()) job_ = j.at("job").get<FineTuneJob>();
  pending_.clear();
  for (const auto& p : j.at("pending"))
    pending_.push_back({p.at("prompt").get<Prompt>(), p.at("judge").get<JudgeVerdict>(),
                        p.at("judged_at").get<Tick>()});
  round_.reset();
  if (!j.at("round").is_null()) {
    const Json& r = j.at("round");
    RoundState s;
    s.index = r.at("index").get<int>();
    s.adversary_version = r.at("adversary_version").get<std::string>();
    s.judge_before = r.at("judge_before").get<std::string>();
    s.generated = r.at("generated").get<std::vector<AnnotatedPrompt>>();
    s.discards = r.at("discards").get<std::vector<Json>>();
    s.dialogues = r.at("dialogues").get<int>();
    round_ = std::move(s);
  }
  paused_ = j.at("paused").get<bool>();
  suspended_.reset();
  if (!j.at("suspended").is_null()) suspended_ = j.at("suspended").get<std::string>();

  history_.clear();
  label_index_.clear();
  for (const auto& rec : store_.rounds(run_id_))
    for (const auto& a : rec.generated) {
      history_.push_back(a);
      label_index_[a.prompt.id] = {a.human, true};
    }
  for (const auto& d : store_.discards(run_id_))
    label_index_[d.at("prompt_id").get<std::string>()] = {HumanLabel::Discarded, true};
  if (round_) {
    for (const auto& a : round_->generated) label_index_[a.prompt.id] = {a.human, false};
    for (const auto& d : round_->discards)
      label_index_[d.at("prompt_id").get<std::string>()] = {HumanLabel::Discarded, false};
  }
}

void RunEngine::persist_locked(const std::string& tag) {
  store_.put_run_state(run_id_, state_json_locked());
  if (options_.on_boundary) options_.on_boundary(tag);
}

void RunEngine::fail_locked(const std::string& reason, const std::string& tag) {
  suspended_ = reason;
  ++input_seq_;
  persist_locked(tag);
  input_cv_.notify_all();
}

RunStatus RunEngine::status() const {
  std::lock_guard lock(mu_);
  RunStatus s;
  s.run_id = run_id_;
  s.stage = stage_;
  s.iteration = iteration_;
  s.round_index = round_ ? round_->index : iteration_;
  s.quota = config_.prompts_per_round;
  s.prompts_labelled = round_ ? static_cast<int>(round_->generated.size()) : 0;
  s.discarded = round_ ? static_cast<int>(round_->discards.size()) : 0;
  s.pending = static_cast<int>(pending_.size());
  s.paused = paused_;
  s.suspended_reason = suspended_;
  s.judge_version = judge_version_;
  if (round_) s.adversary_version = round_->adversary_version;
  return s;
}

bool RunEngine::step(Annotator* annotator) {
  Stage stage;
  {
    std::lock_guard lock(mu_);
    if (paused_ || suspended_ || stage_ == Stage::Completed) return false;
    stage = stage_;
  }
  try {
    switch (stage) {
      case Stage::InitialFineTune: return step_initial_finetune();
      case Stage::Evaluate: return step_evaluate();
      case Stage::Prompting: return step_prompting(annotator);
      case Stage::FineTune: return step_finetune();
      case Stage::Completed: return false;
    }
  } catch (const std::exception& e) {
    std::lock_guard lock(mu_);
    fail_locked(std::string(to_string(stage)) + ": " + e.what(), "suspended");
  }
  return false;
}

RunStatus RunEngine::drive(Annotator* annotator) {
  while (step(annotator)) {
  }
  return status();
}

bool RunEngine::step_initial_finetune() {
  const std::string snapshot = train_snapshot_id(0);
  if (!store_.has_dataset(snapshot)) {
    Dataset seed = store_.get_dataset(config_.seed_dataset_id);
    store_.put_dataset(Dataset{snapshot, seed.examples, {DatasetTag::SeedTrain}});
  }
  return drive_job(config_.judge_base_model, snapshot, config_.initial_finetune_epochs,
                   run_id_ + ".judge-0", true);
}

bool RunEngine::step_finetune() {
  std::string base;
  int next;
  {
    std::lock_guard lock(mu_);
    next = iteration_ + 1;
    base = judge_version_;
  }
  const std::string snapshot = train_snapshot_id(next);
  if (!store_.has_dataset(snapshot)) {
    Dataset acc = store_.get_dataset(accumulated_id());
    store_.put_dataset(Dataset{snapshot, acc.examples, {DatasetTag::RoundAccumulated}});
  }
  const ModelVersion parent = store_.get_version(base);
  return drive_job(parent.backend_ref, snapshot, config_.finetune_epochs_per_round,
                   run_id_ + ".judge-" + std::to_string(next), false);
}

bool RunEngine::drive_job(const std::string& base_model, const std::string& dataset_id, int epochs,
                          const std::string& new_id, bool initial) {
  std::optional<FineTuneJob> job;
  {
    std::lock_guard lock(mu_);
    job = job_;
  }
  if (!job) {
    const Dataset dataset = store_.get_dataset(dataset_id);
    FineTuneJob started = with_retry(options_.retry,
                                     [&] { return backend_.start_fine_tune(base_model, dataset, epochs); });
    std::lock_guard lock(mu_);
    job_ = started;
    persist_locked(initial ? "initial-finetune-started" : "finetune-started");
    return true;
  }
  if (!job->terminal()) {
    FineTuneJob polled = with_retry(options_.retry, [&] { return backend_.poll_fine_tune(job->job_id); });
    if (!polled.terminal()) options_.poll.sleep(options_.poll.interval_s);
    if (polled.dataset_id.empty()) polled.dataset_id = job->dataset_id;
    if (polled.base_model.empty()) polled.base_model = job->base_model;
    std::lock_guard lock(mu_);
    job_ = polled;
    if (polled.terminal()) persist_locked("finetune-polled");
    return true;
  }
  if (job->status == JobStatus::Failed) {
    std::lock_guard lock(mu_);
    job_.reset();
    fail_locked("fine-tune job " + job->job_id + " failed: " + job->message, "suspended");
    return false;
  }

  ModelVersion version;
  if (initial) {
    version.id = new_id;
    version.kind = ModelKind::Judge;
    version.iteration = 0;
    version.backend_ref = *job->result_model;
    version.training_dataset_snapshot = dataset_id;
  } else {
    std::string parent_id;
    {
      std::lock_guard lock(mu_);
      parent_id = judge_version_;
    }
    version = child_judge(store_.get_version(parent_id), new_id, *job);
    version.training_dataset_snapshot = dataset_id;
  }
  ensure_version(store_, version);

  std::lock_guard lock(mu_);
  if (!initial) {
    RoundRecord rec;
    rec.round_index = round_->index;
    rec.generated = round_->generated;
    rec.discarded_count = static_cast<int>(round_->discards.size());
    rec.adversary_loss = compute_adversary_loss(rec);
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& a : rec.generated) {
      scores.push_back(a.judge.score);
      labels.push_back(a.human == HumanLabel::Problematic ? 1 : 0);
    }
    rec.judge_bce = compute_judge_bce(scores, labels);
    rec.adversary_version = round_->adversary_version;
    rec.judge_version_before = round_->judge_before;
    rec.judge_version_after = version.id;
    rec.finetune_loss_curve = job->loss_curve;
    if (store_.rounds(run_id_).size() < static_cast<std::size_t>(rec.round_index))
      store_.append_round(run_id_, rec);
    for (const auto& a : rec.generated) {
      history_.push_back(a);
      label_index_[a.prompt.id].finalised = true;
    }
    for (const auto& d : round_->discards)
      label_index_[d.at("prompt_id").get<std::string>()].finalised = true;
    round_.reset();
    iteration_ += 1;
  }
  judge_version_ = version.id;
  job_.reset();
  stage_ = Stage::Evaluate;
  persist_locked(initial ? "initial-finetune-done" : "finetune-done");
  return true;
}

bool RunEngine::step_evaluate() {
  std::string judge_id;
  int iteration;
  {
    std::lock_guard lock(mu_);
    judge_id = judge_version_;
    iteration = iteration_;
  }
  // Loop-level audit: the holdout must be exactly what it was at run start.
  if (hex16(holdout_digest()) != holdout_digest_)
    throw StageError("holdout dataset '" + config_.holdout_dataset_id + "' changed during the run");

  const ModelVersion judge = store_.get_version(judge_id);
  const Dataset holdout = store_.get_dataset(config_.holdout_dataset_id);
  MetricsReport report =
      evaluate_judge(backend_, judge.backend_ref, holdout, config_.parallelism, options_.retry);
  report.iteration = iteration;
  report.model_version = judge.id;
  report.test_set = holdout.id;
  if (store_.metrics(run_id_).size() <= static_cast<std::size_t>(iteration))
    store_.append_metrics(run_id_, report);

  if (iteration >= config_.rounds) {
    std::lock_guard lock(mu_);
    stage_ = Stage::Completed;
    persist_locked("completed");
    input_cv_.notify_all();
    return false;
  }

  ModelVersion adversary;
  adversary.id = run_id_ + ".adversary-" + std::to_string(iteration);
  adversary.kind = ModelKind::Adversary;
  adversary.iteration = iteration;
  if (iteration > 0) adversary.parent = run_id_ + ".adversary-" + std::to_string(iteration - 1);
  adversary.backend_ref = config_.adversary_model;
  {
    std::lock_guard lock(mu_);
    for (const auto& a : select_fooling_examples(history_, config_.example_pool_cap))
      adversary.example_pool_snapshot.push_back(a.prompt.id);
  }
  ensure_version(store_, adversary);

  std::lock_guard lock(mu_);
  RoundState r;
  r.index = iteration + 1;
  r.adversary_version = adversary.id;
  r.judge_before = judge_id;
  round_ = std::move(r);
  stage_ = Stage::Prompting;
  persist_locked("evaluate-done");
  return true;
}

std::vector<ChatExample> RunEngine::pool_examples(const ModelVersion& adversary) const {
  std::map<std::string, const AnnotatedPrompt*> by_id;
  for (const auto& a : history_) by_id[a.prompt.id] = &a;
  std::vector<ChatExample> out;
  for (const auto& id : adversary.example_pool_snapshot) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw StageError("pool prompt '" + id + "' not in run history");
    out.push_back({it->second->prompt.text, 1});
  }
  return out;
}

namespace {

struct Dialogue {
  std::string text;
  std::optional<JudgeVerdict> verdict;
};

}  // namespace

bool RunEngine::step_prompting(Annotator* annotator) {
  const int quota = config_.prompts_per_round;
  std::vector<ChatRequest> requests;
  std::string judge_model;
  {
    std::unique_lock lock(mu_);
    if (!round_) throw StageError("prompting without an open round");
    const int labelled = static_cast<int>(round_->generated.size());
    if (labelled == quota && pending_.empty()) {
      finish_prompting_locked();
      persist_locked("prompting-done");
      return true;
    }
    const int max_discards = config_.max_discards_factor * quota;
    if (static_cast<int>(round_->discards.size()) >= max_discards) {
      const std::string msg = "quota starvation: " + std::to_string(round_->discards.size()) +
                              " discarded generations in round " + std::to_string(round_->index) +
                              " with " + std::to_string(labelled) + " of " + std::to_string(quota) +
                              " labelled";
      throw QuotaStarvationError(msg);
    }
    const int needed = quota - labelled - static_cast<int>(pending_.size());
    if (needed == 0) {
      if (!annotator) return false;
      while (!pending_.empty()) apply_label_locked(0, annotator->label(pending_.front().prompt));
      persist_locked("labelled");
      return true;
    }
    const ModelVersion adversary = store_.get_version(round_->adversary_version);
    const std::vector<ChatExample> pool = pool_examples(adversary);
    judge_model = store_.get_version(round_->judge_before).backend_ref;
    const int batch = std::min(needed, config_.parallelism);
    for (int i = 0; i < batch; ++i) {
      ChatRequest req;
      req.system_message = config_.adversary_system_message;
      req.in_context_examples = pool;
      req.instruction = config_.adversary_instruction;
      req.temperature = config_.temperature;
      req.max_tokens = config_.max_tokens;
      req.sample_nonce = Fnv1a()
                             .add(config_.seed)
                             .add(static_cast<std::uint64_t>(round_->index))
                             .add(static_cast<std::uint64_t>(round_->dialogues + i))
                             .value();
      requests.push_back(std::move(req));
    }
  }

  const std::string adversary_model = config_.adversary_model;
  std::vector<Dialogue> results =
      parallel_map<Dialogue>(requests.size(), config_.parallelism, [&](std::size_t i) {
        Dialogue d;
        d.text = with_retry(options_.retry,
                            [&] { return backend_.generate_prompt(requests[i], adversary_model); });
        if (blank(d.text)) return d;
        try {
          d.verdict = with_retry(options_.retry, [&] { return backend_.classify(d.text, judge_model); });
        } catch (const UnparseableVerdictError&) {
          // Left without a verdict: discarded below rather than guessed.
        }
        return d;
      });

  std::lock_guard lock(mu_);
  for (auto& d : results) {
    round_->dialogues += 1;
    const Tick created = ++clock_;
    char buf[32];
    std::snprintf(buf, sizeof buf, ".p%05lld", static_cast<long long>(next_prompt_++));
    const std::string id = run_id_ + buf;
    const auto discard = [&](const std::string& reason) {
      round_->discards.push_back(Json{{"prompt_id", id},
                                      {"text", d.text},
                                      {"reason", reason},
                                      {"round", round_->index},
                                      {"at", created}});
      label_index_[id] = {HumanLabel::Discarded, false};
    };
    if (blank(d.text)) {
      discard("empty generation");
      continue;
    }
    if (!d.verdict) {
      discard("unparseable judge verdict");
      continue;
    }
    Prompt p = Prompt::make(id, d.text, PromptSource::AdversaryGenerated, round_->index, created);
    pending_.push_back({std::move(p), *d.verdict, ++clock_});
  }
  if (annotator)
    while (!pending_.empty()) apply_label_locked(0, annotator->label(pending_.front().prompt));
  persist_locked("prompting");
  return true;
}

void RunEngine::apply_label_locked(std::size_t pending_index, HumanLabel label) {
  PendingAnnotation p = std::move(pending_[pending_index]);
  const std::string id = p.prompt.id;
  pending_.erase(pending_.begin() + static_cast<std::ptrdiff_t>(pending_index));
  const Tick at = ++clock_;
  if (label == HumanLabel::Discarded) {
    round_->discards.push_back(Json{{"prompt_id", p.prompt.id},
                                    {"text", p.prompt.text},
                                    {"reason", "annotator"},
                                    {"round", round_->index},
                                    {"at", at}});
  } else {
    AnnotatedPrompt a;
    a.prompt = std::move(p.prompt);
    a.human = label;
    a.judge = p.judge;
    a.adversary_version = round_->adversary_version;
    a.judge_version = round_->judge_before;
    a.judged_at = p.judged_at;
    a.labelled_at = at;
    round_->generated.push_back(std::move(a));
  }
  label_index_[id] = {label, false};
  ++input_seq_;
  input_cv_.notify_all();
}

void RunEngine::finish_prompting_locked() {
  const int quota = config_.prompts_per_round;
  const std::size_t before = seed_size_ + static_cast<std::size_t>(round_->index - 1) * quota;
  const std::size_t after = before + static_cast<std::size_t>(quota);
  const Dataset acc = store_.get_dataset(accumulated_id());
  if (acc.has_tag(DatasetTag::HoldoutTest)) throw ImmutableError("accumulated dataset is a holdout");
  if (acc.size() == before) {
    std::vector<Example> add;
    for (const auto& a : round_->generated)
      add.push_back({a.prompt.id, a.prompt.text, a.human == HumanLabel::Problematic ? 1 : 0});
    store_.append_to_dataset(acc.id, add);
  } else if (acc.size() != after) {
    throw StageError("accumulated dataset has " + std::to_string(acc.size()) + " examples, expected " +
                     std::to_string(before));
  }
  std::size_t logged = 0;
  for (const auto& d : store_.discards(run_id_))
    if (d.at("round").get<int>() == round_->index) ++logged;
  for (std::size_t i = logged; i < round_->discards.size(); ++i)
    store_.append_discard(run_id_, round_->discards[i]);
  stage_ = Stage::FineTune;
}

std::optional<PendingAnnotation> RunEngine::next_annotation() const {
  std::lock_guard lock(mu_);
  if (pending_.empty()) return std::nullopt;
  return pending_.front();
}

std::size_t RunEngine::queue_length() const {
  std::lock_guard lock(mu_);
  return pending_.size();
}

bool RunEngine::knows_prompt(const std::string& prompt_id) const {
  std::lock_guard lock(mu_);
  if (label_index_.count(prompt_id)) return true;
  return std::any_of(pending_.begin(), pending_.end(),
                     [&](const PendingAnnotation& p) { return p.prompt.id == prompt_id; });
}

std::optional<HumanLabel> RunEngine::recorded_label(const std::string& prompt_id) const {
  std::lock_guard lock(mu_);
  auto it = label_index_.find(prompt_id);
  if (it == label_index_.end()) return std::nullopt;
  return it->second.label;
}

LabelOutcome RunEngine::submit_label(const std::string& prompt_id, HumanLabel label) {
  std::lock_guard lock(mu_);
  for (std::size_t i = 0; i < pending_.size(); ++i) {
    if (pending_[i].prompt.id != prompt_id) continue;
    apply_label_locked(i, label);
    if (stage_ == Stage::Prompting && pending_.empty() &&
        static_cast<int>(round_->generated.size()) == config_.prompts_per_round) {
      try {
        finish_prompting_locked();
        persist_locked("prompting-done");
      } catch (const std::exception& e) {
        fail_locked(std::string("prompting: ") + e.what(), "suspended");
      }
    } else {
      persist_locked("labelled");
    }
    return LabelOutcome::Accepted;
  }
  auto it = label_index_.find(prompt_id);
  if (it == label_index_.end()) throw NotFoundError("prompt '" + prompt_id + "' is not awaiting a label");
  if (it->second.label == label) return LabelOutcome::Duplicate;
  if (it->second.finalised)
    throw ConflictError("prompt '" + prompt_id + "' belongs to a finalised round (labelled " +
                        std::string(to_string(it->second.label)) + ")");
  throw ConflictError("prompt '" + prompt_id + "' already labelled " +
                      std::string(to_string(it->second.label)));
}

bool RunEngine::wait_for_input(double timeout_s) {
  std::unique_lock lock(mu_);
  const std::uint64_t seen = input_seq_;
  return input_cv_.wait_for(lock, std::chrono::duration<double>(timeout_s),
                            [&] { return input_seq_ != seen; });
}

void RunEngine::pause() {
  std::lock_guard lock(mu_);
  if (paused_) return;
  paused_ = true;
  ++input_seq_;
  persist_locked("paused");
  input_cv_.notify_all();
}

void RunEngine::resume() {
  std::lock_guard lock(mu_);
  if (!paused_ && !suspended_) return;
  paused_ = false;
  suspended_.reset();
  ++input_seq_;
  persist_locked("resumed");
  input_cv_.notify_all();
}

void RunEngine::suspend(const std::string& reason) {
  std::lock_guard lock(mu_);
  fail_locked(reason, "suspended");
}

}  // namespace redloop
