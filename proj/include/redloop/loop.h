#pragma once

#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "redloop/backend.h"
#include "redloop/config.h"
#include "redloop/datastore.h"
#include "redloop/sim_world.h"

namespace redloop {

// Fooled entries of `history` in chronological order, keeping only the most
// recent `cap` when capped.
std::vector<AnnotatedPrompt> select_fooling_examples(const std::vector<AnnotatedPrompt>& history,
                                                     std::optional<int> cap);

// Fooled fraction of the record's generated prompts.
double compute_adversary_loss(const RoundRecord& record);

inline constexpr double kBceEpsilon = 1e-7;
double compute_judge_bce(std::span<const double> scores, std::span<const int> labels);

class Annotator {
 public:
  virtual ~Annotator() = default;
  virtual HumanLabel label(const Prompt& prompt) = 0;
};

// Labels by the simulator world's ground truth.
class OracleAnnotator : public Annotator {
 public:
  explicit OracleAnnotator(sim::WorldConfig config) : world_(std::move(config)) {}
  HumanLabel label(const Prompt& prompt) override { return world_.oracle_label(prompt.text); }

 private:
  sim::World world_;
};

// Classifies every example with `model` and scores against the labels.
// Unparseable verdicts are not guessed: they raise StageError.
MetricsReport evaluate_judge(ModelBackend& backend, const std::string& model,
                             const Dataset& dataset, int parallelism = 4,
                             const RetryPolicy& retry = {});

// Judge version produced by a successful fine-tune of `parent`.
ModelVersion child_judge(const ModelVersion& parent, const std::string& id,
                         const FineTuneJob& job);

// Fine-tunes `judge` on a stored dataset and registers the child version.
// A failed job raises StageError carrying the provider message.
struct FinetuneOutcome {
  ModelVersion version;
  FineTuneJob job;
};
FinetuneOutcome run_finetune_stage(Store& store, ModelBackend& backend, const ModelVersion& judge,
                                   const std::string& dataset_id, int epochs,
                                   const std::string& new_version_id, const PollPolicy& poll = {},
                                   const RetryPolicy& retry = {});

struct TransferConfig {
  int subset_size = 5000;
  int epochs = 5;
  std::uint64_t seed = 0;
};

// Seeded uniform draw without replacement, in draw order. The whole dataset
// (original order) when n equals its size.
Dataset seeded_subset(const Dataset& dataset, int n, std::uint64_t seed);

struct TransferResult {
  std::string base_model;
  FineTuneJob job;
  MetricsReport report;
};

// Fine-tunes `base_model` on a seeded subset of `train` and evaluates on
// `test`. Pass the loop's final judge for the transfer arm and the untrained
// base model for the from-scratch arm.
TransferResult run_transfer_finetune(ModelBackend& backend, const std::string& base_model,
                                     const Dataset& train, const Dataset& test,
                                     const TransferConfig& config, const PollPolicy& poll = {},
                                     const RetryPolicy& retry = {});

enum class Stage { InitialFineTune, Evaluate, Prompting, FineTune, Completed };
std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view s);

struct RunStatus {
  std::string run_id;
  Stage stage = Stage::InitialFineTune;
  int round_index = 0;  // 0 before the first prompting round
  int iteration = 0;    // current judge iteration
  int prompts_labelled = 0;
  int quota = 0;
  int pending = 0;
  int discarded = 0;
  bool paused = false;
  std::optional<std::string> suspended_reason;
  std::string judge_version;
  std::string adversary_version;
};
void to_json(Json& j, const RunStatus& v);

struct PendingAnnotation {
  Prompt prompt;
  JudgeVerdict judge;
  Tick judged_at = 0;
};

enum class LabelOutcome { Accepted, Duplicate };

struct EngineOptions {
  RetryPolicy retry;
  PollPolicy poll;
  // Called after every persisted state transition, with a short tag.
  std::function<void(const std::string&)> on_boundary;
};

// One optimisation run as a persisted state machine:
//   InitialFineTune -> Evaluate -> (Prompting -> FineTune -> Evaluate)* -> Completed
// The full state lives in runs/<id>/state.json and is rewritten after every
// unit of work, so opening a run resumes exactly where it stopped. Every side
// effect performed before a state write is idempotent on replay.
//
// step() is meant for one driver thread; submit_label, pause and the queries
// may be called from other threads. Backend calls happen outside the lock.
class RunEngine {
 public:
  // Validates the config and datasets, allocates a run id and persists the
  // initial state.
  static std::unique_ptr<RunEngine> create(Store& store, ModelBackend& backend, RunConfig config,
                                           EngineOptions options = {});
  static std::unique_ptr<RunEngine> open(Store& store, ModelBackend& backend,
                                         const std::string& run_id, EngineOptions options = {});

  const std::string& id() const { return run_id_; }
  const RunConfig& config() const { return config_; }
  RunStatus status() const;

  // One unit of work. False when nothing can happen without outside input:
  // completed, paused, suspended, or waiting for human labels. `annotator`
  // may be null, in which case labels must arrive via submit_label.
  bool step(Annotator* annotator);
  // Steps until step() returns false.
  RunStatus drive(Annotator* annotator);

  // Oldest unlabelled prompt of the current round.
  std::optional<PendingAnnotation> next_annotation() const;
  std::size_t queue_length() const;
  // Throws NotFoundError for prompts this run never produced and
  // ConflictError for a different label on an already labelled prompt.
  LabelOutcome submit_label(const std::string& prompt_id, HumanLabel label);
  bool knows_prompt(const std::string& prompt_id) const;
  std::optional<HumanLabel> recorded_label(const std::string& prompt_id) const;
  // Blocks until a label arrives, the run is paused/resumed, or the timeout
  // passes. Returns false on timeout.
  bool wait_for_input(double timeout_s);

  void pause();
  // Clears pause and suspension; the next step re-enters the persisted stage.
  void resume();
  void suspend(const std::string& reason);

 private:
  struct RoundState {
    int index = 0;
    std::string adversary_version;
    std::string judge_before;
    std::vector<AnnotatedPrompt> generated;
    std::vector<Json> discards;  // {prompt_id, text, reason, round, at}
    int dialogues = 0;           // nonce counter
  };
  struct LabelIndexEntry {
    HumanLabel label;
    bool finalised;
  };

  RunEngine(Store& store, ModelBackend& backend, std::string run_id, RunConfig config,
            EngineOptions options);

  Json state_json_locked() const;
  void load_state(const Json& j);
  void persist_locked(const std::string& tag);
  void fail_locked(const std::string& reason, const std::string& tag);

  bool step_initial_finetune();
  bool step_evaluate();
  bool step_prompting(Annotator* annotator);
  bool step_finetune();
  bool drive_job(const std::string& base_model, const std::string& dataset_id, int epochs,
                 const std::string& new_id, bool initial);

  void apply_label_locked(std::size_t pending_index, HumanLabel label);
  void finish_prompting_locked();
  std::vector<ChatExample> pool_examples(const ModelVersion& adversary) const;
  std::string train_snapshot_id(int iteration) const;
  std::string accumulated_id() const;
  std::uint64_t holdout_digest() const;

  Store& store_;
  ModelBackend& backend_;
  std::string run_id_;
  RunConfig config_;
  EngineOptions options_;

  mutable std::mutex mu_;
  std::condition_variable input_cv_;
  Stage stage_ = Stage::InitialFineTune;
  int iteration_ = 0;
  Tick clock_ = 0;
  std::int64_t next_prompt_ = 1;
  std::string judge_version_;
  std::string holdout_digest_;
  std::optional<FineTuneJob> job_;
  std::vector<PendingAnnotation> pending_;
  std::optional<RoundState> round_;
  bool paused_ = false;
  std::optional<std::string> suspended_;
  std::size_t seed_size_ = 0;
  std::uint64_t input_seq_ = 0;  // bumped on labels and control actions

  std::vector<AnnotatedPrompt> history_;  // finalised rounds, chronological
  std::map<std::string, LabelIndexEntry> label_index_;
};

}  // namespace redloop
