#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <string>

#include "redloop/backend.h"
#include "redloop/logistic.h"
#include "redloop/sim_world.h"

namespace redloop {

// Deterministic in-process backend over a sim::World. Every operation is a
// pure function of (world seed, inputs). Calls are serialised internally.
//
// Judges are either the untrained trigger-fraction rule (score = fraction of
// overt trig features present) or a logistic rule over World::featurize.
// Fine-tuning refits the logistic rule by L2-regularised maximum likelihood:
//   - in-domain datasets refit around the lineage prior, so the same dataset
//     always yields the same judge regardless of the starting judge;
//   - ExternalTransfer datasets centre the prior on the base judge's weights,
//     which is how pre-training carries over to a new domain.
// When constructed with a state directory, fine-tuned judges and jobs are
// written there so a new process can resolve handles from an earlier one.
class SimulatorBackend : public ModelBackend {
 public:
  static constexpr const char* kBaseJudge = "sim-judge-base";
  static constexpr const char* kAdversary = "sim-adversary";
  static constexpr const char* kChat = "sim-chat";
  static constexpr const char* kEmbedding = "sim-embedding";

  struct JudgeRule {
    enum class Kind { TriggerFraction, Logistic } kind = Kind::TriggerFraction;
    logistic::Model model;
    logistic::Model prior;
  };

  explicit SimulatorBackend(sim::WorldConfig config, std::filesystem::path state_dir = {});

  std::string name() const override { return "simulator"; }

  std::string generate_prompt(const ChatRequest& request, const std::string& model) override;
  JudgeVerdict classify(const std::string& prompt_text, const std::string& model) override;
  JudgeVerdict classify_in_context(const ChatRequest& request, const std::string& prompt_text,
                                   const std::string& model) override;
  FineTuneJob start_fine_tune(const std::string& base_model, const Dataset& dataset,
                              int epochs) override;
  FineTuneJob poll_fine_tune(const std::string& job_id) override;
  EmbeddingVector embed(const std::string& text, const std::string& model_tag) override;

  // The draw behind generate_prompt, exposed for inspection.
  sim::Draw draw(const ChatRequest& request, const std::string& model) const;

  JudgeRule judge_rule(const std::string& handle);
  std::string register_judge(const JudgeRule& rule);

  const sim::World& world() const { return world_; }

 private:
  JudgeRule resolve_locked(const std::string& handle);
  std::string store_judge_locked(const JudgeRule& rule);
  void persist(const std::string& kind, const std::string& id, const Json& body) const;
  std::optional<Json> load(const std::string& kind, const std::string& id) const;

  sim::World world_;
  std::filesystem::path state_dir_;
  std::mutex mu_;
  std::map<std::string, JudgeRule> judges_;
  std::map<std::string, FineTuneJob> jobs_;
};

std::uint64_t request_digest(const ChatRequest& request);

}  // namespace redloop
