#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace redloop {

using Json = nlohmann::json;

// Logical timestamp. Runs advance a persisted counter instead of reading the
// wall clock so that a resumed run reproduces an uninterrupted one exactly.
using Tick = std::int64_t;

enum class PromptSource { Seed, AdversaryGenerated, External };

struct Prompt {
  std::string id;
  std::string text;
  PromptSource source = PromptSource::Seed;
  std::optional<int> round_origin;  // present iff source == AdversaryGenerated
  Tick created_at = 0;

  // Validating constructor; throws PreconditionError on empty text or a
  // round_origin that disagrees with the source.
  static Prompt make(std::string id, std::string text, PromptSource source,
                     std::optional<int> round_origin, Tick created_at);
};

enum class HumanLabel { Unproblematic = 0, Problematic = 1, Discarded = 2 };

struct JudgeVerdict {
  double score = 0.0;  // probability the prompt is problematic
  int classification = 0;

  friend bool operator==(const JudgeVerdict&, const JudgeVerdict&) = default;
};

// classification = 1 iff score >= 0.5. Throws RangeError outside [0, 1].
JudgeVerdict verdict_from_score(double score);

struct AnnotatedPrompt {
  Prompt prompt;
  HumanLabel human = HumanLabel::Discarded;
  JudgeVerdict judge;
  std::string adversary_version;
  std::string judge_version;
  Tick judged_at = 0;
  Tick labelled_at = 0;
};

// True iff the human marked the prompt problematic and the judge let it
// through. Throws LabelledDiscardError for discarded prompts.
bool derive_fooled(const AnnotatedPrompt& annotated);
bool derive_fooled(HumanLabel human, int judge_classification);

enum class ModelKind { Adversary, Judge };

struct ModelVersion {
  std::string id;
  ModelKind kind = ModelKind::Judge;
  int iteration = 0;
  std::optional<std::string> parent;
  std::string backend_ref;
  std::vector<std::string> example_pool_snapshot;        // Adversary only
  std::optional<std::string> training_dataset_snapshot;  // Judge only

  friend bool operator==(const ModelVersion&, const ModelVersion&) = default;
};

enum class DatasetTag { SeedTrain, HoldoutTest, RoundAccumulated, ExternalTransfer };

struct Example {
  std::string prompt_id;
  std::string text;
  int label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  std::string id;
  std::vector<Example> examples;
  std::set<DatasetTag> tags;

  bool has_tag(DatasetTag tag) const { return tags.count(tag) != 0; }
  std::size_t size() const { return examples.size(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Throws PreconditionError when a label is not 0/1.
void validate_labels(const Dataset& dataset);

struct LossPoint {
  int step = 0;
  double loss = 0.0;

  friend bool operator==(const LossPoint&, const LossPoint&) = default;
};

struct RoundRecord {
  int round_index = 0;
  std::vector<AnnotatedPrompt> generated;
  int discarded_count = 0;
  double adversary_loss = 0.0;
  std::optional<double> judge_bce;  // L_J of the pre-round judge, diagnostic
  std::string adversary_version;
  std::string judge_version_before;
  std::string judge_version_after;
  std::vector<LossPoint> finetune_loss_curve;
};

struct MetricsReport {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::int64_t n = 0;
  // nullopt is the undefined marker; rendered "n/a", never 0.
  std::optional<double> accuracy, precision, recall, auroc;

  std::optional<int> iteration;
  std::string model_version;
  std::string test_set;
};

struct FoolingMatrix {
  std::vector<std::string> adversary_versions;  // rows
  std::vector<std::string> judge_versions;      // columns
  // rates[i][k]; nullopt marks a cell that failed, see errors[i][k].
  std::vector<std::vector<std::optional<double>>> rates;
  std::vector<std::vector<std::string>> errors;
  int probes_per_cell = 1;
  std::string mode = "fresh";
};

std::string_view to_string(PromptSource v);
std::string_view to_string(HumanLabel v);
std::string_view to_string(ModelKind v);
std::string_view to_string(DatasetTag v);
PromptSource prompt_source_from_string(std::string_view s);
HumanLabel human_label_from_string(std::string_view s);
ModelKind model_kind_from_string(std::string_view s);
DatasetTag dataset_tag_from_string(std::string_view s);

// "n/a" for undefined, otherwise fixed with `digits` decimals.
std::string format_metric(const std::optional<double>& v, int digits = 4);

void to_json(Json& j, const Prompt& v);
void from_json(const Json& j, Prompt& v);
void to_json(Json& j, const JudgeVerdict& v);
void from_json(const Json& j, JudgeVerdict& v);
void to_json(Json& j, const AnnotatedPrompt& v);
void from_json(const Json& j, AnnotatedPrompt& v);
void to_json(Json& j, const ModelVersion& v);
void from_json(const Json& j, ModelVersion& v);
void to_json(Json& j, const Example& v);
void from_json(const Json& j, Example& v);
void to_json(Json& j, const Dataset& v);
void from_json(const Json& j, Dataset& v);
void to_json(Json& j, const LossPoint& v);
void from_json(const Json& j, LossPoint& v);
void to_json(Json& j, const RoundRecord& v);
void from_json(const Json& j, RoundRecord& v);
void to_json(Json& j, const MetricsReport& v);
void from_json(const Json& j, MetricsReport& v);
void to_json(Json& j, const FoolingMatrix& v);
void from_json(const Json& j, FoolingMatrix& v);

}  // namespace redloop
