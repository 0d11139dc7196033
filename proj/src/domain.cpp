#include "redloop/domain.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>

#include "redloop/error.h"

namespace redloop {

namespace {

bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

Json metric_json(const std::optional<double>& v) {
  if (!v) return "n/a";
  return *v;
}

std::optional<double> metric_from_json(const Json& j) {
  if (j.is_number()) return j.get<double>();
  return std::nullopt;
}

}  // namespace

Prompt Prompt::make(std::string id, std::string text, PromptSource source,
                    std::optional<int> round_origin, Tick created_at) {
  if (blank(text)) throw PreconditionError("prompt text is empty");
  if ((source == PromptSource::AdversaryGenerated) != round_origin.has_value())
    throw PreconditionError("round_origin must be set exactly for adversary prompts");
  return Prompt{std::move(id), std::move(text), source, round_origin, created_at};
}

JudgeVerdict verdict_from_score(double score) {
  if (!(score >= 0.0 && score <= 1.0))
    throw RangeError("judge score outside [0, 1]: " + std::to_string(score));
  return JudgeVerdict{score, score >= 0.5 ? 1 : 0};
}

bool derive_fooled(HumanLabel human, int judge_classification) {
  if (human == HumanLabel::Discarded)
    throw LabelledDiscardError("discarded prompt has no fooled flag");
  return human == HumanLabel::Problematic && judge_classification == 0;
}

bool derive_fooled(const AnnotatedPrompt& annotated) {
  return derive_fooled(annotated.human, annotated.judge.classification);
}

void validate_labels(const Dataset& dataset) {
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    int label = dataset.examples[i].label;
    if (label != 0 && label != 1)
      throw PreconditionError("dataset " + dataset.id + " example " + std::to_string(i) +
                              " has non-binary label " + std::to_string(label));
  }
}

std::string_view to_string(PromptSource v) {
  switch (v) {
    case PromptSource::Seed: return "seed";
    case PromptSource::AdversaryGenerated: return "adversary";
    case PromptSource::External: return "external";
  }
  return "?";
}

std::string_view to_string(HumanLabel v) {
  switch (v) {
    case HumanLabel::Unproblematic: return "unproblematic";
    case HumanLabel::Problematic: return "problematic";
    case HumanLabel::Discarded: return "discard";
  }
  return "?";
}

std::string_view to_string(ModelKind v) {
  return v == ModelKind::Adversary ? "adversary" : "judge";
}

std::string_view to_string(DatasetTag v) {
  switch (v) {
    case DatasetTag::SeedTrain: return "seed_train";
    case DatasetTag::HoldoutTest: return "holdout_test";
    case DatasetTag::RoundAccumulated: return "round_accumulated";
    case DatasetTag::ExternalTransfer: return "external_transfer";
  }
  return "?";
}

PromptSource prompt_source_from_string(std::string_view s) {
  if (s == "seed") return PromptSource::Seed;
  if (s == "adversary") return PromptSource::AdversaryGenerated;
  if (s == "external") return PromptSource::External;
  throw SchemaError("unknown prompt source '" + std::string(s) + "'");
}

HumanLabel human_label_from_string(std::string_view s) {
  if (s == "unproblematic" || s == "0") return HumanLabel::Unproblematic;
  if (s == "problematic" || s == "1") return HumanLabel::Problematic;
  if (s == "discard" || s == "discarded") return HumanLabel::Discarded;
  throw SchemaError("unknown label '" + std::string(s) + "'");
}

ModelKind model_kind_from_string(std::string_view s) {
  if (s == "adversary") return ModelKind::Adversary;
  if (s == "judge") return ModelKind::Judge;
  throw SchemaError("unknown model kind '" + std::string(s) + "'");
}

DatasetTag dataset_tag_from_string(std::string_view s) {
  if (s == "seed_train") return DatasetTag::SeedTrain;
  if (s == "holdout_test") return DatasetTag::HoldoutTest;
  if (s == "round_accumulated") return DatasetTag::RoundAccumulated;
  if (s == "external_transfer") return DatasetTag::ExternalTransfer;
  throw SchemaError("unknown dataset tag '" + std::string(s) + "'");
}

std::string format_metric(const std::optional<double>& v, int digits) {
  if (!v) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, *v);
  return buf;
}

void to_json(Json& j, const Prompt& v) {
  j = Json{{"id", v.id},
           {"text", v.text},
           {"source", to_string(v.source)},
           {"round_origin", v.round_origin ? Json(*v.round_origin) : Json(nullptr)},
           {"created_at", v.created_at}};
}

void from_json(const Json& j, Prompt& v) {
  v.id = j.at("id").get<std::string>();
  v.text = j.at("text").get<std::string>();
  v.source = prompt_source_from_string(j.at("source").get<std::string>());
  const Json& r = j.at("round_origin");
  v.round_origin = r.is_null() ? std::nullopt : std::optional<int>(r.get<int>());
  v.created_at = j.value("created_at", Tick{0});
}

void to_json(Json& j, const JudgeVerdict& v) {
  j = Json{{"score", v.score}, {"classification", v.classification}};
}

void from_json(const Json& j, JudgeVerdict& v) {
  v.score = j.at("score").get<double>();
  v.classification = j.at("classification").get<int>();
}

void to_json(Json& j, const AnnotatedPrompt& v) {
  j = Json{{"prompt", v.prompt},
           {"human", to_string(v.human)},
           {"judge", v.judge},
           {"adversary_version", v.adversary_version},
           {"judge_version", v.judge_version},
           {"judged_at", v.judged_at},
           {"labelled_at", v.labelled_at}};
}

void from_json(const Json& j, AnnotatedPrompt& v) {
  v.prompt = j.at("prompt").get<Prompt>();
  v.human = human_label_from_string(j.at("human").get<std::string>());
  v.judge = j.at("judge").get<JudgeVerdict>();
  v.adversary_version = j.at("adversary_version").get<std::string>();
  v.judge_version = j.at("judge_version").get<std::string>();
  v.judged_at = j.at("judged_at").get<Tick>();
  v.labelled_at = j.at("labelled_at").get<Tick>();
}

void to_json(Json& j, const ModelVersion& v) {
  j = Json{{"id", v.id},
           {"kind", to_string(v.kind)},
           {"iteration", v.iteration},
           {"parent", v.parent ? Json(*v.parent) : Json(nullptr)},
           {"backend_ref", v.backend_ref},
           {"example_pool_snapshot", v.example_pool_snapshot},
           {"training_dataset_snapshot", v.training_dataset_snapshot
                                             ? Json(*v.training_dataset_snapshot)
                                             : Json(nullptr)}};
}

void from_json(const Json& j, ModelVersion& v) {
  v.id = j.at("id").get<std::string>();
  v.kind = model_kind_from_string(j.at("kind").get<std::string>());
  v.iteration = j.at("iteration").get<int>();
  const Json& p = j.at("parent");
  v.parent = p.is_null() ? std::nullopt : std::optional<std::string>(p.get<std::string>());
  v.backend_ref = j.at("backend_ref").get<std::string>();
  v.example_pool_snapshot = j.value("example_pool_snapshot", std::vector<std::string>{});
  const Json& t = j.at("training_dataset_snapshot");
  v.training_dataset_snapshot =
      t.is_null() ? std::nullopt : std::optional<std::string>(t.get<std::string>());
}

void to_json(Json& j, const Example& v) {
  j = Json{{"id", v.prompt_id}, {"text", v.text}, {"label", v.label}};
}

void from_json(const Json& j, Example& v) {
  v.prompt_id = j.at("id").get<std::string>();
  v.text = j.at("text").get<std::string>();
  v.label = j.at("label").get<int>();
}

void to_json(Json& j, const Dataset& v) {
  Json tags = Json::array();
  for (DatasetTag t : v.tags) tags.push_back(to_string(t));
  j = Json{{"id", v.id}, {"tags", tags}, {"examples", v.examples}};
}

void from_json(const Json& j, Dataset& v) {
  v.id = j.at("id").get<std::string>();
  v.tags.clear();
  for (const auto& t : j.at("tags")) v.tags.insert(dataset_tag_from_string(t.get<std::string>()));
  v.examples = j.at("examples").get<std::vector<Example>>();
}

void to_json(Json& j, const LossPoint& v) { j = Json{{"step", v.step}, {"loss", v.loss}}; }

void from_json(const Json& j, LossPoint& v) {
  v.step = j.at("step").get<int>();
  v.loss = j.at("loss").get<double>();
}

void to_json(Json& j, const RoundRecord& v) {
  j = Json{{"round_index", v.round_index},
           {"generated", v.generated},
           {"discarded_count", v.discarded_count},
           {"adversary_loss", v.adversary_loss},
           {"judge_bce", metric_json(v.judge_bce)},
           {"adversary_version", v.adversary_version},
           {"judge_version_before", v.judge_version_before},
           {"judge_version_after", v.judge_version_after},
           {"finetune_loss_curve", v.finetune_loss_curve}};
}

void from_json(const Json& j, RoundRecord& v) {
  v.round_index = j.at("round_index").get<int>();
  v.generated = j.at("generated").get<std::vector<AnnotatedPrompt>>();
  v.discarded_count = j.at("discarded_count").get<int>();
  v.adversary_loss = j.at("adversary_loss").get<double>();
  v.judge_bce = metric_from_json(j.value("judge_bce", Json("n/a")));
  v.adversary_version = j.at("adversary_version").get<std::string>();
  v.judge_version_before = j.at("judge_version_before").get<std::string>();
  v.judge_version_after = j.at("judge_version_after").get<std::string>();
  v.finetune_loss_curve = j.at("finetune_loss_curve").get<std::vector<LossPoint>>();
}

void to_json(Json& j, const MetricsReport& v) {
  j = Json{{"iteration", v.iteration ? Json(*v.iteration) : Json(nullptr)},
           {"model_version", v.model_version},
           {"test_set", v.test_set},
           {"tp", v.tp},
           {"fp", v.fp},
           {"tn", v.tn},
           {"fn", v.fn},
           {"n", v.n},
           {"accuracy", metric_json(v.accuracy)},
           {"precision", metric_json(v.precision)},
           {"recall", metric_json(v.recall)},
           {"auroc", metric_json(v.auroc)}};
}

void from_json(const Json& j, MetricsReport& v) {
  const Json& it = j.value("iteration", Json(nullptr));
  v.iteration = it.is_null() ? std::nullopt : std::optional<int>(it.get<int>());
  v.model_version = j.value("model_version", "");
  v.test_set = j.value("test_set", "");
  v.tp = j.at("tp").get<std::int64_t>();
  v.fp = j.at("fp").get<std::int64_t>();
  v.tn = j.at("tn").get<std::int64_t>();
  v.fn = j.at("fn").get<std::int64_t>();
  v.n = j.at("n").get<std::int64_t>();
  v.accuracy = metric_from_json(j.at("accuracy"));
  v.precision = metric_from_json(j.at("precision"));
  v.recall = metric_from_json(j.at("recall"));
  v.auroc = metric_from_json(j.at("auroc"));
}

void to_json(Json& j, const FoolingMatrix& v) {
  Json rates = Json::array();
  for (const auto& row : v.rates) {
    Json r = Json::array();
    for (const auto& cell : row) r.push_back(cell ? Json(*cell) : Json(nullptr));
    rates.push_back(r);
  }
  j = Json{{"adversary_versions", v.adversary_versions},
           {"judge_versions", v.judge_versions},
           {"rates", rates},
           {"errors", v.errors},
           {"probes_per_cell", v.probes_per_cell},
           {"mode", v.mode}};
}

void from_json(const Json& j, FoolingMatrix& v) {
  v.adversary_versions = j.at("adversary_versions").get<std::vector<std::string>>();
  v.judge_versions = j.at("judge_versions").get<std::vector<std::string>>();
  v.rates.clear();
  for (const auto& row : j.at("rates")) {
    std::vector<std::optional<double>> r;
    for (const auto& cell : row)
      r.push_back(cell.is_null() ? std::nullopt : std::optional<double>(cell.get<double>()));
    v.rates.push_back(std::move(r));
  }
  v.errors = j.value("errors", std::vector<std::vector<std::string>>{});
  v.probes_per_cell = j.at("probes_per_cell").get<int>();
  v.mode = j.value("mode", "fresh");
}

}  // namespace redloop
