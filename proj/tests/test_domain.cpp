#include <gtest/gtest.h>

#include <random>

#include "redloop/domain.h"
#include "redloop/error.h"
#include "redloop/metrics.h"

using namespace redloop;

TEST(Verdict, ThresholdIsInclusive) {
  EXPECT_EQ(verdict_from_score(0.5).classification, 1);
  EXPECT_EQ(verdict_from_score(0.4999999).classification, 0);
  EXPECT_EQ(verdict_from_score(0.0).classification, 0);
  EXPECT_EQ(verdict_from_score(1.0).classification, 1);
  EXPECT_THROW(verdict_from_score(1.0000001), RangeError);
  EXPECT_THROW(verdict_from_score(-0.1), RangeError);
  EXPECT_THROW(verdict_from_score(std::nan("")), RangeError);
}

TEST(Fooled, TruthTable) {
  EXPECT_TRUE(derive_fooled(HumanLabel::Problematic, 0));
  EXPECT_FALSE(derive_fooled(HumanLabel::Problematic, 1));
  EXPECT_FALSE(derive_fooled(HumanLabel::Unproblematic, 0));
  EXPECT_FALSE(derive_fooled(HumanLabel::Unproblematic, 1));
  EXPECT_THROW(derive_fooled(HumanLabel::Discarded, 0), LabelledDiscardError);
  // Discards are a precondition failure, whichever way they are caught.
  EXPECT_THROW(derive_fooled(HumanLabel::Discarded, 1), PreconditionError);
}

TEST(Prompt, ValidatesTextAndOrigin) {
  EXPECT_NO_THROW(Prompt::make("p", "hello", PromptSource::Seed, std::nullopt, 0));
  EXPECT_THROW(Prompt::make("p", "", PromptSource::Seed, std::nullopt, 0), PreconditionError);
  EXPECT_THROW(Prompt::make("p", "x", PromptSource::AdversaryGenerated, std::nullopt, 0), PreconditionError);
  EXPECT_THROW(Prompt::make("p", "x", PromptSource::Seed, 1, 0), PreconditionError);
  const Prompt p = Prompt::make("p", "x", PromptSource::AdversaryGenerated, 2, 7);
  EXPECT_EQ(Json(p).get<Prompt>().round_origin, 2);
}

TEST(Labels, StringForms) {
  EXPECT_EQ(human_label_from_string("problematic"), HumanLabel::Problematic);
  EXPECT_EQ(human_label_from_string("1"), HumanLabel::Problematic);
  EXPECT_EQ(human_label_from_string("unproblematic"), HumanLabel::Unproblematic);
  EXPECT_EQ(human_label_from_string("discard"), HumanLabel::Discarded);
  EXPECT_THROW(human_label_from_string("maybe"), SchemaError);
  for (auto t : {DatasetTag::SeedTrain, DatasetTag::HoldoutTest, DatasetTag::RoundAccumulated,
                 DatasetTag::ExternalTransfer})
    EXPECT_EQ(dataset_tag_from_string(to_string(t)), t);
}

TEST(Metrics, UndefinedIsNotZero) {
  const std::vector<int> preds{0, 0, 0, 0};
  const std::vector<int> labels{0, 0, 0, 0};
  const MetricsReport r = metrics::classification_metrics(metrics::confusion(preds, labels));
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_FALSE(r.precision.has_value());
  EXPECT_FALSE(r.recall.has_value());
  EXPECT_FALSE(r.auroc.has_value());
  EXPECT_EQ(format_metric(r.precision), "n/a");
  const Json j = r;
  EXPECT_EQ(j["precision"], "n/a");
  const MetricsReport back = j.get<MetricsReport>();
  EXPECT_FALSE(back.precision.has_value());
  EXPECT_EQ(back.accuracy, 1.0);
}

TEST(Metrics, RejectsBadInput) {
  const std::vector<int> a{0, 1}, b{1}, c{0, 2}, empty;
  EXPECT_THROW(metrics::confusion(a, b), PreconditionError);
  EXPECT_THROW(metrics::confusion(c, a), PreconditionError);
  EXPECT_THROW(metrics::confusion(empty, empty), PreconditionError);
}

TEST(Metrics, ConfusionCountsAddUp) {
  std::mt19937 gen(1);
  for (int t = 0; t < 200; ++t) {
    const int n = 1 + static_cast<int>(gen() % 50);
    std::vector<int> p(n), l(n);
    for (int i = 0; i < n; ++i) p[i] = static_cast<int>(gen() % 2), l[i] = static_cast<int>(gen() % 2);
    const MetricsReport r = metrics::confusion(p, l);
    ASSERT_EQ(r.tp + r.fp + r.tn + r.fn, n);
    ASSERT_EQ(r.n, n);
  }
}

TEST(Metrics, AurocTiesAndInvariance) {
  const std::vector<int> labels{1, 0, 1, 0};
  const std::vector<double> tied{0.5, 0.5, 0.5, 0.5};
  EXPECT_EQ(metrics::auroc(tied, labels), 0.5);
  const std::vector<double> s{0.9, 0.2, 0.4, 0.6};
  // Pairs (pos, neg): (0.9,0.2)=1 (0.9,0.6)=1 (0.4,0.2)=1 (0.4,0.6)=0 -> 3/4.
  EXPECT_DOUBLE_EQ(*metrics::auroc(s, labels), 0.75);
  std::vector<double> shifted;
  for (double v : s) shifted.push_back(v * 0.5 + 0.1);  // monotone transform
  EXPECT_DOUBLE_EQ(*metrics::auroc(shifted, labels), 0.75);
  const std::vector<int> one_class{1, 1};
  const std::vector<double> two{0.1, 0.2};
  EXPECT_FALSE(metrics::auroc(two, one_class).has_value());
}

TEST(Metrics, EvaluateThresholdsAtHalf) {
  const std::vector<double> scores{0.5, 0.49, 0.8, 0.1};
  const std::vector<int> labels{1, 1, 0, 0};
  const MetricsReport r = metrics::evaluate(scores, labels);
  EXPECT_EQ(r.tp, 1);
  EXPECT_EQ(r.fn, 1);
  EXPECT_EQ(r.fp, 1);
  EXPECT_EQ(r.tn, 1);
  EXPECT_DOUBLE_EQ(*r.auroc, 0.5);  // 0.5>0.1, 0.5<0.8, 0.49>0.1, 0.49<0.8
}

TEST(Metrics, CsvRow) {
  MetricsReport r = metrics::classification_metrics(metrics::confusion(std::vector<int>{0, 0}, std::vector<int>{1, 0}));
  r.iteration = 3;
  r.model_version = "run-0001.judge-3";
  r.test_set = "holdout";
  EXPECT_EQ(metrics::csv_header(), "iteration,model_version,test_set,n,tp,fp,tn,fn,accuracy,precision,recall,auroc");
  EXPECT_EQ(metrics::csv_row(r), "3,run-0001.judge-3,holdout,2,0,0,1,1,0.5000,n/a,0.0000,0.5000");
}

TEST(Json, RoundTrips) {
  AnnotatedPrompt a;
  a.prompt = Prompt::make("r.p00001", "trig1 topic2", PromptSource::AdversaryGenerated, 1, 4);
  a.human = HumanLabel::Problematic;
  a.judge = verdict_from_score(0.25);
  a.adversary_version = "r.adversary-0";
  a.judge_version = "r.judge-0";
  a.judged_at = 4;
  a.labelled_at = 5;
  const AnnotatedPrompt b = Json(a).get<AnnotatedPrompt>();
  EXPECT_EQ(Json(a), Json(b));

  ModelVersion v{"j1", ModelKind::Judge, 1, "j0", "sim-abc", {}, "train-1"};
  EXPECT_EQ(Json(v).get<ModelVersion>(), v);

  FoolingMatrix m;
  m.adversary_versions = {"a"};
  m.judge_versions = {"j0", "j1"};
  m.rates = {{0.25, std::nullopt}};
  m.errors = {{"", "boom"}};
  const FoolingMatrix m2 = Json(m).get<FoolingMatrix>();
  EXPECT_EQ(m2.rates, m.rates);
  EXPECT_EQ(m2.errors, m.errors);
}
