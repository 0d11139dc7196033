#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "redloop/backend.h"
#include "redloop/error.h"
#include "redloop/logistic.h"
#include "redloop/metrics.h"
#include "redloop/simulator.h"
#include "support.h"

using namespace redloop;

namespace {

// Gradient of the summed BCE + (l2/2)|theta - prior|^2, computed densely.
std::vector<double> gradient(const std::vector<logistic::Row>& rows, const std::vector<int>& labels, int dim,
                             double l2, const logistic::Model& m, const logistic::Model& prior) {
  std::vector<double> g(static_cast<std::size_t>(dim) + 1, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double z = m.bias;
    for (int f : rows[i]) z += m.weights[static_cast<std::size_t>(f)];
    const double r = 1.0 / (1.0 + std::exp(-z)) - labels[i];
    for (int f : rows[i]) g[static_cast<std::size_t>(f)] += r;
    g[static_cast<std::size_t>(dim)] += r;
  }
  for (int k = 0; k < dim; ++k) g[static_cast<std::size_t>(k)] += l2 * (m.weights[k] - prior.weights[k]);
  g[static_cast<std::size_t>(dim)] += l2 * (m.bias - prior.bias);
  return g;
}

}  // namespace

TEST(Logistic, FitIsStationaryPoint) {
  std::mt19937 gen(3);
  const int dim = 12;
  std::vector<logistic::Row> rows;
  std::vector<int> labels;
  for (int i = 0; i < 200; ++i) {
    logistic::Row r;
    for (int f = 0; f < dim; ++f)
      if (gen() % 3 == 0) r.push_back(f);
    labels.push_back((std::count(r.begin(), r.end(), 0) + std::count(r.begin(), r.end(), 1) > 0) ^ (gen() % 10 == 0));
    rows.push_back(r);
  }
  logistic::Model prior = logistic::zeros(dim);
  prior.weights[5] = 1.5;
  const logistic::Problem p{rows, labels, dim, 0.7, &prior};
  const auto fit = logistic::fit(p);
  for (double g : gradient(rows, labels, dim, 0.7, fit.model, prior)) EXPECT_NEAR(g, 0.0, 1e-8);
  // Strict convexity: any perturbation is worse.
  for (int k = 0; k < dim; ++k) {
    logistic::Model q = fit.model;
    q.weights[k] += 1e-3;
    EXPECT_GT(logistic::objective(p, q), logistic::objective(p, fit.model));
  }
  EXPECT_EQ(logistic::fit(p).model, fit.model);
}

TEST(Logistic, InterpolateEndpoints) {
  logistic::Model a = logistic::zeros(2), b = logistic::zeros(2);
  b.weights = {2.0, -4.0};
  b.bias = 1.0;
  EXPECT_EQ(logistic::interpolate(a, b, 0.0), a);
  EXPECT_EQ(logistic::interpolate(a, b, 1.0), b);
  EXPECT_DOUBLE_EQ(logistic::interpolate(a, b, 0.5).weights[1], -2.0);
}

class SimulatorTest : public ::testing::Test {
 protected:
  sim::WorldConfig world;
  SimulatorBackend sim{world};
};

TEST_F(SimulatorTest, BaseJudgeIsTriggerFraction) {
  const auto& w = sim.world();
  const std::string overt = w.token(w.overt(0));
  const std::string covert = w.token(w.covert(0));
  const std::string topic = w.token(w.topic(0));
  // Score = fraction of the overt vocabulary present.
  const double n = world.overt_features;
  EXPECT_DOUBLE_EQ(sim.classify(topic + " " + overt, SimulatorBackend::kBaseJudge).score, 1.0 / n);
  EXPECT_EQ(sim.classify(topic + " " + covert, SimulatorBackend::kBaseJudge).score, 0.0);
  EXPECT_THROW(sim.classify("x", "no-such-model"), BackendFatalError);
  EXPECT_THROW(sim.classify("", SimulatorBackend::kBaseJudge), PreconditionError);
}

TEST_F(SimulatorTest, GenerationIsAFunctionOfTheRequest) {
  ChatRequest r;
  r.system_message = "s";
  r.instruction = "i";
  r.sample_nonce = 42;
  const std::string a = sim.generate_prompt(r, SimulatorBackend::kAdversary);
  EXPECT_EQ(a, sim.generate_prompt(r, SimulatorBackend::kAdversary));
  SimulatorBackend other(world);
  EXPECT_EQ(a, other.generate_prompt(r, SimulatorBackend::kAdversary));
  std::set<std::string> distinct;
  for (std::uint64_t n = 0; n < 40; ++n) {
    r.sample_nonce = n;
    distinct.insert(sim.generate_prompt(r, SimulatorBackend::kAdversary));
  }
  EXPECT_GT(distinct.size(), 30u);
}

TEST_F(SimulatorTest, TierGrowsWithExamples) {
  ChatRequest r;
  r.system_message = "s";
  EXPECT_EQ(sim.draw(r, SimulatorBackend::kAdversary).tier, 0);
  for (int i = 0; i < 12; ++i) r.in_context_examples.push_back({"ex " + std::to_string(i), 1});
  EXPECT_EQ(sim.draw(r, SimulatorBackend::kAdversary).tier, 12 / world.tier_step);
  for (int i = 0; i < 100; ++i) r.in_context_examples.push_back({"ex", 1});
  EXPECT_EQ(sim.draw(r, SimulatorBackend::kAdversary).tier, world.max_tier);
}

TEST_F(SimulatorTest, OracleDiscardsRefusalsAndGibberish) {
  sim::World w(world);
  EXPECT_EQ(w.oracle_label(""), HumanLabel::Discarded);
  EXPECT_EQ(w.oracle_label("I cannot help with that request."), HumanLabel::Discarded);
  EXPECT_EQ(w.oracle_label(w.token(w.topic(1))), HumanLabel::Unproblematic);
  EXPECT_EQ(w.oracle_label(w.token(w.covert(3)) + " " + w.token(w.topic(1))), HumanLabel::Problematic);
}

TEST_F(SimulatorTest, FineTuneJobLifecycle) {
  const sim::World w(world);
  const Dataset seed = w.seed_dataset();
  const FineTuneJob started = sim.start_fine_tune(SimulatorBackend::kBaseJudge, seed, 3);
  EXPECT_EQ(started.status, JobStatus::Pending);
  EXPECT_FALSE(started.result_model.has_value());
  EXPECT_EQ(started.job_id.rfind("simft-", 0), 0u);
  const FineTuneJob done = sim.poll_fine_tune(started.job_id);
  ASSERT_EQ(done.status, JobStatus::Succeeded);
  ASSERT_TRUE(done.result_model.has_value());
  ASSERT_EQ(done.loss_curve.size(), 3u);
  for (std::size_t i = 1; i < done.loss_curve.size(); ++i)
    EXPECT_LT(done.loss_curve[i].loss, done.loss_curve[i - 1].loss);
  EXPECT_THROW(sim.poll_fine_tune("simft-unknown"), BackendFatalError);
  EXPECT_THROW(sim.start_fine_tune(SimulatorBackend::kBaseJudge, seed, 0), PreconditionError);

  // Learned covert features the base rule ignores.
  const MetricsReport before = [&] {
    std::vector<double> s;
    std::vector<int> l;
    for (const auto& e : w.holdout_dataset().examples) {
      s.push_back(sim.classify(e.text, SimulatorBackend::kBaseJudge).score);
      l.push_back(e.label);
    }
    return metrics::evaluate(s, l);
  }();
  std::vector<double> s;
  std::vector<int> l;
  for (const auto& e : w.holdout_dataset().examples) {
    s.push_back(sim.classify(e.text, *done.result_model).score);
    l.push_back(e.label);
  }
  EXPECT_GT(*metrics::evaluate(s, l).accuracy, *before.accuracy);
}

TEST_F(SimulatorTest, InDomainRefitDependsOnlyOnData) {
  const sim::World w(world);
  Dataset seed = w.seed_dataset();
  const auto a = fine_tune(sim, SimulatorBackend::kBaseJudge, seed, 2);
  Dataset more = seed;
  more.id = "more";
  more.examples.resize(100);
  const auto b = fine_tune(sim, SimulatorBackend::kBaseJudge, more, 2);
  // Refit the full seed set from a different parent: same judge.
  const auto c = fine_tune(sim, *b.result_model, seed, 2);
  EXPECT_EQ(sim.judge_rule(*a.result_model).model, sim.judge_rule(*c.result_model).model);
}

TEST_F(SimulatorTest, ExternalDataTransfersFromTheBase) {
  const sim::World w(world);
  const auto pre = fine_tune(sim, SimulatorBackend::kBaseJudge, w.seed_dataset(), 2);
  Dataset ext{"ext", w.external_corpus(300, 1, "e-"), {DatasetTag::ExternalTransfer}};
  const auto scratch = fine_tune(sim, SimulatorBackend::kBaseJudge, ext, 2);
  const auto transfer = fine_tune(sim, *pre.result_model, ext, 2);
  EXPECT_NE(sim.judge_rule(*scratch.result_model).model, sim.judge_rule(*transfer.result_model).model);
  EXPECT_EQ(sim.judge_rule(*transfer.result_model).prior, sim.judge_rule(*pre.result_model).model);
}

TEST(Simulator, StateDirSharesJudgesAcrossInstances) {
  redloop::testing::TempDir dir("simstate");
  sim::WorldConfig world;
  std::string model, job;
  {
    SimulatorBackend a(world, dir.path());
    const auto j = a.start_fine_tune(SimulatorBackend::kBaseJudge, sim::World(world).seed_dataset(), 1);
    job = j.job_id;
    model = *a.poll_fine_tune(job).result_model;
  }
  SimulatorBackend b(world, dir.path());
  EXPECT_EQ(b.poll_fine_tune(job).result_model, model);
  EXPECT_NO_THROW(b.classify("topic1 trig0", model));
}

TEST(Simulator, InContextJudgeLearnsFromExamples) {
  sim::WorldConfig world;
  SimulatorBackend sim(world);
  const sim::World w(world);
  const std::string covert = w.token(w.covert(2)) + " " + w.token(w.topic(4));
  ChatRequest r;
  r.system_message = "judge";
  EXPECT_EQ(sim.classify_in_context(r, covert, SimulatorBackend::kChat).classification, 0);
  for (int i = 0; i < 4; ++i) r.in_context_examples.push_back({w.token(w.covert(2)) + " " + w.token(w.topic(i)), 1});
  EXPECT_EQ(sim.classify_in_context(r, covert, SimulatorBackend::kChat).classification, 1);
}

TEST(Simulator, GarbageVerdictsAreUnparseable) {
  sim::WorldConfig world;
  world.chat_garbage_rate = 1.0;
  SimulatorBackend sim(world);
  ChatRequest r;
  r.system_message = "judge";
  EXPECT_THROW(sim.classify_in_context(r, "topic1", SimulatorBackend::kChat), UnparseableVerdictError);
}

TEST(VerdictText, Parsing) {
  EXPECT_EQ(parse_verdict_text(" 1").classification, 1);
  EXPECT_EQ(parse_verdict_text("0\n").classification, 0);
  EXPECT_THROW(parse_verdict_text("yes"), UnparseableVerdictError);
  EXPECT_THROW(parse_verdict_text("10"), UnparseableVerdictError);
  EXPECT_THROW(parse_verdict_text(""), UnparseableVerdictError);
}

TEST(Retry, BacksOffAndGivesUp) {
  std::vector<double> sleeps;
  RetryPolicy p;
  p.max_retries = 3;
  p.base_delay_s = 0.5;
  p.sleep = [&](double s) { sleeps.push_back(s); };
  int calls = 0;
  EXPECT_EQ(with_retry(p, [&] {
              if (++calls < 3) throw BackendError("flaky");
              return 7;
            }),
            7);
  EXPECT_EQ(sleeps, (std::vector<double>{0.5, 1.0}));
  sleeps.clear();
  calls = 0;
  EXPECT_THROW(with_retry(p, [&]() -> int {
                 ++calls;
                 throw RateLimitError("slow down", 5.0);
               }),
               RateLimitError);
  EXPECT_EQ(calls, 4);
  EXPECT_EQ(sleeps, (std::vector<double>{5.0, 5.0, 5.0}));
  calls = 0;
  EXPECT_THROW(with_retry(p, [&]() -> int {
                 ++calls;
                 throw BackendFatalError("bad request");
               }),
               BackendFatalError);
  EXPECT_EQ(calls, 1);
}
