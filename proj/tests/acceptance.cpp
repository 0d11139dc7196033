// Acceptance checks. One PASS/FAIL line per criterion; exit status is the
// number of failures. Expected values come from brute-force oracles written
// here, not from the library.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "redloop/analysis.h"
#include "redloop/csv.h"
#include "redloop/datastore.h"
#include "redloop/error.h"
#include "redloop/fooling.h"
#include "redloop/loop.h"
#include "redloop/metrics.h"
#include "redloop/service.h"
#include "redloop/simulator.h"
#include "support.h"

using namespace redloop;
using redloop::testing::TempDir;

namespace {

int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  if (!ok) ++failures;
}

void check(const std::string& name, const std::function<std::pair<bool, std::string>()>& fn) {
  try {
    auto [ok, detail] = fn();
    report(name, ok, detail);
  } catch (const std::exception& e) {
    report(name, false, std::string("exception: ") + e.what());
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---- metric oracles ----

std::pair<bool, std::string> metric_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 gen(20240101);
  int mismatches = 0, auroc_checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(gen() % 64);
    std::vector<int> preds(n), labels(n);
    for (int i = 0; i < n; ++i) {
      preds[i] = static_cast<int>(gen() % 2);
      labels[i] = static_cast<int>(gen() % 2);
    }
    int correct = 0, pred_pos = 0, true_pos = 0, actual_pos = 0, actual_neg = 0, true_neg = 0;
    for (int i = 0; i < n; ++i) {
      correct += preds[i] == labels[i];
      pred_pos += preds[i] == 1;
      actual_pos += labels[i] == 1;
      actual_neg += labels[i] == 0;
      true_pos += preds[i] == 1 && labels[i] == 1;
      true_neg += preds[i] == 0 && labels[i] == 0;
    }
    const MetricsReport r = metrics::classification_metrics(metrics::confusion(preds, labels));
    if (!r.accuracy || *r.accuracy != static_cast<double>(correct) / n) ++mismatches;
    if (pred_pos == 0 ? r.precision.has_value() : (!r.precision || *r.precision != static_cast<double>(true_pos) / pred_pos))
      ++mismatches;
    if (actual_pos == 0 ? r.recall.has_value() : (!r.recall || *r.recall != static_cast<double>(true_pos) / actual_pos))
      ++mismatches;
    std::vector<double> scores(preds.begin(), preds.end());
    const auto a = metrics::auroc(scores, labels);
    if (actual_pos > 0 && actual_neg > 0) {
      ++auroc_checked;
      const double expected = (static_cast<double>(true_pos) / actual_pos + static_cast<double>(true_neg) / actual_neg) / 2;
      if (!a || std::abs(*a - expected) > 1e-12) ++mismatches;
    } else if (a) {
      ++mismatches;
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 5.0, "1000 cases, " + std::to_string(auroc_checked) + " with AUROC, " +
                                             std::to_string(mismatches) + " mismatches, " + fmt(secs, 3) + " s"};
}

std::pair<bool, std::string> auroc_pairs() {
  std::mt19937_64 gen(77);
  int mismatches = 0, checked = 0;
  double worst = 0;
  while (checked < 500) {
    const int n = 2 + static_cast<int>(gen() % 31);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
      // Coarse grid so ties are common.
      scores[i] = static_cast<double>(gen() % 9) / 8.0 + (gen() % 2 ? 0.0 : static_cast<double>(gen() % 1000) * 1e-6);
      labels[i] = static_cast<int>(gen() % 2);
    }
    double credit = 0;
    int pos = 0, neg = 0;
    for (int i = 0; i < n; ++i) {
      if (labels[i] == 1) ++pos;
      else ++neg;
    }
    if (pos == 0 || neg == 0) continue;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (labels[i] == 1 && labels[j] == 0) credit += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    const double expected = credit / (static_cast<double>(pos) * neg);
    const auto got = metrics::auroc(scores, labels);
    ++checked;
    if (!got) {
      ++mismatches;
      continue;
    }
    worst = std::max(worst, std::abs(*got - expected));
    if (std::abs(*got - expected) > 1e-12) ++mismatches;
  }
  std::vector<int> labels{1, 0, 1, 0, 0, 1, 1, 0};
  std::vector<double> all_neg(labels.size(), 0.0);
  std::vector<double> correct(labels.begin(), labels.end());
  const auto a_neg = metrics::auroc(all_neg, labels);
  const auto a_ok = metrics::auroc(correct, labels);
  const bool ok = mismatches == 0 && a_neg && *a_neg == 0.5 && a_ok && *a_ok == 1.0;
  return {ok, "500 score sets, max |err| " + std::to_string(worst) + ", all-negative " + format_metric(a_neg, 2) +
                  ", all-correct " + format_metric(a_ok, 2)};
}

std::pair<bool, std::string> bce_values() {
  std::vector<double> perfect{1.0, 0.0, 1.0, 0.0};
  std::vector<int> labels{1, 0, 1, 0};
  std::vector<double> half{0.5, 0.5, 0.5, 0.5};
  std::vector<double> hand{0.9, 0.1};
  std::vector<int> hand_labels{1, 0};
  const double p = compute_judge_bce(perfect, labels);
  const double h = compute_judge_bce(half, labels);
  const double e = compute_judge_bce(hand, hand_labels);
  const bool ok = p < 1e-6 && std::abs(h - std::log(2.0)) <= 1e-9 && std::abs(e - 0.105361) <= 1e-6;
  return {ok, "perfect " + std::to_string(p) + ", uniform " + fmt(h, 10) + ", [0.9,0.1] " + fmt(e, 7)};
}

// ---- loop ----

std::pair<bool, std::string> adversary_loss() {
  TempDir dir("la");
  RunConfig cfg = redloop::testing::sim_config(3);
  auto run = redloop::testing::make_sim_run(dir.path(), cfg);
  OracleAnnotator oracle(cfg.backend.world);
  run.engine->drive(&oracle);
  const auto rounds = run.store->rounds(run.engine->id());
  int exact = 0;
  for (const auto& r : rounds) {
    int fooled = 0, kept = 0;
    for (const auto& a : r.generated) {
      if (a.human == HumanLabel::Discarded) continue;
      ++kept;
      if (a.human == HumanLabel::Problematic && a.judge.classification == 0) ++fooled;
    }
    if (kept == cfg.prompts_per_round &&
        r.adversary_loss == static_cast<double>(fooled) / static_cast<double>(cfg.prompts_per_round))
      ++exact;
  }
  RoundRecord fixture;
  for (int i = 0; i < 50; ++i) {
    AnnotatedPrompt a;
    a.prompt = Prompt::make("f" + std::to_string(i), "text", PromptSource::AdversaryGenerated, 1, i);
    a.human = i < 30 ? HumanLabel::Problematic : HumanLabel::Unproblematic;
    a.judge = verdict_from_score(i < 13 ? 0.2 : 0.8);
    fixture.generated.push_back(a);
  }
  const double fx = compute_adversary_loss(fixture);
  const bool ok = rounds.size() == static_cast<std::size_t>(cfg.rounds) && exact == static_cast<int>(rounds.size()) &&
                  fx == 0.26;
  return {ok, std::to_string(exact) + "/" + std::to_string(rounds.size()) + " rounds recompute exactly, fixture " +
                  fmt(fx, 2)};
}

struct LoopOutcome {
  std::vector<double> accuracy;
  std::string final_judge;
  std::unique_ptr<TempDir> dir;
};

LoopOutcome run_loop(std::uint64_t seed) {
  LoopOutcome out;
  out.dir = std::make_unique<TempDir>("loop");
  RunConfig cfg = redloop::testing::sim_config(seed);
  auto run = redloop::testing::make_sim_run(out.dir->path(), cfg);
  OracleAnnotator oracle(cfg.backend.world);
  const RunStatus st = run.engine->drive(&oracle);
  if (st.stage != Stage::Completed)
    throw Error("seed " + std::to_string(seed) + " did not complete: " + st.suspended_reason.value_or("?"));
  for (const auto& m : run.store->metrics(run.engine->id())) out.accuracy.push_back(*m.accuracy);
  out.final_judge = st.judge_version;
  return out;
}

std::vector<LoopOutcome> loops;

std::pair<bool, std::string> closed_loop() {
  const auto t0 = std::chrono::steady_clock::now();
  int largest = 0, not_worse = 0;
  std::ostringstream detail;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    loops.push_back(run_loop(seed));
    const auto& acc = loops.back().accuracy;
    if (acc.size() != 6) throw Error("expected 6 evaluations");
    const double d1 = acc[1] - acc[0];
    bool is_largest = d1 > 0;
    for (std::size_t i = 2; i < acc.size(); ++i) is_largest = is_largest && d1 >= acc[i] - acc[i - 1];
    largest += is_largest;
    not_worse += acc[5] >= acc[0];
  }
  const double secs = seconds_since(t0);
  const bool ok = largest >= 16 && not_worse == 20 && secs < 120.0;
  detail << "first delta largest in " << largest << "/20 seeds, final >= initial in " << not_worse << "/20, "
         << fmt(secs, 1) << " s";
  return {ok, detail.str()};
}

// ---- fooling matrix ----

// Adversary echoes its nonce; judge misses a problematic probe with
// probability 0.3, decided by an independent hash of the text.
class StubBackend : public ModelBackend {
 public:
  std::string name() const override { return "stub"; }
  std::string generate_prompt(const ChatRequest& r, const std::string& model) override {
    return "probe " + model + " " + std::to_string(r.sample_nonce);
  }
  JudgeVerdict classify(const std::string& text, const std::string& model) override {
    std::mt19937_64 g(std::hash<std::string>{}(text + "|" + model));
    const double u = static_cast<double>(g() >> 11) * 0x1.0p-53;
    return verdict_from_score(u < 0.3 ? 0.1 : 0.9);
  }
  JudgeVerdict classify_in_context(const ChatRequest&, const std::string& t, const std::string& m) override {
    return classify(t, m);
  }
  FineTuneJob start_fine_tune(const std::string&, const Dataset&, int) override { throw BackendFatalError("stub"); }
  FineTuneJob poll_fine_tune(const std::string&) override { throw BackendFatalError("stub"); }
  EmbeddingVector embed(const std::string&, const std::string& tag) override { return {{1.0}, tag}; }
};

class AlwaysProblematic : public Annotator {
 public:
  HumanLabel label(const Prompt&) override { return HumanLabel::Problematic; }
};

std::pair<bool, std::string> fooling_monte_carlo() {
  StubBackend stub;
  AlwaysProblematic annotator;
  FoolingOptions opts;
  opts.probes_per_cell = 1000;
  opts.seed = 5;
  std::vector<AdversaryRow> rows{{"a0", "adv-a", {}}, {"a1", "adv-b", {}}};
  std::vector<JudgeColumn> cols{{"j0", "judge-a"}, {"j1", "judge-b"}};
  const FoolingMatrix stub_m = fooling_matrix(stub, rows, cols, annotator, opts);
  bool stub_ok = true;
  std::ostringstream detail;
  detail << "stub cells";
  for (const auto& row : stub_m.rates)
    for (const auto& c : row) {
      stub_ok = stub_ok && c && std::abs(*c - 0.3) <= 0.05;
      detail << " " << format_metric(c, 3);
    }

  // Monotone world: a completed simulator run, fresh probes.
  if (loops.empty()) loops.push_back(run_loop(1));
  Store store(loops.front().dir->path());
  const std::string run_id = store.list_runs().front();
  const RunConfig cfg = store.get_run_state(run_id)->at("config").get<RunConfig>();
  auto backend = make_backend(cfg, store);
  OracleAnnotator oracle(cfg.backend.world);
  FoolingOptions fo;
  fo.probes_per_cell = 50;
  fo.seed = 11;
  const FoolingMatrix m = fooling_matrix(*backend, run_adversary_rows(store, run_id),
                                         run_judge_columns(store, run_id), oracle, fo);
  std::vector<double> means;
  bool monotone = true;
  for (std::size_t k = 0; k < m.judge_versions.size(); ++k) {
    double s = 0;
    for (std::size_t i = 0; i < m.adversary_versions.size(); ++i) {
      if (!m.rates[i][k]) throw Error("simulator cell failed: " + m.errors[i][k]);
      s += *m.rates[i][k];
    }
    means.push_back(s / static_cast<double>(m.adversary_versions.size()));
    if (k > 0 && means[k] > means[k - 1] + 1e-12) monotone = false;
  }
  detail << "; simulator column means";
  for (double v : means) detail << " " << fmt(v, 3);
  return {stub_ok && monotone, detail.str()};
}

// ---- transfer ----

std::pair<bool, std::string> transfer_ordering() {
  int wins = 0;
  double margin_sum = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    if (loops.size() < seed) loops.push_back(run_loop(seed));
    const LoopOutcome& lo = loops[seed - 1];
    Store store(lo.dir->path());
    const RunConfig cfg = redloop::testing::sim_config(seed);
    auto backend = make_backend(cfg, store);
    const sim::World world(cfg.backend.world);
    const Dataset train{"ext-train", world.external_corpus(6000, 1, "ext-train-"), {DatasetTag::ExternalTransfer}};
    const Dataset test{"ext-test", world.external_corpus(2000, 2, "ext-test-"), {DatasetTag::ExternalTransfer}};
    const TransferConfig tc{5000, 5, seed};
    const std::string pretrained = store.get_version(lo.final_judge).backend_ref;
    const auto scratch = run_transfer_finetune(*backend, cfg.judge_base_model, train, test, tc);
    const auto transferred = run_transfer_finetune(*backend, pretrained, train, test, tc);
    const double d = *transferred.report.accuracy - *scratch.report.accuracy;
    margin_sum += d;
    wins += d > 0;
  }
  return {wins >= 16, "transferred beats from-scratch in " + std::to_string(wins) + "/20 seeds, mean margin " +
                          fmt(margin_sum / 20, 4)};
}

// ---- formats ----

std::pair<bool, std::string> format_fidelity() {
  std::mt19937_64 gen(9);
  Dataset d{"fmt", {}, {DatasetTag::SeedTrain}};
  const std::vector<std::string> pieces{"plain", "comma, here", "quote \"q\"", "tab\tand\\slash", "unicode café",
                                        "newline\ninside", "emoji \xF0\x9F\x98\x80"};
  for (int i = 0; i < 150; ++i)
    d.examples.push_back({"fmt-" + std::to_string(i + 1), pieces[gen() % pieces.size()] + " " + std::to_string(i),
                          static_cast<int>(gen() % 2)});
  const std::string once = dataset_to_jsonl(d);
  const std::string twice = dataset_to_jsonl(dataset_from_jsonl(once, "fmt"));
  bool ok = once == twice;
  std::string detail = std::string("150-item JSONL round-trip ") + (ok ? "identical" : "differs");

  std::string bad = once;
  // Corrupt the completion token on line 37.
  std::size_t pos = 0;
  for (int line = 1; line < 37; ++line) pos = bad.find('\n', pos) + 1;
  const std::size_t c = bad.find("\"completion\": \" ", pos);
  bad[c + 16] = '2';
  std::size_t reported = 0;
  try {
    dataset_from_jsonl(bad, "bad");
  } catch (const FormatError& e) {
    reported = e.line();
  }
  ok = ok && reported == 37;
  detail += ", bad completion reported at line " + std::to_string(reported);

  const std::string csv_fixture =
      "id,comment_text,toxic\r\n"
      "a,\"hello, world\",0\r\n"
      "b,\"she said \"\"hi\"\"\",1\r\n"
      "c,\"line one\nline two, with comma\",1\n"
      "d,plain,0\n"
      "e,,1\n"
      "f,bad label,7\n"
      "g,\"short row\"\n"
      "h,\"\"\"quoted\"\" start\",0";
  const auto ingest = csv::ingest_toxic(csv_fixture, "comment_text", "toxic", "ext");
  const bool csv_ok = ingest.rows_read == 8 && ingest.dataset.size() == 5 && ingest.rejects.size() == 3 &&
                      ingest.dataset.examples[1].text == "she said \"hi\"" &&
                      ingest.dataset.examples[2].text == "line one\nline two, with comma" &&
                      ingest.dataset.examples[4].text == "\"quoted\" start" && ingest.rejects[0].line == 7;
  ok = ok && csv_ok;
  detail += ", CSV rows " + std::to_string(ingest.rows_read) + " kept " + std::to_string(ingest.dataset.size()) +
            " rejected " + std::to_string(ingest.rejects.size());
  return {ok, detail};
}

// ---- t-SNE ----

std::pair<bool, std::string> tsne_checks() {
  std::mt19937_64 gen(4242);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::vector<double>> x;
  std::vector<int> labels;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 20; ++i) {
      std::vector<double> v(50);
      for (int k = 0; k < 50; ++k) v[k] = nd(gen) + (c == 0 ? 0.0 : (k == 0 ? 10.0 : 0.0));
      x.push_back(v);
      labels.push_back(c);
    }
  TsneConfig cfg;
  cfg.seed = 3;
  const TsneResult a = tsne(x, cfg);
  const TsneResult b = tsne(x, cfg);
  bool identical = a.points.size() == b.points.size();
  for (std::size_t i = 0; identical && i < a.points.size(); ++i)
    identical = std::memcmp(a.points[i].data(), b.points[i].data(), sizeof(Point2)) == 0;

  // Silhouette oracle: computed here from pairwise distances.
  double sil = 0;
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    double own = 0, other = 0;
    int n_own = 0, n_other = 0;
    for (std::size_t j = 0; j < a.points.size(); ++j) {
      if (i == j) continue;
      const double d = std::hypot(a.points[i][0] - a.points[j][0], a.points[i][1] - a.points[j][1]);
      if (labels[i] == labels[j]) own += d, ++n_own;
      else other += d, ++n_other;
    }
    own /= n_own;
    other /= n_other;
    sil += (other - own) / std::max(own, other);
  }
  sil /= static_cast<double>(a.points.size());

  double worst_perp = 0;
  for (double p : a.achieved_perplexity) worst_perp = std::max(worst_perp, std::abs(p - a.perplexity));
  bool kl_monotone = a.kl_trace.size() >= 100;
  for (std::size_t i = a.kl_trace.size() - 99; kl_monotone && i < a.kl_trace.size(); ++i)
    kl_monotone = a.kl_trace[i] <= a.kl_trace[i - 1];
  const bool ok = sil > 0.5 && worst_perp <= 1e-5 && identical && kl_monotone;
  return {ok, "silhouette " + fmt(sil, 3) + ", max perplexity error " + std::to_string(worst_perp) + " (target " +
                  fmt(a.perplexity, 2) + "), rerun " + (identical ? "bit-identical" : "differs") + ", final-100 KL " +
                  (kl_monotone ? "non-increasing" : "increases") + " (" + fmt(a.kl_trace.back(), 4) + ")"};
}

// ---- crash/resume ----

const std::string kRun = "run-0001";

// Child process runs from scratch (or from whatever the store holds) and
// dies immediately after boundary number `kill_at`. True if it died there.
bool run_and_kill(const std::filesystem::path& root, const RunConfig& cfg, int kill_at, bool resume) {
  std::cout.flush();
  const pid_t pid = ::fork();
  if (pid == 0) {
    int seen = 0;
    EngineOptions opts;
    opts.on_boundary = [&](const std::string&) {
      if (++seen == kill_at) ::_exit(17);
    };
    Store store(root);
    ensure_simulator_datasets(store, cfg);
    auto backend = make_backend(cfg, store);
    auto engine = resume ? RunEngine::open(store, *backend, kRun, opts) : RunEngine::create(store, *backend, cfg, opts);
    OracleAnnotator oracle(cfg.backend.world);
    engine->drive(&oracle);
    ::_exit(0);
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  return WIFEXITED(status) && WEXITSTATUS(status) == 17;
}

void finish(const std::filesystem::path& root, const RunConfig& cfg) {
  Store store(root);
  auto backend = make_backend(cfg, store);
  auto engine = RunEngine::open(store, *backend, kRun);
  OracleAnnotator oracle(cfg.backend.world);
  engine->drive(&oracle);
}

std::pair<bool, std::string> crash_resume() {
  const RunConfig cfg = redloop::testing::sim_config(5);
  TempDir ref("ref");
  std::vector<std::string> tags;
  {
    EngineOptions opts;
    opts.on_boundary = [&](const std::string& t) { tags.push_back(t); };
    auto run = redloop::testing::make_sim_run(ref.path(), cfg, opts);
    OracleAnnotator oracle(cfg.backend.world);
    run.engine->drive(&oracle);
  }
  const auto expected = redloop::testing::snapshot_tree(ref.path());

  // Every non-label boundary, every 10th label, plus a double crash.
  std::vector<int> points;
  for (std::size_t i = 0; i < tags.size(); ++i)
    if (tags[i] != "labelled" || i % 10 == 0) points.push_back(static_cast<int>(i) + 1);
  int identical = 0, killed = 0;
  std::string first_diff;
  for (int k : points) {
    TempDir dir("crash");
    if (!run_and_kill(dir.path(), cfg, k, false)) continue;
    ++killed;
    finish(dir.path(), cfg);
    const auto got = redloop::testing::snapshot_tree(dir.path());
    if (got == expected) {
      ++identical;
    } else if (first_diff.empty()) {
      first_diff = "boundary " + std::to_string(k) + " (" + tags[k - 1] + ")";
      for (const auto& [f, c] : expected)
        if (!got.count(f) || got.at(f) != c) {
          first_diff += " differs in " + f;
          break;
        }
    }
  }
  TempDir dbl("crash2");
  bool double_ok = run_and_kill(dbl.path(), cfg, 40, false) && run_and_kill(dbl.path(), cfg, 25, true);
  if (double_ok) {
    finish(dbl.path(), cfg);
    double_ok = redloop::testing::snapshot_tree(dbl.path()) == expected;
  }
  const bool ok = killed == static_cast<int>(points.size()) && identical == killed && double_ok;
  return {ok, std::to_string(identical) + "/" + std::to_string(killed) + " kill points (of " +
                  std::to_string(tags.size()) + " boundaries) resume to an identical store, double crash " +
                  (double_ok ? "identical" : "differs") + (first_diff.empty() ? "" : "; first mismatch " + first_diff)};
}

// ---- holdout ----

std::pair<bool, std::string> holdout_immutability() {
  TempDir dir("holdout");
  const RunConfig cfg = redloop::testing::sim_config(8);
  Store store(dir.path());
  ensure_simulator_datasets(store, cfg);
  const std::string before = dataset_to_jsonl(store.get_dataset(cfg.holdout_dataset_id));

  bool direct = false;
  try {
    store.append_to_dataset(cfg.holdout_dataset_id, {{"x-1", "trig0 topic1", 1}});
  } catch (const ImmutableError&) {
    direct = true;
  }

  // Full loop: the holdout must be untouched and only ever evaluated.
  auto backend = make_backend(cfg, store);
  auto engine = RunEngine::create(store, *backend, cfg);
  OracleAnnotator oracle(cfg.backend.world);
  const RunStatus st = engine->drive(&oracle);
  bool untouched = st.stage == Stage::Completed &&
                   dataset_to_jsonl(store.get_dataset(cfg.holdout_dataset_id)) == before;
  for (const auto& m : store.metrics(engine->id())) untouched = untouched && m.test_set == cfg.holdout_dataset_id;

  // Loop path redirected at a holdout: retag the accumulated dataset mid-run.
  bool loop_blocked = false;
  {
    TempDir d2("holdout2");
    Store s2(d2.path());
    ensure_simulator_datasets(s2, cfg);
    auto b2 = make_backend(cfg, s2);
    EngineOptions opts;
    std::string acc_id;
    opts.on_boundary = [&](const std::string& tag) {
      if (tag == "prompting" && !acc_id.empty()) {
        // Stores have no retag operation; edit the file as a misconfigured
        // deployment would.
        Dataset acc = s2.get_dataset(acc_id);
        if (!acc.has_tag(DatasetTag::HoldoutTest)) {
          acc.tags.insert(DatasetTag::HoldoutTest);
          std::ofstream(d2.path() / "datasets" / (safe_name(acc_id) + ".json"), std::ios::trunc)
              << Json(acc).dump() << "\n";
        }
      }
    };
    auto e2 = RunEngine::create(s2, *b2, cfg, opts);
    acc_id = e2->id() + ".accumulated";
    const std::size_t size_before = s2.get_dataset(acc_id).size();
    const RunStatus st2 = e2->drive(&oracle);
    loop_blocked = st2.stage == Stage::Prompting && st2.suspended_reason &&
                   s2.get_dataset(acc_id).size() == size_before;
  }

  // Holdout changed behind the loop's back: the audit at evaluation stops it.
  bool audited = false;
  {
    TempDir d3("holdout3");
    Store s3(d3.path());
    ensure_simulator_datasets(s3, cfg);
    auto b3 = make_backend(cfg, s3);
    EngineOptions opts;
    bool tampered = false;
    opts.on_boundary = [&](const std::string& tag) {
      if (tag == "finetune-done" && !tampered) {
        tampered = true;
        Dataset h = s3.get_dataset(cfg.holdout_dataset_id);
        h.examples.front().label = 1 - h.examples.front().label;
        std::ofstream(d3.path() / "datasets" / (safe_name(h.id) + ".json"), std::ios::trunc)
            << Json(h).dump() << "\n";
      }
    };
    auto e3 = RunEngine::create(s3, *b3, cfg, opts);
    const RunStatus st3 = e3->drive(&oracle);
    audited = st3.stage == Stage::Evaluate && st3.suspended_reason &&
              st3.suspended_reason->find("holdout") != std::string::npos;
  }
  const bool ok = direct && untouched && loop_blocked && audited;
  return {ok, std::string("direct append ") + (direct ? "rejected" : "ACCEPTED") + ", full run " +
                  (untouched ? "left holdout byte-identical" : "CHANGED holdout") + ", loop append to holdout-tagged set " +
                  (loop_blocked ? "rejected" : "NOT rejected") + ", swapped holdout " +
                  (audited ? "caught by audit" : "NOT caught")};
}

}  // namespace

int main() {
  check("metric-oracle-equivalence", metric_equivalence);
  check("auroc-pair-oracle", auroc_pairs);
  check("bce-values", bce_values);
  check("adversary-loss-recomputable", adversary_loss);
  check("closed-loop-improvement", closed_loop);
  check("fooling-matrix-monte-carlo", fooling_monte_carlo);
  check("transfer-ordering", transfer_ordering);
  check("format-fidelity", format_fidelity);
  check("tsne", tsne_checks);
  check("crash-resume-determinism", crash_resume);
  check("holdout-immutability", holdout_immutability);
  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures;
}
