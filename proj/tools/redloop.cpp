// redloop: headless driver for the red-teaming loop.
//
//   redloop init                          simulator seed + holdout datasets
//   redloop run --annotator simulated     full optimisation run
//   redloop resume --run run-0001
//   redloop eval --judge run-0001.judge-5 --testset holdout
//   redloop matrix --run run-0001 --probes 50
//   redloop baseline --k 0,5,10,25,50
//   redloop transfer --csv train.csv --subset 5000 --epochs 5
//   redloop tsne --run run-0001 --seed 0
//   redloop export --what metrics --run run-0001
//   redloop serve --listen 127.0.0.1:8080 --static ui/dist
//
// Exit status: 0 success, 1 usage error, 2 runtime failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "redloop/analysis.h"
#include "redloop/config.h"
#include "redloop/csv.h"
#include "redloop/datastore.h"
#include "redloop/error.h"
#include "redloop/fooling.h"
#include "redloop/loop.h"
#include "redloop/metrics.h"
#include "redloop/service.h"
#include "redloop/simulator.h"

using namespace redloop;

namespace {

struct Globals {
  std::string store = [] {
    const char* env = std::getenv("REDLOOP_STORE");
    return std::string(env ? env : "redloop-store");
  }();
  std::string config_path;
  bool json = false;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

RunConfig load_config(const Globals& g) {
  if (g.config_path.empty()) return RunConfig{};
  return load_run_config(g.config_path);
}

RunConfig run_config(const Store& store, const std::string& run_id) {
  auto state = store.get_run_state(run_id);
  if (!state) throw NotFoundError("run '" + run_id + "' not found");
  return state->at("config").get<RunConfig>();
}

std::vector<int> parse_ks(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      int k = std::stoi(item, &used);
      if (used != item.size() || k < 0) throw std::invalid_argument(item);
      out.push_back(k);
    } catch (const std::exception&) {
      throw UsageError("--k expects comma-separated non-negative integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError("--k is empty");
  return out;
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw Error("cannot write " + out_path);
  f << text;
}

std::string metrics_table(const std::vector<MetricsReport>& reports, const std::string& key = "Iteration") {
  std::ostringstream os;
  os << key << "  Accuracy  Precision  Recall  AUROC\n";
  for (const auto& r : reports)
    os << (r.iteration ? std::to_string(*r.iteration) : "-") << "  " << format_metric(r.accuracy, 3) << "  "
       << format_metric(r.precision, 3) << "  " << format_metric(r.recall, 3) << "  "
       << format_metric(r.auroc, 3) << "\n";
  return os.str();
}

int finish_run(const Globals& g, Store& store, RunEngine& engine) {
  const RunStatus st = engine.status();
  const auto reports = store.metrics(engine.id());
  if (g.json) {
    std::cout << Json{{"status", st}, {"metrics", reports}}.dump(2) << "\n";
  } else {
    std::cout << "run " << engine.id() << ": " << to_string(st.stage);
    if (st.suspended_reason) std::cout << " (suspended: " << *st.suspended_reason << ")";
    std::cout << "\n" << metrics_table(reports);
  }
  return st.stage == Stage::Completed ? 0 : 2;
}

int drive_human(const Globals& g, Store& store, const std::string& run_id, const std::string& listen,
                const std::string& static_dir) {
  ServiceOptions opts;
  opts.static_dir = static_dir;
  Service service(store, opts);
  RunEngine* engine = service.engine(run_id);
  const auto colon = listen.rfind(':');
  const std::string host = listen.substr(0, colon);
  const int port = std::stoi(listen.substr(colon + 1));
  std::thread server([&] { service.listen(host, port); });
  std::cerr << "annotation API for " << run_id << " on http://" << listen << "\n";
  service.join_run(run_id);
  service.stop();
  server.join();
  return finish_run(g, store, *engine);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial red-teaming loop: adversary prompting rounds and judge fine-tuning"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--store", g.store, "Store directory (env REDLOOP_STORE)");
  app.add_option("--config", g.config_path, "Run config JSON (backend, models, loop constants)");
  app.add_flag("--json", g.json, "Machine-readable JSON on stdout");

  auto* init = app.add_subcommand("init", "Create the simulator seed and holdout datasets");

  std::string annotator = "simulated", listen = "127.0.0.1:8080", static_dir;
  int rounds = -1, quota = -1;
  auto* run = app.add_subcommand("run", "Run the full optimisation loop");
  run->add_option("--annotator", annotator, "simulated | human")->check(CLI::IsMember({"simulated", "human"}));
  run->add_option("--rounds", rounds, "Override rounds");
  run->add_option("--prompts-per-round", quota, "Override prompts per round");
  run->add_option("--listen", listen, "host:port for the annotation API (human annotator)");
  run->add_option("--static", static_dir, "Annotation UI assets (human annotator)");
  bool reveal = false;
  run->add_flag("--reveal-verdict", reveal, "Show the judge verdict to annotators");

  std::string run_id;
  auto* resume = app.add_subcommand("resume", "Resume a suspended or interrupted run");
  resume->add_option("--run", run_id, "Run id")->required();
  resume->add_option("--listen", listen, "host:port for the annotation API (human annotator)");

  std::string judge, testset = "holdout";
  auto* eval = app.add_subcommand("eval", "Evaluate a judge version on a dataset");
  eval->add_option("--judge", judge, "Judge version id or backend model")->required();
  eval->add_option("--testset", testset, "Dataset id");

  int probes = 50;
  std::string mode = "fresh";
  std::uint64_t seed = 0;
  auto* matrix = app.add_subcommand("matrix", "Fooling matrix of a run's adversary and judge versions");
  matrix->add_option("--run", run_id, "Run id")->required();
  matrix->add_option("--probes", probes, "Probes per cell")->check(CLI::PositiveNumber);
  matrix->add_option("--mode", mode, "fresh | replay")->check(CLI::IsMember({"fresh", "replay"}));
  matrix->add_option("--seed", seed, "Probe seed");

  std::string ks = "0,5,10,25,50", train_id = "seed", chat_model;
  auto* baseline = app.add_subcommand("baseline", "In-context classification baseline over k examples");
  baseline->add_option("--k", ks, "Comma-separated example counts");
  baseline->add_option("--train", train_id, "Example pool dataset");
  baseline->add_option("--testset", testset, "Dataset id");
  baseline->add_option("--model", chat_model, "Chat model (default: config chat_model)");
  baseline->add_option("--seed", seed, "Example draw seed");

  std::string csv_path, test_csv, text_col = "comment_text", label_col = "toxic";
  int subset = 5000, epochs = 5, synth = 6000;
  auto* transfer = app.add_subcommand("transfer", "Fine-tune on an external toxic-comment corpus");
  transfer->add_option("--csv", csv_path, "Training CSV (omit with the simulator to synthesise one)");
  transfer->add_option("--test-csv", test_csv, "Test CSV (default: 20% seeded split of --csv)");
  transfer->add_option("--text-column", text_col);
  transfer->add_option("--label-column", label_col);
  transfer->add_option("--subset", subset, "Training subset size")->check(CLI::PositiveNumber);
  transfer->add_option("--epochs", epochs, "Fine-tune epochs")->check(CLI::PositiveNumber);
  transfer->add_option("--judge", judge, "Pre-trained judge version for the transfer arm");
  transfer->add_option("--seed", seed, "Subset seed");
  transfer->add_option("--synthetic-size", synth, "Synthetic corpus size when --csv is omitted");

  std::string dataset_id, out_path;
  double perplexity = 30.0;
  auto* tsne_cmd = app.add_subcommand("tsne", "Embed a corpus and reduce it with t-SNE");
  tsne_cmd->add_option("--dataset", dataset_id, "Dataset id");
  tsne_cmd->add_option("--run", run_id, "Run id (seed plus generated prompts)");
  tsne_cmd->add_option("--seed", seed, "t-SNE seed");
  tsne_cmd->add_option("--perplexity", perplexity);
  tsne_cmd->add_option("--out", out_path, "Scatter CSV path (default stdout)");

  std::string what, format;
  auto* exp = app.add_subcommand("export", "Export metrics, a dataset or a fooling matrix");
  exp->add_option("--what", what, "metrics | dataset | matrix")
      ->required()
      ->check(CLI::IsMember({"metrics", "dataset", "matrix"}));
  exp->add_option("--run", run_id, "Run id (metrics, matrix)");
  exp->add_option("--dataset", dataset_id, "Dataset id (dataset)");
  exp->add_option("--format", format, "json | csv | jsonl");
  exp->add_option("--out", out_path, "Output path (default stdout)");

  std::string token_env = "REDLOOP_API_TOKEN";
  auto* serve = app.add_subcommand("serve", "HTTP API and annotation UI");
  serve->add_option("--listen", listen, "host:port");
  serve->add_option("--static", static_dir, "Annotation UI assets served at /");
  serve->add_option("--token-env", token_env, "Environment variable holding the optional API token");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    Store store(g.store);
    RunConfig config = load_config(g);

    if (*init) {
      const bool wrote = ensure_simulator_datasets(store, config);
      if (g.json) std::cout << Json{{"created", wrote}}.dump() << "\n";
      else std::cout << (wrote ? "created " : "kept ") << config.seed_dataset_id << ", " << config.holdout_dataset_id << "\n";
      return 0;
    }

    if (*run) {
      if (rounds >= 0) config.rounds = rounds;
      if (quota >= 0) config.prompts_per_round = quota;
      if (reveal) config.reveal_verdict = true;
      config.annotator = annotator == "human" ? AnnotatorKind::HumanViaService : AnnotatorKind::SimulatedOracle;
      config.validate();
      ensure_simulator_datasets(store, config);
      auto backend = make_backend(config, store);
      auto engine = RunEngine::create(store, *backend, config);
      if (config.annotator == AnnotatorKind::HumanViaService) {
        const std::string id = engine->id();
        engine.reset();
        return drive_human(g, store, id, listen, static_dir);
      }
      OracleAnnotator oracle(config.backend.world);
      engine->drive(&oracle);
      return finish_run(g, store, *engine);
    }

    if (*resume) {
      config = run_config(store, run_id);
      auto backend = make_backend(config, store);
      auto engine = RunEngine::open(store, *backend, run_id);
      engine->resume();
      if (config.annotator == AnnotatorKind::HumanViaService) {
        engine.reset();
        return drive_human(g, store, run_id, listen, static_dir);
      }
      OracleAnnotator oracle(config.backend.world);
      engine->drive(&oracle);
      return finish_run(g, store, *engine);
    }

    if (*eval) {
      auto backend = make_backend(config, store);
      std::string model = judge;
      std::optional<int> iteration;
      if (store.has_version(judge)) {
        const ModelVersion v = store.get_version(judge);
        model = v.backend_ref;
        iteration = v.iteration;
      }
      MetricsReport r = evaluate_judge(*backend, model, store.get_dataset(testset), config.parallelism);
      r.model_version = judge;
      r.iteration = iteration;
      if (g.json) std::cout << Json(r).dump(2) << "\n";
      else std::cout << metrics_table({r});
      return 0;
    }

    if (*matrix) {
      config = run_config(store, run_id);
      auto backend = make_backend(config, store);
      const auto rows = run_adversary_rows(store, run_id);
      const auto cols = run_judge_columns(store, run_id);
      FoolingMatrix m;
      if (mode == "replay") {
        std::vector<std::string> ids;
        for (const auto& r : rows) ids.push_back(r.version);
        m = fooling_matrix_replay(*backend, run_history(store, run_id), ids, cols, config.parallelism);
      } else {
        if (config.backend.kind != "simulator")
          throw UsageError("fresh probes need the simulated annotator; use --mode replay");
        OracleAnnotator oracle(config.backend.world);
        FoolingOptions fo;
        fo.probes_per_cell = probes;
        fo.seed = seed;
        fo.parallelism = config.parallelism;
        fo.system_message = config.adversary_system_message;
        fo.instruction = config.adversary_instruction;
        m = fooling_matrix(*backend, rows, cols, oracle, fo);
      }
      store.put_blob(fooling_blob_name(run_id), Json(m).dump());
      std::cout << (g.json ? Json(m).dump(2) + "\n" : fooling_csv(m));
      return 0;
    }

    if (*baseline) {
      auto backend = make_backend(config, store);
      BaselineOptions bo;
      bo.seed = seed;
      bo.parallelism = config.parallelism;
      bo.system_message = config.judge_system_message;
      const auto rows = incontext_baseline(*backend, chat_model.empty() ? config.chat_model : chat_model,
                                           parse_ks(ks), store.get_dataset(train_id), store.get_dataset(testset), bo);
      if (g.json) {
        Json out = Json::array();
        for (const auto& r : rows)
          out.push_back({{"k", r.k}, {"report", r.report}, {"unparseable", r.unparseable}, {"unreliable", r.unreliable}});
        std::cout << out.dump(2) << "\n";
      } else {
        std::cout << "k  Accuracy  Precision  Recall  AUROC  unparseable\n";
        for (const auto& r : rows)
          std::cout << r.k << "  " << format_metric(r.report.accuracy, 3) << "  " << format_metric(r.report.precision, 3)
                    << "  " << format_metric(r.report.recall, 3) << "  " << format_metric(r.report.auroc, 3) << "  "
                    << r.unparseable << (r.unreliable ? " (unreliable)" : "") << "\n";
      }
      return 0;
    }

    if (*transfer) {
      auto backend = make_backend(config, store);
      Dataset train, test;
      if (csv_path.empty()) {
        if (config.backend.kind != "simulator") throw UsageError("--csv is required with a remote backend");
        const sim::World world(config.backend.world);
        train = Dataset{"external-train", world.external_corpus(synth, 1, "ext-train"), {DatasetTag::ExternalTransfer}};
        test = Dataset{"external-test", world.external_corpus(synth / 5, 2, "ext-test"), {DatasetTag::ExternalTransfer}};
      } else {
        auto ingest = csv::ingest_toxic_file(csv_path, text_col, label_col, "external");
        for (const auto& r : ingest.rejects)
          std::cerr << csv_path << ":" << r.line << ": rejected row " << r.row << ": " << r.reason << "\n";
        if (!test_csv.empty()) {
          train = ingest.dataset;
          test = csv::ingest_toxic_file(test_csv, text_col, label_col, "external-test").dataset;
        } else {
          Dataset shuffled = seeded_subset(ingest.dataset, static_cast<int>(ingest.dataset.size()) - 1, seed + 1);
          shuffled.examples.push_back(ingest.dataset.examples.back());
          const std::size_t cut = shuffled.size() * 4 / 5;
          train = Dataset{"external-train", {shuffled.examples.begin(), shuffled.examples.begin() + static_cast<std::ptrdiff_t>(cut)},
                          {DatasetTag::ExternalTransfer}};
          test = Dataset{"external-test", {shuffled.examples.begin() + static_cast<std::ptrdiff_t>(cut), shuffled.examples.end()},
                         {DatasetTag::ExternalTransfer}};
        }
      }
      TransferConfig tc{std::min<int>(subset, static_cast<int>(train.size())), epochs, seed};
      std::string pretrained = config.judge_base_model;
      if (!judge.empty()) pretrained = store.has_version(judge) ? store.get_version(judge).backend_ref : judge;
      const TransferResult scratch = run_transfer_finetune(*backend, config.judge_base_model, train, test, tc);
      std::optional<TransferResult> arm;
      if (!judge.empty()) arm = run_transfer_finetune(*backend, pretrained, train, test, tc);
      if (g.json) {
        Json out{{"subset", tc.subset_size}, {"epochs", tc.epochs}, {"from_scratch", scratch.report}};
        if (arm) out["transferred"] = arm->report;
        std::cout << out.dump(2) << "\n";
      } else {
        std::cout << "subset " << tc.subset_size << ", " << tc.epochs << " epochs\n";
        std::cout << "from scratch:\n" << metrics_table({scratch.report}, "Arm");
        if (arm) std::cout << "transferred from " << judge << ":\n" << metrics_table({arm->report}, "Arm");
      }
      return 0;
    }

    if (*tsne_cmd) {
      std::vector<CorpusItem> items;
      if (!run_id.empty()) {
        config = run_config(store, run_id);
        items = run_corpus(store, run_id);
      } else if (!dataset_id.empty()) {
        for (const auto& e : store.get_dataset(dataset_id).examples)
          items.push_back({e.prompt_id, e.text, e.label == 1 ? HumanLabel::Problematic : HumanLabel::Unproblematic,
                           PromptSource::Seed, std::nullopt});
      } else {
        throw UsageError("tsne needs --dataset or --run");
      }
      auto backend = make_backend(config, store);
      EmbeddingCache cache(store.root() / "cache" / "embeddings.json");
      const auto vectors = embed_corpus(items, *backend, config.embedding_model, cache, config.parallelism);
      cache.save();
      std::vector<std::vector<double>> raw;
      for (const auto& v : vectors) raw.push_back(v.values);
      TsneConfig tc;
      tc.seed = seed;
      tc.perplexity = perplexity;
      const TsneResult t = tsne(raw, tc);
      if (t.degenerate) std::cerr << "warning: " << t.warning << "\n";
      std::vector<int> labels;
      for (const auto& it : items) labels.push_back(it.label == HumanLabel::Problematic ? 1 : 0);
      const SeparationReport sep = separation_report(t.points, labels);
      emit(scatter_csv(items, t.points), out_path);
      std::cerr << "silhouette " << format_metric(sep.silhouette, 3) << ", centroid distance "
                << format_metric(sep.centroid_distance, 3) << ", " << sep.outliers.size() << " outliers\n";
      for (std::size_t i = 0; i < std::min<std::size_t>(sep.outliers.size(), 5); ++i)
        std::cerr << "  outlier " << items[sep.outliers[i].index].id << " margin "
                  << format_metric(sep.outliers[i].margin, 3) << "\n";
      return 0;
    }

    if (*exp) {
      if (what == "metrics") {
        if (run_id.empty()) throw UsageError("export --what metrics needs --run");
        const auto reports = store.metrics(run_id);
        if (format == "csv") {
          std::string out = metrics::csv_header() + "\n";
          for (const auto& r : reports) out += metrics::csv_row(r) + "\n";
          emit(out, out_path);
        } else {
          emit(Json(reports).dump(2) + "\n", out_path);
        }
      } else if (what == "dataset") {
        if (dataset_id.empty()) throw UsageError("export --what dataset needs --dataset");
        const Dataset d = store.get_dataset(dataset_id);
        emit(format == "json" ? Json(d).dump(2) + "\n" : dataset_to_jsonl(d), out_path);
      } else {
        if (run_id.empty()) throw UsageError("export --what matrix needs --run");
        auto blob = store.get_blob(fooling_blob_name(run_id));
        if (!blob) throw NotFoundError("no fooling matrix for " + run_id + "; run `matrix` first");
        const FoolingMatrix m = Json::parse(*blob).get<FoolingMatrix>();
        emit(format == "csv" ? fooling_csv(m) : Json(m).dump(2) + "\n", out_path);
      }
      return 0;
    }

    if (*serve) {
      ServiceOptions opts;
      opts.static_dir = static_dir;
      if (const char* t = std::getenv(token_env.c_str())) opts.api_token = t;
      Service service(store, opts);
      const auto colon = listen.rfind(':');
      if (colon == std::string::npos) throw UsageError("--listen expects host:port");
      std::cerr << "serving " << g.store << " on http://" << listen << "\n";
      if (!service.listen(listen.substr(0, colon), std::stoi(listen.substr(colon + 1))))
        throw Error("cannot listen on " + listen);
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    if (g.json) std::cout << Json{{"error", e.what()}}.dump() << "\n";
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
