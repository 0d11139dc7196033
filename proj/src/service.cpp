#include "redloop/service.h"

#include <chrono>

#include <httplib.h>

#include "redloop/error.h"
#include "redloop/fooling.h"
#include "redloop/metrics.h"
#include "redloop/remote.h"
#include "redloop/simulator.h"

namespace redloop {

bool ensure_simulator_datasets(Store& store, const RunConfig& config) {
  if (config.backend.kind != "simulator") return false;
  const sim::World world(config.backend.world);
  bool wrote = false;
  if (!store.has_dataset(config.seed_dataset_id)) {
    Dataset d = world.seed_dataset();
    d.id = config.seed_dataset_id;
    store.put_dataset(d);
    wrote = true;
  }
  if (!store.has_dataset(config.holdout_dataset_id)) {
    Dataset d = world.holdout_dataset();
    d.id = config.holdout_dataset_id;
    store.put_dataset(d);
    wrote = true;
  }
  return wrote;
}

std::unique_ptr<ModelBackend> make_backend(const RunConfig& config, const Store& store) {
  if (config.backend.kind == "remote")
    return std::make_unique<RemoteBackend>(config.backend.remote, config.judge_system_message);
  return std::make_unique<SimulatorBackend>(config.backend.world, store.backend_dir());
}

namespace {

using Clock = std::chrono::steady_clock;

void reply(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& message, Json fields = Json::array()) {
  reply(res, status, Json{{"error", message}, {"fields", std::move(fields)}});
}

// Maps library errors onto HTTP statuses.
template <class F>
void guarded(httplib::Response& res, F&& fn) {
  try {
    fn();
  } catch (const NotFoundError& e) {
    reply_error(res, 404, e.what());
  } catch (const ConflictError& e) {
    reply_error(res, 409, e.what());
  } catch (const SchemaError& e) {
    reply_error(res, 400, e.what());
  } catch (const PreconditionError& e) {
    reply_error(res, 400, e.what());
  } catch (const Json::exception& e) {
    reply_error(res, 400, e.what());
  } catch (const std::exception& e) {
    reply_error(res, 500, e.what());
  }
}

Json parse_body(const httplib::Request& req) {
  try {
    return req.body.empty() ? Json::object() : Json::parse(req.body);
  } catch (const Json::parse_error& e) {
    throw SchemaError(std::string("malformed JSON body: ") + e.what());
  }
}

// Per-field checks so a bad request names every offending field.
Json config_field_errors(const Json& j) {
  Json errors = Json::array();
  const auto positive_int = [&](const char* key, int min) {
    if (!j.contains(key)) return;
    const Json& v = j[key];
    if (!v.is_number_integer() || v.get<long long>() < min)
      errors.push_back({{"field", key}, {"error", "must be an integer >= " + std::to_string(min)}});
  };
  positive_int("rounds", 0);
  positive_int("prompts_per_round", 1);
  positive_int("finetune_epochs_per_round", 1);
  positive_int("initial_finetune_epochs", 1);
  positive_int("max_discards_factor", 1);
  positive_int("parallelism", 1);
  positive_int("max_tokens", 1);
  if (j.contains("example_pool_cap") && !j["example_pool_cap"].is_null()) positive_int("example_pool_cap", 1);
  for (const char* key : {"seed_dataset_id", "holdout_dataset_id", "adversary_model", "judge_base_model"})
    if (j.contains(key) && !j[key].is_string())
      errors.push_back({{"field", key}, {"error", "must be a string"}});
  if (j.contains("annotator") &&
      !(j["annotator"] == "simulated" || j["annotator"] == "human"))
    errors.push_back({{"field", "annotator"}, {"error", "must be 'simulated' or 'human'"}});
  if (j.contains("temperature") && (!j["temperature"].is_number() || j["temperature"].get<double>() < 0))
    errors.push_back({{"field", "temperature"}, {"error", "must be a number >= 0"}});
  return errors;
}

std::string run_of_prompt(const std::string& prompt_id) {
  const auto dot = prompt_id.rfind(".p");
  return dot == std::string::npos ? std::string() : prompt_id.substr(0, dot);
}

}  // namespace

Service::Service(Store& store, ServiceOptions options)
    : store_(store), options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  routes();
}

Service::~Service() {
  stop();
  std::lock_guard lock(mu_);
  for (auto& [id, s] : runs_) s->stop = true;
  for (auto& [id, s] : runs_)
    if (s->driver.joinable()) s->driver.join();
}

int Service::start(const std::string& host) {
  const int port = server_->bind_to_any_port(host);
  if (port < 0) throw Error("cannot bind " + host);
  server_thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port;
}

bool Service::listen(const std::string& host, int port) { return server_->listen(host, port); }

void Service::stop() {
  if (server_) server_->stop();
  if (server_thread_.joinable()) server_thread_.join();
}

std::unique_ptr<ModelBackend> Service::backend_for(const RunConfig& config) {
  if (options_.backend_factory) return options_.backend_factory(config);
  return make_backend(config, store_);
}

Service::RunSlot& Service::attach(std::unique_ptr<RunSlot> s) {
  RunSlot& ref = *s;
  const std::string id = s->engine->id();
  runs_[id] = std::move(s);
  ref.driver = std::thread([this, &ref] { drive(ref); });
  return ref;
}

std::string Service::create_run(RunConfig config) {
  config.validate();
  ensure_simulator_datasets(store_, config);
  auto s = std::make_unique<RunSlot>();
  s->backend = backend_for(config);
  if (config.annotator == AnnotatorKind::SimulatedOracle)
    s->oracle = std::make_unique<OracleAnnotator>(config.backend.world);
  s->engine = RunEngine::create(store_, *s->backend, config, options_.engine);
  std::lock_guard lock(mu_);
  return attach(std::move(s)).engine->id();
}

Service::RunSlot* Service::slot(const std::string& run_id) {
  std::lock_guard lock(mu_);
  if (auto it = runs_.find(run_id); it != runs_.end()) return it->second.get();
  auto state = store_.get_run_state(run_id);
  if (!state) return nullptr;
  const RunConfig config = state->at("config").get<RunConfig>();
  auto s = std::make_unique<RunSlot>();
  s->backend = backend_for(config);
  if (config.annotator == AnnotatorKind::SimulatedOracle)
    s->oracle = std::make_unique<OracleAnnotator>(config.backend.world);
  s->engine = RunEngine::open(store_, *s->backend, run_id, options_.engine);
  return &attach(std::move(s));
}

RunEngine* Service::engine(const std::string& run_id) {
  RunSlot* s = slot(run_id);
  return s ? s->engine.get() : nullptr;
}

void Service::join_run(const std::string& run_id) {
  RunSlot* s = slot(run_id);
  if (s && s->driver.joinable()) s->driver.join();
}

void Service::drive(RunSlot& s) {
  auto last_input = Clock::now();
  const double timeout = s.engine->config().annotation_timeout_s;
  while (!s.stop) {
    if (s.engine->step(s.oracle.get())) {
      last_input = Clock::now();
      continue;
    }
    const RunStatus st = s.engine->status();
    if (st.stage == Stage::Completed) break;
    if (s.engine->wait_for_input(options_.idle_poll_s)) {
      last_input = Clock::now();
      continue;
    }
    const bool awaiting_labels = !st.paused && !st.suspended_reason;
    if (!awaiting_labels) {
      last_input = Clock::now();
    } else if (std::chrono::duration<double>(Clock::now() - last_input).count() > timeout) {
      s.engine->suspend(AnnotatorTimeoutError("annotator timeout: no label for " + std::to_string(timeout) +
                                              " s in round " + std::to_string(st.round_index))
                            .what());
      last_input = Clock::now();
    }
  }
}

FoolingMatrix Service::compute_matrix(RunSlot& s, int probes, const std::string& mode, std::uint64_t seed) {
  const RunConfig& config = s.engine->config();
  const auto rows = run_adversary_rows(store_, s.engine->id());
  const auto cols = run_judge_columns(store_, s.engine->id());
  if (rows.empty()) throw ConflictError("run has no adversary versions yet");
  std::unique_ptr<Annotator> oracle;
  Annotator* annotator = s.oracle.get();
  if (!annotator && config.backend.kind == "simulator") {
    oracle = std::make_unique<OracleAnnotator>(config.backend.world);
    annotator = oracle.get();
  }
  if (mode == "replay" || !annotator) {
    std::vector<std::string> ids;
    for (const auto& r : rows) ids.push_back(r.version);
    return fooling_matrix_replay(*s.backend, run_history(store_, s.engine->id()), ids, cols,
                                 config.parallelism, options_.engine.retry);
  }
  if (mode != "fresh") throw SchemaError("mode must be 'fresh' or 'replay'");
  FoolingOptions fo;
  fo.probes_per_cell = probes;
  fo.seed = seed;
  fo.parallelism = config.parallelism;
  fo.system_message = config.adversary_system_message;
  fo.instruction = config.adversary_instruction;
  fo.temperature = config.temperature;
  fo.max_tokens = config.max_tokens;
  fo.retry = options_.engine.retry;
  return fooling_matrix(*s.backend, rows, cols, *annotator, fo);
}

void Service::routes() {
  httplib::Server& srv = *server_;

  if (!options_.api_token.empty()) {
    srv.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      const bool api = req.path.rfind("/runs", 0) == 0 || req.path.rfind("/annotations", 0) == 0;
      if (!api || req.get_header_value("Authorization") == "Bearer " + options_.api_token)
        return httplib::Server::HandlerResponse::Unhandled;
      reply_error(res, 401, "missing or invalid API token");
      return httplib::Server::HandlerResponse::Handled;
    });
  }

  srv.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    reply(res, 200, Json{{"status", "ok"}});
  });

  srv.Post("/runs", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      Json body = parse_body(req);
      if (body.contains("config")) body = body["config"];
      if (!body.is_object()) throw SchemaError("run config must be a JSON object");
      if (Json errors = config_field_errors(body); !errors.empty()) {
        reply_error(res, 400, "invalid run config", errors);
        return;
      }
      const std::string id = create_run(body.get<RunConfig>());
      reply(res, 201, Json{{"run_id", id}});
    });
  });

  srv.Get("/runs", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      Json out = Json::array();
      for (const auto& id : store_.list_runs()) {
        auto state = store_.get_run_state(id);
        out.push_back({{"run_id", id}, {"stage", state ? state->value("stage", "") : ""}});
      }
      reply(res, 200, out);
    });
  });

  srv.Get(R"(/runs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      RunEngine* e = engine(req.matches[1]);
      if (!e) throw NotFoundError("run '" + std::string(req.matches[1]) + "' not found");
      reply(res, 200, e->status());
    });
  });

  srv.Post(R"(/runs/([^/]+)/(pause|resume))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      RunEngine* e = engine(req.matches[1]);
      if (!e) throw NotFoundError("run '" + std::string(req.matches[1]) + "' not found");
      if (req.matches[2] == "pause") e->pause();
      else e->resume();
      reply(res, 200, e->status());
    });
  });

  srv.Get("/annotations/next", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.has_param("run")) {
        reply_error(res, 400, "missing query parameter", Json::array({{{"field", "run"}, {"error", "required"}}}));
        return;
      }
      const std::string run = req.get_param_value("run");
      RunEngine* e = engine(run);
      if (!e) throw NotFoundError("run '" + run + "' not found");
      const auto next = e->next_annotation();
      Json status = e->status();
      if (!next) {
        reply(res, 200, Json{{"prompt_id", nullptr}, {"status", status}});
        return;
      }
      Json out{{"prompt_id", next->prompt.id},
               {"text", next->prompt.text},
               {"round_index", next->prompt.round_origin ? Json(*next->prompt.round_origin) : Json(nullptr)},
               {"queue_length", e->queue_length()},
               {"status", status}};
      if (e->config().reveal_verdict) out["judge"] = next->judge;
      reply(res, 200, out);
    });
  });

  srv.Post(R"(/annotations/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string prompt_id = req.matches[1];
      const Json body = parse_body(req);
      if (!body.is_object() || !body.contains("label") || !body["label"].is_string()) {
        reply_error(res, 400, "invalid annotation",
                    Json::array({{{"field", "label"}, {"error", "required: problematic, unproblematic or discard"}}}));
        return;
      }
      HumanLabel label;
      try {
        label = human_label_from_string(body["label"].get<std::string>());
      } catch (const SchemaError& e) {
        reply_error(res, 400, e.what(), Json::array({{{"field", "label"}, {"error", e.what()}}}));
        return;
      }
      const std::string run = body.contains("run") ? body["run"].get<std::string>() : run_of_prompt(prompt_id);
      RunEngine* e = run.empty() ? nullptr : engine(run);
      if (!e || !e->knows_prompt(prompt_id)) throw NotFoundError("prompt '" + prompt_id + "' not found");
      try {
        const LabelOutcome outcome = e->submit_label(prompt_id, label);
        reply(res, 200, Json{{"prompt_id", prompt_id},
                             {"label", to_string(label)},
                             {"outcome", outcome == LabelOutcome::Accepted ? "accepted" : "duplicate"},
                             {"status", e->status()}});
      } catch (const ConflictError& c) {
        const auto recorded = e->recorded_label(prompt_id);
        reply(res, 409, Json{{"error", c.what()},
                             {"recorded_label", recorded ? Json(to_string(*recorded)) : Json(nullptr)}});
      }
    });
  });

  srv.Get(R"(/runs/([^/]+)/metrics)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!engine(req.matches[1])) throw NotFoundError("run '" + std::string(req.matches[1]) + "' not found");
      const auto reports = store_.metrics(req.matches[1]);
      if (req.get_param_value("format") == "csv") {
        std::string out = metrics::csv_header() + "\n";
        for (const auto& r : reports) out += metrics::csv_row(r) + "\n";
        res.set_content(out, "text/csv");
        return;
      }
      reply(res, 200, Json(reports));
    });
  });

  const auto matrix_handler = [this](const httplib::Request& req, httplib::Response& res, bool recompute) {
    guarded(res, [&] {
      const std::string run = req.matches[1];
      RunSlot* s = slot(run);
      if (!s) throw NotFoundError("run '" + run + "' not found");
      if (!recompute) {
        if (auto blob = store_.get_blob(fooling_blob_name(run))) {
          res.set_content(*blob, "application/json");
          return;
        }
      }
      const Json body = recompute ? parse_body(req) : Json::object();
      const int probes = body.value("probes", options_.default_matrix_probes);
      if (probes < 1) {
        reply_error(res, 400, "invalid probes", Json::array({{{"field", "probes"}, {"error", "must be >= 1"}}}));
        return;
      }
      const FoolingMatrix m =
          compute_matrix(*s, probes, body.value("mode", std::string("fresh")), body.value("seed", std::uint64_t{0}));
      const std::string out = Json(m).dump();
      store_.put_blob(fooling_blob_name(run), out);
      res.set_content(out, "application/json");
    });
  };
  srv.Get(R"(/runs/([^/]+)/fooling-matrix)",
          [matrix_handler](const httplib::Request& req, httplib::Response& res) { matrix_handler(req, res, false); });
  srv.Post(R"(/runs/([^/]+)/fooling-matrix)",
           [matrix_handler](const httplib::Request& req, httplib::Response& res) { matrix_handler(req, res, true); });

  srv.Get(R"(/runs/([^/]+)/embedding-map)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string run = req.matches[1];
      RunSlot* s = slot(run);
      if (!s) throw NotFoundError("run '" + run + "' not found");
      const auto items = run_corpus(store_, run);
      std::lock_guard lock(analysis_mu_);
      auto& cached = embedding_maps_[run];
      if (cached.first != items.size() || cached.second.empty()) {
        EmbeddingCache cache(store_.root() / "cache" / "embeddings.json");
        const auto vectors = embed_corpus(items, *s->backend, s->engine->config().embedding_model, cache,
                                          s->engine->config().parallelism, options_.engine.retry);
        cache.save();
        std::vector<std::vector<double>> raw;
        for (const auto& v : vectors) raw.push_back(v.values);
        const TsneResult t = tsne(raw);
        cached = {items.size(), scatter_csv(items, t.points)};
      }
      res.set_content(cached.second, "text/csv");
    });
  });

  if (!options_.static_dir.empty() && std::filesystem::is_directory(options_.static_dir))
    srv.set_mount_point("/", options_.static_dir.string());
}

}  // namespace redloop
