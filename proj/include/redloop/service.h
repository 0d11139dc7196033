#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "redloop/analysis.h"
#include "redloop/backend.h"
#include "redloop/config.h"
#include "redloop/datastore.h"
#include "redloop/loop.h"

namespace httplib {
class Server;
}

namespace redloop {

// Creates the simulator world's seed and holdout datasets under the
// configured ids when the backend is the simulator and they are missing.
// Returns true when anything was written.
bool ensure_simulator_datasets(Store& store, const RunConfig& config);

std::unique_ptr<ModelBackend> make_backend(const RunConfig& config, const Store& store);

struct ServiceOptions {
  std::filesystem::path static_dir;  // served at "/" when it exists
  std::string api_token;             // empty: no auth
  std::function<std::unique_ptr<ModelBackend>(const RunConfig&)> backend_factory;
  EngineOptions engine;
  // How long the driver sleeps between checks while a run waits.
  double idle_poll_s = 0.05;
  int default_matrix_probes = 50;
};

// HTTP front end over a store. Each run gets a driver thread that steps its
// engine; human labels arrive through the annotation endpoints.
class Service {
 public:
  Service(Store& store, ServiceOptions options);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds to an ephemeral port on host and serves in a background thread.
  int start(const std::string& host = "127.0.0.1");
  // Binds to host:port and serves on the calling thread until stop().
  bool listen(const std::string& host, int port);
  void stop();

  // The run's engine, opening it from the store on first use. Null if unknown.
  RunEngine* engine(const std::string& run_id);
  std::string create_run(RunConfig config);
  // Waits until the run's driver thread exits (completion or stop).
  void join_run(const std::string& run_id);

 private:
  struct RunSlot {
    std::unique_ptr<ModelBackend> backend;
    std::unique_ptr<Annotator> oracle;
    std::unique_ptr<RunEngine> engine;
    std::thread driver;
    std::atomic<bool> stop{false};
  };

  void routes();
  RunSlot* slot(const std::string& run_id);
  RunSlot& attach(std::unique_ptr<RunSlot> s);
  void drive(RunSlot& s);
  std::unique_ptr<ModelBackend> backend_for(const RunConfig& config);
  FoolingMatrix compute_matrix(RunSlot& s, int probes, const std::string& mode, std::uint64_t seed);

  Store& store_;
  ServiceOptions options_;
  std::unique_ptr<httplib::Server> server_;
  std::thread server_thread_;
  std::mutex mu_;
  std::map<std::string, std::unique_ptr<RunSlot>> runs_;
  std::mutex analysis_mu_;
  std::map<std::string, std::pair<std::size_t, std::string>> embedding_maps_;
};

}  // namespace redloop
