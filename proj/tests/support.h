#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>

#include "redloop/config.h"
#include "redloop/datastore.h"
#include "redloop/loop.h"
#include "redloop/service.h"
#include "redloop/simulator.h"

namespace redloop::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("redloop-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

inline RunConfig sim_config(std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  c.backend.world.seed = seed;
  c.parallelism = 2;
  return c;
}

struct SimRun {
  std::unique_ptr<Store> store;
  std::unique_ptr<ModelBackend> backend;
  std::unique_ptr<RunEngine> engine;
};

// Store + simulator backend + engine for `config`, datasets created.
inline SimRun make_sim_run(const std::filesystem::path& root, const RunConfig& config,
                           EngineOptions options = {}) {
  SimRun r;
  r.store = std::make_unique<Store>(root);
  ensure_simulator_datasets(*r.store, config);
  r.backend = make_backend(config, *r.store);
  r.engine = RunEngine::create(*r.store, *r.backend, config, std::move(options));
  return r;
}

inline std::string read_all(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// Relative path -> contents for every file under root, skipping temp files.
inline std::map<std::string, std::string> snapshot_tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = std::filesystem::relative(e.path(), root).string();
    if (rel.find(".tmp") != std::string::npos) continue;
    out[rel] = read_all(e.path());
  }
  return out;
}

}  // namespace redloop::testing
