#pragma once

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "redloop/domain.h"

namespace redloop {

// Separator appended to every prompt in fine-tune files.
inline constexpr std::string_view kPromptSeparator = "\n\n###\n\n";

// One line per example:
//   {"prompt": "<text>\n\n###\n\n", "completion": " 0"}
// LF line endings, UTF-8, key order and spacing exactly as shown.
std::string dataset_to_jsonl(const Dataset& dataset);

// Inverse of dataset_to_jsonl. Throws FormatError with the 1-based line on a
// malformed line, a missing or repeated separator, extra keys, or a
// completion other than " 0" / " 1". Example ids are "<id>-<line>".
Dataset dataset_from_jsonl(std::string_view content, const std::string& id,
                           std::set<DatasetTag> tags = {});

void save_dataset_jsonl(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset_jsonl(const std::filesystem::path& path, const std::string& id,
                           std::set<DatasetTag> tags = {});

// Single-directory store:
//   manifest.json          committed index; the only file readers trust
//   datasets/<id>.json
//   versions/<id>.json
//   runs/<run>/state.json  rounds.jsonl  metrics.jsonl  discards.jsonl
//   blobs/<name>
//   backend/               owned by the simulator backend, if any
// Every write goes to a temp file and is renamed into place; the manifest is
// swapped last. Append-only logs are read up to the committed line count, so
// a crash between the data write and the manifest swap leaves no trace.
// One writer per directory; the in-process mutex serialises threads.
class Store {
 public:
  explicit Store(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path backend_dir() const { return root_ / "backend"; }

  void put_dataset(const Dataset& dataset);
  Dataset get_dataset(const std::string& id) const;
  bool has_dataset(const std::string& id) const;
  std::vector<std::string> list_datasets() const;
  // Throws ImmutableError on HoldoutTest datasets.
  void append_to_dataset(const std::string& id, const std::vector<Example>& examples);

  // Versions are immutable once stored. A child must name an existing parent
  // of the same kind and carry iteration = parent.iteration + 1.
  void put_version(const ModelVersion& version);
  ModelVersion get_version(const std::string& id) const;
  bool has_version(const std::string& id) const;
  std::vector<ModelVersion> list_versions(std::optional<ModelKind> kind = std::nullopt,
                                          const std::string& id_prefix = "") const;
  // The version itself first, then its parent, up to the root.
  std::vector<ModelVersion> lineage(const std::string& id) const;

  void append_round(const std::string& run_id, const RoundRecord& record);
  std::vector<RoundRecord> rounds(const std::string& run_id) const;
  void append_metrics(const std::string& run_id, const MetricsReport& report);
  std::vector<MetricsReport> metrics(const std::string& run_id) const;
  void append_discard(const std::string& run_id, const Json& entry);
  std::vector<Json> discards(const std::string& run_id) const;

  void put_run_state(const std::string& run_id, const Json& state);
  std::optional<Json> get_run_state(const std::string& run_id) const;
  std::vector<std::string> list_runs() const;
  std::string allocate_run_id();

  void put_blob(const std::string& name, const std::string& content);
  std::optional<std::string> get_blob(const std::string& name) const;

 private:
  void commit_locked();
  void append_log_locked(const std::string& run_id, const std::string& log, const Json& entry);
  std::vector<Json> read_log_locked(const std::string& run_id, const std::string& log) const;
  std::filesystem::path dataset_path(const std::string& id) const;
  std::filesystem::path version_path(const std::string& id) const;

  std::filesystem::path root_;
  mutable std::mutex mu_;
  Json manifest_;
};

// File-name-safe form of an id.
std::string safe_name(const std::string& id);

}  // namespace redloop
