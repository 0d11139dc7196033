#include "redloop/datastore.h"

#include <cstdio>
#include <sstream>

#include "redloop/error.h"
#include "redloop/fsutil.h"

namespace redloop {

namespace fs = std::filesystem;

namespace {

std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (std::size_t pos = hay.find(needle); pos != std::string_view::npos;
       pos = hay.find(needle, pos + needle.size()))
    ++n;
  return n;
}

std::string json_string(const std::string& s) {
  return Json(s).dump(-1, ' ', false, Json::error_handler_t::strict);
}

}  // namespace

std::string dataset_to_jsonl(const Dataset& dataset) {
  std::string out;
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    const Example& ex = dataset.examples[i];
    if (ex.label != 0 && ex.label != 1)
      throw FormatError("label must be 0 or 1 in dataset " + dataset.id, i + 1);
    if (ex.text.find(kPromptSeparator) != std::string::npos)
      throw FormatError("prompt text contains the separator", i + 1);
    out += "{\"prompt\": ";
    out += json_string(ex.text + std::string(kPromptSeparator));
    out += ", \"completion\": ";
    out += ex.label == 1 ? "\" 1\"" : "\" 0\"";
    out += "}\n";
  }
  return out;
}

Dataset dataset_from_jsonl(std::string_view content, const std::string& id,
                           std::set<DatasetTag> tags) {
  Dataset ds;
  ds.id = id;
  ds.tags = std::move(tags);
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < content.size()) {
    std::size_t end = content.find('\n', start);
    if (end == std::string_view::npos) end = content.size();
    std::string_view line = content.substr(start, end - start);
    start = end + 1;
    ++line_no;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw FormatError(std::string("malformed JSON: ") + e.what(), line_no);
    }
    if (!j.is_object() || j.size() != 2 || !j.contains("prompt") || !j.contains("completion"))
      throw FormatError("expected exactly the keys \"prompt\" and \"completion\"", line_no);
    if (!j["prompt"].is_string() || !j["completion"].is_string())
      throw FormatError("prompt and completion must be strings", line_no);
    const std::string prompt = j["prompt"].get<std::string>();
    const std::string completion = j["completion"].get<std::string>();
    if (completion != " 0" && completion != " 1")
      throw FormatError("completion must be \" 0\" or \" 1\", got \"" + completion + "\"", line_no);
    if (count_occurrences(prompt, kPromptSeparator) != 1 ||
        prompt.size() < kPromptSeparator.size() ||
        prompt.compare(prompt.size() - kPromptSeparator.size(), kPromptSeparator.size(),
                       kPromptSeparator) != 0)
      throw FormatError("prompt must end with the separator exactly once", line_no);
    ds.examples.push_back(Example{id + "-" + std::to_string(line_no),
                                  prompt.substr(0, prompt.size() - kPromptSeparator.size()),
                                  completion == " 1" ? 1 : 0});
  }
  return ds;
}

void save_dataset_jsonl(const Dataset& dataset, const fs::path& path) {
  write_file_atomic(path, dataset_to_jsonl(dataset));
}

Dataset load_dataset_jsonl(const fs::path& path, const std::string& id, std::set<DatasetTag> tags) {
  return dataset_from_jsonl(read_file(path), id, std::move(tags));
}

std::string safe_name(const std::string& id) {
  std::string out;
  for (char c : id) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')
      out.push_back(c);
    else
      out += "%" + std::to_string(static_cast<unsigned char>(c));
  }
  return out;
}

Store::Store(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_);
  const fs::path manifest = root_ / "manifest.json";
  if (fs::exists(manifest)) {
    manifest_ = Json::parse(read_file(manifest));
  } else {
    manifest_ = Json{{"datasets", Json::object()},
                     {"versions", Json::array()},
                     {"runs", Json::object()},
                     {"blobs", Json::array()},
                     {"next_run", 1}};
  }
}

fs::path Store::dataset_path(const std::string& id) const {
  return root_ / "datasets" / (safe_name(id) + ".json");
}

fs::path Store::version_path(const std::string& id) const {
  return root_ / "versions" / (safe_name(id) + ".json");
}

void Store::commit_locked() {
  write_file_atomic(root_ / "manifest.json", manifest_.dump(1) + "\n");
}

void Store::put_dataset(const Dataset& dataset) {
  validate_labels(dataset);
  std::lock_guard lock(mu_);
  if (manifest_["datasets"].contains(dataset.id))
    throw ConflictError("dataset '" + dataset.id + "' already exists");
  write_file_atomic(dataset_path(dataset.id), Json(dataset).dump() + "\n");
  manifest_["datasets"][dataset.id] = dataset.examples.size();
  commit_locked();
}

Dataset Store::get_dataset(const std::string& id) const {
  std::lock_guard lock(mu_);
  if (!manifest_["datasets"].contains(id)) throw NotFoundError("no dataset '" + id + "'");
  Dataset ds = Json::parse(read_file(dataset_path(id))).get<Dataset>();
  // Trust only the committed prefix.
  ds.examples.resize(manifest_["datasets"][id].get<std::size_t>());
  return ds;
}

bool Store::has_dataset(const std::string& id) const {
  std::lock_guard lock(mu_);
  return manifest_["datasets"].contains(id);
}

std::vector<std::string> Store::list_datasets() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [k, v] : manifest_["datasets"].items()) out.push_back(k);
  return out;
}

void Store::append_to_dataset(const std::string& id, const std::vector<Example>& examples) {
  std::lock_guard lock(mu_);
  if (!manifest_["datasets"].contains(id)) throw NotFoundError("no dataset '" + id + "'");
  Dataset ds = Json::parse(read_file(dataset_path(id))).get<Dataset>();
  if (ds.has_tag(DatasetTag::HoldoutTest))
    throw ImmutableError("dataset '" + id + "' is a holdout test set and cannot be appended to");
  ds.examples.resize(manifest_["datasets"][id].get<std::size_t>());
  for (const auto& ex : examples) {
    if (ex.label != 0 && ex.label != 1)
      throw PreconditionError("append_to_dataset: non-binary label");
    ds.examples.push_back(ex);
  }
  write_file_atomic(dataset_path(id), Json(ds).dump() + "\n");
  manifest_["datasets"][id] = ds.examples.size();
  commit_locked();
}

void Store::put_version(const ModelVersion& v) {
  std::lock_guard lock(mu_);
  auto& ids = manifest_["versions"];
  for (const auto& existing : ids)
    if (existing.get<std::string>() == v.id)
      throw ConflictError("model version '" + v.id + "' already exists");
  if (v.parent) {
    bool found = false;
    for (const auto& existing : ids) found = found || existing.get<std::string>() == *v.parent;
    if (!found) throw NotFoundError("parent version '" + *v.parent + "' not found");
    ModelVersion parent = Json::parse(read_file(version_path(*v.parent))).get<ModelVersion>();
    if (parent.kind != v.kind) throw PreconditionError("parent version is of a different kind");
    if (v.iteration != parent.iteration + 1)
      throw PreconditionError("child iteration must be parent iteration + 1");
  } else if (v.iteration != 0) {
    throw PreconditionError("root versions must have iteration 0");
  }
  write_file_atomic(version_path(v.id), Json(v).dump() + "\n");
  ids.push_back(v.id);
  commit_locked();
}

ModelVersion Store::get_version(const std::string& id) const {
  std::lock_guard lock(mu_);
  for (const auto& existing : manifest_["versions"])
    if (existing.get<std::string>() == id)
      return Json::parse(read_file(version_path(id))).get<ModelVersion>();
  throw NotFoundError("no model version '" + id + "'");
}

bool Store::has_version(const std::string& id) const {
  std::lock_guard lock(mu_);
  for (const auto& existing : manifest_["versions"])
    if (existing.get<std::string>() == id) return true;
  return false;
}

std::vector<ModelVersion> Store::list_versions(std::optional<ModelKind> kind,
                                               const std::string& id_prefix) const {
  std::lock_guard lock(mu_);
  std::vector<ModelVersion> out;
  for (const auto& existing : manifest_["versions"]) {
    const std::string id = existing.get<std::string>();
    if (id.compare(0, id_prefix.size(), id_prefix) != 0) continue;
    ModelVersion v = Json::parse(read_file(version_path(id))).get<ModelVersion>();
    if (!kind || v.kind == *kind) out.push_back(std::move(v));
  }
  return out;
}

std::vector<ModelVersion> Store::lineage(const std::string& id) const {
  std::vector<ModelVersion> out;
  std::optional<std::string> cur = id;
  while (cur) {
    ModelVersion v = get_version(*cur);
    cur = v.parent;
    out.push_back(std::move(v));
    if (out.size() > 100000) throw Error("lineage cycle detected at " + id);
  }
  return out;
}

void Store::append_log_locked(const std::string& run_id, const std::string& log, const Json& entry) {
  Json& run = manifest_["runs"][run_id];
  if (run.is_null()) run = Json::object();
  const std::size_t committed = run.value(log, std::size_t{0});
  std::vector<Json> lines = read_log_locked(run_id, log);
  std::string body;
  for (const auto& l : lines) body += l.dump() + "\n";
  body += entry.dump() + "\n";
  write_file_atomic(root_ / "runs" / safe_name(run_id) / (log + ".jsonl"), body);
  run[log] = committed + 1;
  commit_locked();
}

std::vector<Json> Store::read_log_locked(const std::string& run_id, const std::string& log) const {
  std::vector<Json> out;
  if (!manifest_["runs"].contains(run_id) || !manifest_["runs"][run_id].is_object()) return out;
  const std::size_t committed = manifest_["runs"][run_id].value(log, std::size_t{0});
  if (committed == 0) return out;
  std::istringstream in(read_file(root_ / "runs" / safe_name(run_id) / (log + ".jsonl")));
  std::string line;
  while (out.size() < committed && std::getline(in, line)) out.push_back(Json::parse(line));
  if (out.size() != committed) throw Error("log " + log + " of " + run_id + " is truncated");
  return out;
}

void Store::append_round(const std::string& run_id, const RoundRecord& record) {
  std::lock_guard lock(mu_);
  append_log_locked(run_id, "rounds", record);
}

std::vector<RoundRecord> Store::rounds(const std::string& run_id) const {
  std::lock_guard lock(mu_);
  std::vector<RoundRecord> out;
  for (const auto& j : read_log_locked(run_id, "rounds")) out.push_back(j.get<RoundRecord>());
  return out;
}

void Store::append_metrics(const std::string& run_id, const MetricsReport& report) {
  std::lock_guard lock(mu_);
  append_log_locked(run_id, "metrics", report);
}

std::vector<MetricsReport> Store::metrics(const std::string& run_id) const {
  std::lock_guard lock(mu_);
  std::vector<MetricsReport> out;
  for (const auto& j : read_log_locked(run_id, "metrics")) out.push_back(j.get<MetricsReport>());
  return out;
}

void Store::append_discard(const std::string& run_id, const Json& entry) {
  std::lock_guard lock(mu_);
  append_log_locked(run_id, "discards", entry);
}

std::vector<Json> Store::discards(const std::string& run_id) const {
  std::lock_guard lock(mu_);
  return read_log_locked(run_id, "discards");
}

void Store::put_run_state(const std::string& run_id, const Json& state) {
  std::lock_guard lock(mu_);
  write_file_atomic(root_ / "runs" / safe_name(run_id) / "state.json", state.dump(1) + "\n");
  Json& run = manifest_["runs"][run_id];
  run["state"] = true;
  commit_locked();
}

std::optional<Json> Store::get_run_state(const std::string& run_id) const {
  std::lock_guard lock(mu_);
  if (!manifest_["runs"].contains(run_id) || !manifest_["runs"][run_id].contains("state"))
    return std::nullopt;
  return Json::parse(read_file(root_ / "runs" / safe_name(run_id) / "state.json"));
}

std::vector<std::string> Store::list_runs() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [k, v] : manifest_["runs"].items()) out.push_back(k);
  return out;
}

std::string Store::allocate_run_id() {
  std::lock_guard lock(mu_);
  const int n = manifest_["next_run"].get<int>();
  char buf[32];
  std::snprintf(buf, sizeof buf, "run-%04d", n);
  manifest_["next_run"] = n + 1;
  manifest_["runs"][buf] = Json::object();
  commit_locked();
  return buf;
}

void Store::put_blob(const std::string& name, const std::string& content) {
  std::lock_guard lock(mu_);
  write_file_atomic(root_ / "blobs" / safe_name(name), content);
  auto& blobs = manifest_["blobs"];
  bool present = false;
  for (const auto& b : blobs) present = present || b.get<std::string>() == name;
  if (!present) blobs.push_back(name);
  commit_locked();
}

std::optional<std::string> Store::get_blob(const std::string& name) const {
  std::lock_guard lock(mu_);
  for (const auto& b : manifest_["blobs"])
    if (b.get<std::string>() == name) return read_file(root_ / "blobs" / safe_name(name));
  return std::nullopt;
}

}  // namespace redloop
