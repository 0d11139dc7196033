#include "redloop/fooling.h"

#include <algorithm>
#include <map>

#include "redloop/error.h"
#include "redloop/parallel.h"
#include "redloop/rng.h"

namespace redloop {

namespace {

struct Probe {
  Prompt prompt;
  HumanLabel human = HumanLabel::Discarded;
};

FoolingMatrix empty_matrix(const std::vector<std::string>& rows, const std::vector<JudgeColumn>& columns,
                           int probes, std::string mode) {
  FoolingMatrix m;
  m.adversary_versions = rows;
  for (const auto& c : columns) m.judge_versions.push_back(c.version);
  m.rates.assign(rows.size(), std::vector<std::optional<double>>(columns.size()));
  m.errors.assign(rows.size(), std::vector<std::string>(columns.size()));
  m.probes_per_cell = probes;
  m.mode = std::move(mode);
  return m;
}

// Classifies the probes with every column and fills row i.
void fill_row(FoolingMatrix& m, std::size_t i, ModelBackend& backend, const std::vector<Probe>& probes,
              const std::vector<JudgeColumn>& columns, int parallelism, const RetryPolicy& retry) {
  for (std::size_t k = 0; k < columns.size(); ++k) {
    try {
      std::vector<int> cls = parallel_map<int>(probes.size(), parallelism, [&](std::size_t p) {
        return with_retry(retry, [&] { return backend.classify(probes[p].prompt.text, columns[k].model); })
            .classification;
      });
      std::size_t fooled = 0;
      for (std::size_t p = 0; p < probes.size(); ++p) fooled += derive_fooled(probes[p].human, cls[p]) ? 1 : 0;
      m.rates[i][k] = static_cast<double>(fooled) / static_cast<double>(probes.size());
    } catch (const std::exception& e) {
      m.errors[i][k] = e.what();
    }
  }
}

}  // namespace

FoolingMatrix fooling_matrix(ModelBackend& backend, const std::vector<AdversaryRow>& rows,
                             const std::vector<JudgeColumn>& columns, Annotator& annotator,
                             const FoolingOptions& options) {
  if (options.probes_per_cell < 1) throw PreconditionError("probes_per_cell must be >= 1");
  std::vector<std::string> row_ids;
  for (const auto& r : rows) row_ids.push_back(r.version);
  FoolingMatrix m = empty_matrix(row_ids, columns, options.probes_per_cell, "fresh");

  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<Probe> probes;
    try {
      const int limit = options.max_draw_factor * options.probes_per_cell;
      int drawn = 0;
      while (static_cast<int>(probes.size()) < options.probes_per_cell) {
        if (drawn >= limit)
          throw QuotaStarvationError("only " + std::to_string(probes.size()) + " usable probes in " +
                                     std::to_string(drawn) + " generations");
        const int batch = std::min(options.probes_per_cell - static_cast<int>(probes.size()), limit - drawn);
        std::vector<std::string> texts =
            parallel_map<std::string>(static_cast<std::size_t>(batch), options.parallelism, [&](std::size_t b) {
              ChatRequest req;
              req.system_message = options.system_message;
              req.in_context_examples = rows[i].pool;
              req.instruction = options.instruction;
              req.temperature = options.temperature;
              req.max_tokens = options.max_tokens;
              req.sample_nonce = Fnv1a()
                                     .add(options.seed)
                                     .add(rows[i].version)
                                     .add(static_cast<std::uint64_t>(drawn) + b)
                                     .value();
              return with_retry(options.retry, [&] { return backend.generate_prompt(req, rows[i].model); });
            });
        for (auto& t : texts) {
          const std::string id = rows[i].version + ".probe-" + std::to_string(drawn++);
          if (std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::isspace(c); })) continue;
          Prompt p = Prompt::make(id, t, PromptSource::AdversaryGenerated, 0, 0);
          HumanLabel h = annotator.label(p);
          if (h == HumanLabel::Discarded) continue;
          probes.push_back({std::move(p), h});
        }
      }
    } catch (const std::exception& e) {
      for (auto& err : m.errors[i]) err = e.what();
      continue;
    }
    fill_row(m, i, backend, probes, columns, options.parallelism, options.retry);
  }
  return m;
}

FoolingMatrix fooling_matrix_replay(ModelBackend& backend, const std::vector<AnnotatedPrompt>& history,
                                    const std::vector<std::string>& adversary_versions,
                                    const std::vector<JudgeColumn>& columns, int parallelism,
                                    const RetryPolicy& retry) {
  FoolingMatrix m = empty_matrix(adversary_versions, columns, 0, "replay");
  for (std::size_t i = 0; i < adversary_versions.size(); ++i) {
    std::vector<Probe> probes;
    for (const auto& a : history)
      if (a.adversary_version == adversary_versions[i] && a.human != HumanLabel::Discarded)
        probes.push_back({a.prompt, a.human});
    if (probes.empty()) {
      for (auto& err : m.errors[i]) err = "no recorded prompts for " + adversary_versions[i];
      continue;
    }
    m.probes_per_cell = std::max(m.probes_per_cell, static_cast<int>(probes.size()));
    fill_row(m, i, backend, probes, columns, parallelism, retry);
  }
  return m;
}

std::vector<AnnotatedPrompt> run_history(const Store& store, const std::string& run_id) {
  std::vector<AnnotatedPrompt> out;
  for (const auto& r : store.rounds(run_id))
    out.insert(out.end(), r.generated.begin(), r.generated.end());
  return out;
}

std::vector<AdversaryRow> run_adversary_rows(const Store& store, const std::string& run_id) {
  std::map<std::string, std::string> text;
  for (const auto& a : run_history(store, run_id)) text[a.prompt.id] = a.prompt.text;
  auto versions = store.list_versions(ModelKind::Adversary, run_id + ".");
  std::sort(versions.begin(), versions.end(),
            [](const ModelVersion& a, const ModelVersion& b) { return a.iteration < b.iteration; });
  std::vector<AdversaryRow> rows;
  for (const auto& v : versions) {
    AdversaryRow r{v.id, v.backend_ref, {}};
    for (const auto& id : v.example_pool_snapshot) {
      auto it = text.find(id);
      if (it == text.end()) throw NotFoundError("pool prompt '" + id + "' not in run history");
      r.pool.push_back({it->second, 1});
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<JudgeColumn> run_judge_columns(const Store& store, const std::string& run_id) {
  auto versions = store.list_versions(ModelKind::Judge, run_id + ".judge-");
  std::sort(versions.begin(), versions.end(),
            [](const ModelVersion& a, const ModelVersion& b) { return a.iteration < b.iteration; });
  std::vector<JudgeColumn> cols;
  for (const auto& v : versions) cols.push_back({v.id, v.backend_ref});
  return cols;
}

std::string fooling_blob_name(const std::string& run_id) { return run_id + ".fooling-matrix.json"; }

std::string fooling_csv(const FoolingMatrix& m) {
  std::string out = "adversary";
  for (const auto& j : m.judge_versions) out += "," + j;
  out += "\n";
  for (std::size_t i = 0; i < m.adversary_versions.size(); ++i) {
    out += m.adversary_versions[i];
    for (const auto& cell : m.rates[i]) out += "," + format_metric(cell, 4);
    out += "\n";
  }
  return out;
}

}  // namespace redloop
