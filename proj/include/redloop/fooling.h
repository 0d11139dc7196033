#pragma once

#include <string>
#include <vector>

#include "redloop/backend.h"
#include "redloop/config.h"
#include "redloop/datastore.h"
#include "redloop/loop.h"

namespace redloop {

struct AdversaryRow {
  std::string version;
  std::string model;
  std::vector<ChatExample> pool;
};

struct JudgeColumn {
  std::string version;
  std::string model;
};

struct FoolingOptions {
  int probes_per_cell = 50;
  std::uint64_t seed = 0;
  int parallelism = 4;
  // Non-discarded probes are drawn until probes_per_cell exist or this many
  // times probes_per_cell generations were spent.
  int max_draw_factor = 10;
  std::string system_message = RunConfig{}.adversary_system_message;
  std::string instruction = RunConfig{}.adversary_instruction;
  double temperature = 1.0;
  int max_tokens = 256;
  RetryPolicy retry;
};

// Fresh mode. Each row draws its probes once (seeded by row version and
// probe index) and every judge column classifies the same probes, so column
// differences are not sampling noise. A failure leaves the affected cells
// unset with an error message; nothing is filled in.
FoolingMatrix fooling_matrix(ModelBackend& backend, const std::vector<AdversaryRow>& rows,
                             const std::vector<JudgeColumn>& columns, Annotator& annotator,
                             const FoolingOptions& options);

// Replay mode: re-classifies each adversary version's recorded prompts.
FoolingMatrix fooling_matrix_replay(ModelBackend& backend, const std::vector<AnnotatedPrompt>& history,
                                    const std::vector<std::string>& adversary_versions,
                                    const std::vector<JudgeColumn>& columns, int parallelism = 4,
                                    const RetryPolicy& retry = {});

// Rows and columns of a stored run, ordered by iteration.
std::vector<AdversaryRow> run_adversary_rows(const Store& store, const std::string& run_id);
std::vector<JudgeColumn> run_judge_columns(const Store& store, const std::string& run_id);
std::vector<AnnotatedPrompt> run_history(const Store& store, const std::string& run_id);

std::string fooling_blob_name(const std::string& run_id);

// Grid CSV: header "adversary,<judge ids...>", cells "n/a" when unset.
std::string fooling_csv(const FoolingMatrix& m);

}  // namespace redloop
