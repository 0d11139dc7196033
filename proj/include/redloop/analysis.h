#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "redloop/backend.h"
#include "redloop/config.h"
#include "redloop/datastore.h"

namespace redloop {

// Some embeddings could not be computed; `missing` lists the prompt ids.
class PartialResultError : public Error {
 public:
  PartialResultError(const std::string& what, std::vector<std::string> missing)
      : Error(what), missing_(std::move(missing)) {}
  const std::vector<std::string>& missing() const { return missing_; }

 private:
  std::vector<std::string> missing_;
};

struct CorpusItem {
  std::string id;
  std::string text;
  HumanLabel label = HumanLabel::Unproblematic;
  PromptSource source = PromptSource::Seed;
  std::optional<int> round_origin;
};

// Embedding cache keyed by (prompt id, text, model tag). Backed by a JSON
// file when a path is given; save() rewrites it atomically.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path path = {});
  std::optional<std::vector<double>> get(const std::string& key) const;
  void put(const std::string& key, std::vector<double> values);
  void save() const;
  std::size_t size() const;

  static std::string key(const std::string& id, const std::string& text, const std::string& model_tag);

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::map<std::string, std::vector<double>> entries_;
};

// One vector per item, order-aligned. Cache hits never reach the backend.
std::vector<EmbeddingVector> embed_corpus(const std::vector<CorpusItem>& items, ModelBackend& backend,
                                          const std::string& model_tag, EmbeddingCache& cache,
                                          int parallelism = 4, const RetryPolicy& retry = {});

struct TsneConfig {
  double perplexity = 30.0;
  int iterations = 1000;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  int pca_dimensions = 50;
  std::uint64_t seed = 0;
};

using Point2 = std::array<double, 2>;

struct TsneResult {
  std::vector<Point2> points;
  std::vector<double> kl_trace;             // KL(P||Q) after each iteration, true P
  std::vector<double> achieved_perplexity;  // per point
  double perplexity = 0.0;                  // target after any reduction
  bool degenerate = false;
  std::string warning;
};

// Exact O(N^2) t-SNE. Throws PreconditionError for N < 4 or ragged input.
TsneResult tsne(const std::vector<std::vector<double>>& vectors, const TsneConfig& config = {});

// Projects onto the top `dims` principal components (sign fixed so each
// component's largest-magnitude loading is positive).
std::vector<std::vector<double>> pca(const std::vector<std::vector<double>>& vectors, int dims);

// Mean silhouette over the label groups; nullopt with fewer than two groups.
std::optional<double> silhouette(const std::vector<Point2>& points, const std::vector<int>& labels);

struct Outlier {
  std::size_t index = 0;
  int label = 0;
  int nearest_label = 0;
  double margin = 0.0;  // distance to own centroid minus distance to nearest other
};

struct SeparationReport {
  std::optional<double> silhouette;
  std::optional<double> centroid_distance;
  std::vector<Outlier> outliers;  // largest margin first
};

SeparationReport separation_report(const std::vector<Point2>& points, const std::vector<int>& labels);

struct BaselineOptions {
  std::string system_message = RunConfig{}.judge_system_message;
  std::string instruction = "Classify the next prompt.";
  std::uint64_t seed = 0;
  int parallelism = 4;
  double unreliable_fraction = 0.10;
  RetryPolicy retry;
};

struct BaselineRow {
  int k = 0;
  MetricsReport report;  // over parseable verdicts only
  int unparseable = 0;
  bool unreliable = false;
};

// Class-balanced example order, fixed by seed: shuffled positives and
// negatives interleaved. The first k entries are the k-shot context, so the
// contexts are nested as k grows.
std::vector<Example> baseline_examples(const Dataset& pool, std::uint64_t seed);

std::vector<BaselineRow> incontext_baseline(ModelBackend& backend, const std::string& chat_model,
                                            const std::vector<int>& ks, const Dataset& train_pool,
                                            const Dataset& holdout, const BaselineOptions& options = {});

// Seed prompts plus every labelled generation of the run.
std::vector<CorpusItem> run_corpus(const Store& store, const std::string& run_id);

// id,x,y,human_label,source,round_origin
std::string scatter_csv(const std::vector<CorpusItem>& items, const std::vector<Point2>& points);

}  // namespace redloop
