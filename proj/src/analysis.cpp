#include "redloop/analysis.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <Eigen/Dense>

#include "redloop/error.h"
#include "redloop/fooling.h"
#include "redloop/fsutil.h"
#include "redloop/metrics.h"
#include "redloop/parallel.h"
#include "redloop/rng.h"

namespace redloop {

// ---- embedding cache -------------------------------------------------------

EmbeddingCache::EmbeddingCache(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.empty() || !std::filesystem::exists(path_)) return;
  const Json j = Json::parse(read_file(path_));
  for (const auto& [k, v] : j.items()) entries_[k] = v.get<std::vector<double>>();
}

std::optional<std::vector<double>> EmbeddingCache::get(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void EmbeddingCache::put(const std::string& key, std::vector<double> values) {
  std::lock_guard lock(mu_);
  entries_[key] = std::move(values);
}

void EmbeddingCache::save() const {
  if (path_.empty()) return;
  std::lock_guard lock(mu_);
  write_file_atomic(path_, Json(entries_).dump() + "\n");
}

std::size_t EmbeddingCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

std::string EmbeddingCache::key(const std::string& id, const std::string& text,
                                const std::string& model_tag) {
  return model_tag + ":" + id + ":" + hex16(Fnv1a().add(text).value());
}

std::vector<EmbeddingVector> embed_corpus(const std::vector<CorpusItem>& items, ModelBackend& backend,
                                          const std::string& model_tag, EmbeddingCache& cache,
                                          int parallelism, const RetryPolicy& retry) {
  if (items.empty()) throw PreconditionError("embed_corpus: empty corpus");
  std::vector<std::optional<EmbeddingVector>> out(items.size());
  std::vector<std::string> missing;
  std::mutex missing_mu;
  parallel_map<int>(items.size(), parallelism, [&](std::size_t i) {
    const std::string key = EmbeddingCache::key(items[i].id, items[i].text, model_tag);
    if (auto hit = cache.get(key)) {
      out[i] = EmbeddingVector{std::move(*hit), model_tag};
      return 0;
    }
    try {
      EmbeddingVector v = with_retry(retry, [&] { return backend.embed(items[i].text, model_tag); });
      cache.put(key, v.values);
      out[i] = std::move(v);
    } catch (const Error&) {
      std::lock_guard lock(missing_mu);
      missing.push_back(items[i].id);
    }
    return 0;
  });
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    throw PartialResultError("embedding failed for " + std::to_string(missing.size()) + " prompt(s)",
                             missing);
  }
  std::vector<EmbeddingVector> result;
  result.reserve(out.size());
  const std::size_t dim = out.front()->values.size();
  for (auto& v : out) {
    if (v->values.size() != dim) throw BackendFatalError("embedding dimensions differ across the corpus");
    result.push_back(std::move(*v));
  }
  return result;
}

// ---- PCA / t-SNE -----------------------------------------------------------

std::vector<std::vector<double>> pca(const std::vector<std::vector<double>>& vectors, int dims) {
  const Eigen::Index n = static_cast<Eigen::Index>(vectors.size());
  const Eigen::Index d = n ? static_cast<Eigen::Index>(vectors.front().size()) : 0;
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = vectors[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  x.rowwise() -= x.colwise().mean();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
  const Eigen::Index k = std::min<Eigen::Index>({static_cast<Eigen::Index>(dims), d, svd.matrixV().cols()});
  Eigen::MatrixXd v = svd.matrixV().leftCols(k);
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index arg;
    v.col(c).cwiseAbs().maxCoeff(&arg);
    if (v(arg, c) < 0) v.col(c) *= -1.0;
  }
  const Eigen::MatrixXd y = x * v;
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(k)));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < k; ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = y(i, j);
  return out;
}

namespace {

// Row i of the conditional affinities for precision beta. Returns entropy (nats).
double conditional_row(const std::vector<double>& d2, std::size_t i, double beta, std::vector<double>& row) {
  const std::size_t n = row.size();
  double dmin = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (j != i) dmin = std::min(dmin, d2[i * n + j]);
  double sum = 0.0, dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i) {
      row[j] = 0.0;
      continue;
    }
    const double shifted = d2[i * n + j] - dmin;
    row[j] = std::exp(-beta * shifted);
    sum += row[j];
    dot += shifted * row[j];
  }
  for (double& p : row) p /= sum;
  return std::log(sum) + beta * dot / sum;
}

// Bisection on beta until exp(H) is within 1e-7 of the target.
double calibrate_row(const std::vector<double>& d2, std::size_t i, double perplexity,
                     std::vector<double>& row) {
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  double beta = 1.0;
  const double target = std::log(perplexity);
  double h = conditional_row(d2, i, beta, row);
  for (int it = 0; it < 1000 && std::abs(std::exp(h) - perplexity) > 1e-7; ++it) {
    if (h > target) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (lo + hi);
    } else {
      hi = beta;
      beta = 0.5 * (lo + hi);
    }
    h = conditional_row(d2, i, beta, row);
  }
  return std::exp(h);
}

}  // namespace

TsneResult tsne(const std::vector<std::vector<double>>& vectors, const TsneConfig& config) {
  const std::size_t n = vectors.size();
  if (n < 4) throw PreconditionError("tsne needs at least 4 points, got " + std::to_string(n));
  const std::size_t dim = vectors.front().size();
  for (const auto& v : vectors)
    if (v.size() != dim) throw PreconditionError("tsne: vectors differ in dimension");
  if (config.perplexity <= 1.0) throw PreconditionError("tsne: perplexity must exceed 1");
  if (config.iterations < 1 || config.learning_rate <= 0 || config.early_exaggeration < 1)
    throw PreconditionError("tsne: invalid optimiser settings");

  TsneResult result;
  result.perplexity = config.perplexity;
  const double max_perp = static_cast<double>(n - 1) / 3.0;
  if (result.perplexity > max_perp) {
    result.perplexity = max_perp;
    if (result.perplexity <= 1.0) throw PreconditionError("tsne: too few points for perplexity > 1");
    result.warning = "perplexity reduced from " + std::to_string(config.perplexity) + " to " +
                     std::to_string(max_perp) + " for " + std::to_string(n) + " points";
  }

  std::vector<std::vector<double>> x = vectors;
  if (static_cast<int>(dim) > config.pca_dimensions) x = pca(vectors, config.pca_dimensions);
  const std::size_t d = x.front().size();

  std::vector<double> d2(n * n, 0.0);
  double max_d2 = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = x[i][k] - x[j][k];
        s += diff * diff;
      }
      d2[i * n + j] = d2[j * n + i] = s;
      max_d2 = std::max(max_d2, s);
    }
  if (max_d2 == 0.0) {
    result.points.assign(n, Point2{0.0, 0.0});
    result.degenerate = true;
    if (!result.warning.empty()) result.warning += "; ";
    result.warning += "all input points are identical; returning the origin for every point";
    return result;
  }

  // Symmetrised joint affinities.
  std::vector<double> p(n * n, 0.0);
  std::vector<double> row(n);
  result.achieved_perplexity.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    result.achieved_perplexity[i] = calibrate_row(d2, i, result.perplexity, row);
    for (std::size_t j = 0; j < n; ++j) p[i * n + j] = row[j];
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = std::max((p[i * n + j] + p[j * n + i]) / (2.0 * static_cast<double>(n)), 1e-12);
      p[i * n + j] = p[j * n + i] = v;
    }
  for (std::size_t i = 0; i < n; ++i) p[i * n + i] = 0.0;

  Rng rng(Fnv1a().add(config.seed).add(static_cast<std::uint64_t>(n)).value());
  std::vector<Point2> y(n), update(n, Point2{0, 0}), gains(n, Point2{1, 1});
  for (auto& pt : y) pt = {1e-4 * rng.normal(), 1e-4 * rng.normal()};

  std::vector<double> num(n * n, 0.0);
  for (int it = 0; it < config.iterations; ++it) {
    const bool early = it < config.exaggeration_iterations;
    const double exaggeration = early ? config.early_exaggeration : 1.0;
    const double momentum = early ? config.initial_momentum : config.final_momentum;

    double zsum = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = num[j * n + i] = q;
        zsum += 2.0 * q;
      }
    for (std::size_t i = 0; i < n; ++i) {
      Point2 grad{0.0, 0.0};
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double m = (exaggeration * p[i * n + j] - num[i * n + j] / zsum) * num[i * n + j];
        grad[0] += 4.0 * m * (y[i][0] - y[j][0]);
        grad[1] += 4.0 * m * (y[i][1] - y[j][1]);
      }
      for (int c = 0; c < 2; ++c) {
        const bool same_sign = (grad[c] > 0) == (update[i][c] > 0);
        gains[i][c] = same_sign ? std::max(gains[i][c] * 0.8, 0.01) : gains[i][c] + 0.2;
        update[i][c] = momentum * update[i][c] - config.learning_rate * gains[i][c] * grad[c];
      }
    }
    Point2 mean{0.0, 0.0};
    for (std::size_t i = 0; i < n; ++i) {
      y[i][0] += update[i][0];
      y[i][1] += update[i][1];
      mean[0] += y[i][0];
      mean[1] += y[i][1];
    }
    for (auto& pt : y) {
      pt[0] -= mean[0] / static_cast<double>(n);
      pt[1] -= mean[1] / static_cast<double>(n);
    }

    // Objective at the new positions, against the unexaggerated P.
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = q;
        z += 2.0 * q;
      }
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double pij = p[i * n + j];
        kl += 2.0 * pij * std::log(pij / std::max(num[i * n + j] / z, 1e-300));
      }
    result.kl_trace.push_back(kl);
  }
  result.points = std::move(y);
  return result;
}

// ---- separation --------------------------------------------------------------

namespace {

double dist(const Point2& a, const Point2& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

}  // namespace

std::optional<double> silhouette(const std::vector<Point2>& points, const std::vector<int>& labels) {
  if (points.size() != labels.size()) throw PreconditionError("silhouette: points and labels differ in length");
  std::map<int, std::size_t> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) return std::nullopt;
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::map<int, double> sums;
    for (std::size_t j = 0; j < points.size(); ++j)
      if (j != i) sums[labels[j]] += dist(points[i], points[j]);
    const std::size_t own = sizes[labels[i]];
    if (own <= 1) continue;  // singleton contributes 0
    const double a = sums[labels[i]] / static_cast<double>(own - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [l, n] : sizes)
      if (l != labels[i]) b = std::min(b, sums[l] / static_cast<double>(n));
    const double denom = std::max(a, b);
    total += denom > 0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(points.size());
}

SeparationReport separation_report(const std::vector<Point2>& points, const std::vector<int>& labels) {
  if (points.size() != labels.size()) throw PreconditionError("separation: points and labels differ in length");
  SeparationReport r;
  r.silhouette = silhouette(points, labels);
  std::map<int, Point2> centroids;
  std::map<int, std::size_t> counts;
  for (std::size_t i = 0; i < points.size(); ++i) {
    centroids[labels[i]][0] += points[i][0];
    centroids[labels[i]][1] += points[i][1];
    ++counts[labels[i]];
  }
  for (auto& [l, c] : centroids) {
    c[0] /= static_cast<double>(counts[l]);
    c[1] /= static_cast<double>(counts[l]);
  }
  if (centroids.size() < 2) return r;
  if (centroids.size() == 2) r.centroid_distance = dist(centroids.begin()->second, centroids.rbegin()->second);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double own = dist(points[i], centroids[labels[i]]);
    int nearest = labels[i];
    double best = own;
    for (const auto& [l, c] : centroids)
      if (l != labels[i] && dist(points[i], c) < best) {
        best = dist(points[i], c);
        nearest = l;
      }
    if (nearest != labels[i]) r.outliers.push_back({i, labels[i], nearest, own - best});
  }
  std::stable_sort(r.outliers.begin(), r.outliers.end(),
                   [](const Outlier& a, const Outlier& b) { return a.margin > b.margin; });
  return r;
}

// ---- in-context baseline -------------------------------------------------------

std::vector<Example> baseline_examples(const Dataset& pool, std::uint64_t seed) {
  std::vector<Example> pos, neg;
  for (const auto& e : pool.examples) (e.label == 1 ? pos : neg).push_back(e);
  Rng rng(Fnv1a().add(seed).add(pool.id).value());
  rng.shuffle(pos);
  rng.shuffle(neg);
  std::vector<Example> out;
  std::size_t a = 0, b = 0;
  while (a < pos.size() || b < neg.size()) {
    if (a < pos.size()) out.push_back(pos[a++]);
    if (b < neg.size()) out.push_back(neg[b++]);
  }
  return out;
}

std::vector<BaselineRow> incontext_baseline(ModelBackend& backend, const std::string& chat_model,
                                            const std::vector<int>& ks, const Dataset& train_pool,
                                            const Dataset& holdout, const BaselineOptions& options) {
  if (holdout.examples.empty()) throw PreconditionError("baseline: empty holdout");
  for (int k : ks)
    if (k < 0 || static_cast<std::size_t>(k) > train_pool.size())
      throw PreconditionError("baseline: k=" + std::to_string(k) + " outside [0, " +
                              std::to_string(train_pool.size()) + "]");
  const std::vector<Example> order = baseline_examples(train_pool, options.seed);
  std::vector<BaselineRow> rows;
  for (int k : ks) {
    ChatRequest req;
    req.system_message = options.system_message;
    req.instruction = options.instruction;
    for (int i = 0; i < k; ++i) req.in_context_examples.push_back({order[static_cast<std::size_t>(i)].text,
                                                                   order[static_cast<std::size_t>(i)].label});
    struct Verdict {
      std::optional<double> score;
    };
    auto verdicts = parallel_map<Verdict>(holdout.size(), options.parallelism, [&](std::size_t i) {
      try {
        return Verdict{with_retry(options.retry, [&] {
                         return backend.classify_in_context(req, holdout.examples[i].text, chat_model);
                       }).score};
      } catch (const UnparseableVerdictError&) {
        return Verdict{};
      }
    });
    BaselineRow row;
    row.k = k;
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < verdicts.size(); ++i) {
      if (!verdicts[i].score) {
        ++row.unparseable;
        continue;
      }
      scores.push_back(*verdicts[i].score);
      labels.push_back(holdout.examples[i].label);
    }
    if (!scores.empty()) row.report = metrics::evaluate(scores, labels);
    row.report.iteration = k;
    row.report.model_version = chat_model;
    row.report.test_set = holdout.id;
    row.unreliable = static_cast<double>(row.unparseable) >
                     options.unreliable_fraction * static_cast<double>(holdout.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---- corpus / scatter ---------------------------------------------------------

std::vector<CorpusItem> run_corpus(const Store& store, const std::string& run_id) {
  auto state = store.get_run_state(run_id);
  if (!state) throw NotFoundError("run '" + run_id + "' not found");
  const std::string seed_id = state->at("config").value("seed_dataset_id", std::string("seed"));
  std::vector<CorpusItem> items;
  for (const auto& e : store.get_dataset(seed_id).examples)
    items.push_back({e.prompt_id, e.text, e.label == 1 ? HumanLabel::Problematic : HumanLabel::Unproblematic,
                     PromptSource::Seed, std::nullopt});
  for (const auto& a : run_history(store, run_id))
    items.push_back({a.prompt.id, a.prompt.text, a.human, a.prompt.source, a.prompt.round_origin});
  return items;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string scatter_csv(const std::vector<CorpusItem>& items, const std::vector<Point2>& points) {
  if (items.size() != points.size()) throw PreconditionError("scatter: items and points differ in length");
  std::string out = "id,x,y,human_label,source,round_origin\n";
  char buf[64];
  for (std::size_t i = 0; i < items.size(); ++i) {
    out += csv_field(items[i].id);
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,", points[i][0], points[i][1]);
    out += buf;
    out += std::string(to_string(items[i].label)) + "," + std::string(to_string(items[i].source)) + ",";
    if (items[i].round_origin) out += std::to_string(*items[i].round_origin);
    out += "\n";
  }
  return out;
}

}  // namespace redloop
