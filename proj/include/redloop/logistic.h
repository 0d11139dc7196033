#pragma once

#include <span>
#include <vector>

namespace redloop::logistic {

// Sparse binary design row: indices of active features.
using Row = std::vector<int>;

struct Model {
  std::vector<double> weights;
  double bias = 0.0;

  friend bool operator==(const Model&, const Model&) = default;
};

Model zeros(int dim);

double logit(const Model& m, const Row& x);
double predict(const Model& m, const Row& x);

struct Problem {
  std::span<const Row> rows;
  std::span<const int> labels;
  int dim = 0;
  double l2 = 0.5;  // strength of the Gaussian prior, applied to the summed loss
  const Model* prior = nullptr;  // prior mean; zero when null
};

// Summed BCE plus (l2 / 2) * |theta - prior|^2, bias included.
double objective(const Problem& p, const Model& m);

// Mean BCE alone.
double mean_bce(const Problem& p, const Model& m);

struct Fit {
  Model model;
  int newton_iterations = 0;
  double gradient_norm = 0.0;
};

// Damped Newton from the prior mean (zero when none) to a gradient max-norm
// below 1e-10. The objective is strictly convex for l2 > 0, and the start is
// fixed, so the fit is a deterministic function of (rows, labels, prior).
Fit fit(const Problem& p);

// Point on the segment start + t (end - start).
Model interpolate(const Model& start, const Model& end, double t);

}  // namespace redloop::logistic
