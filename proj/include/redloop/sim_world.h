#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "redloop/domain.h"
#include "redloop/logistic.h"
#include "redloop/rng.h"

namespace redloop::sim {

// The offline testbed. Prompts are bags of features from a fixed vocabulary:
//   trig<i>   overt harmful features, caught by the untrained judge
//   veil<i>   covert harmful features, learnable only from labelled data
//   topic<i>  benign subject matter
// Any other token is hashed into one of `hash_buckets` extra features.
// Ground truth: a prompt is problematic iff it contains a trig or veil token.
struct WorldConfig {
  std::uint64_t seed = 7;
  int overt_features = 4;
  int covert_features = 16;
  int topic_features = 24;
  int hash_buckets = 32;

  // tier(k) = min(k / tier_step, max_tier)
  int tier_step = 5;
  int max_tier = 4;

  double refusal_rate = 0.02;
  double adversary_problematic_rate = 0.75;
  // Chance that a problematic adversary prompt is covert, at tier 0 and at
  // max_tier; linear in between.
  double covert_rate_min = 0.7;
  double covert_rate_max = 1.0;
  // Zipf exponent for covert features in curated (seed/holdout) prompts.
  double curated_covert_zipf = 1.0;
  double curated_covert_share = 0.5;

  int embedding_dim = 96;
  double judge_l2 = 0.1;
  // Fraction of in-context classifications that come back as free text.
  double chat_garbage_rate = 0.0;

  // External (toxic comment) corpus.
  int external_slang_features = 8;   // "jibe<i>", unknown to the in-domain vocabulary
  double external_toxic_rate = 0.4;
  double external_slang_share = 0.5;
  double external_label_noise = 0.1;
  // External fine-tunes stay near their starting judge: the pull towards it
  // is transfer_anchor * n / epochs (short training on a big corpus).
  double transfer_anchor = 0.01;
};

void to_json(Json& j, const WorldConfig& v);
void from_json(const Json& j, WorldConfig& v);

struct Draw {
  int tier = 0;
  bool refusal = false;
  std::vector<int> features;  // sorted, distinct
  std::string text;
};

class World {
 public:
  explicit World(WorldConfig config);

  const WorldConfig& config() const { return config_; }

  int vocab_size() const;
  int feature_count() const;  // vocabulary plus hash buckets; model dimension

  std::string token(int feature) const;
  bool is_overt(int feature) const;
  bool is_covert(int feature) const;
  bool is_harmful(int feature) const;
  int overt(int i) const;
  int covert(int i) const;
  int topic(int i) const;

  // Sorted distinct feature indices of a text.
  logistic::Row featurize(std::string_view text) const;
  // Features from the named vocabulary only (no hash buckets).
  logistic::Row vocab_features(std::string_view text) const;

  bool ground_truth(const logistic::Row& features) const;
  // Human oracle: Discarded for empty text and texts with no vocabulary
  // feature (refusals, gibberish).
  HumanLabel oracle_label(std::string_view text) const;

  int tier(std::size_t examples) const;

  Draw adversary_draw(int tier, Rng& rng) const;
  std::string refusal_text(Rng& rng) const;
  std::string render(std::vector<std::string> tokens, Rng& rng) const;

  // Seed and holdout prompts; half problematic, covert features Zipf
  // distributed so a 150-prompt sample misses the tail.
  std::vector<Example> curated(int n, std::uint64_t stream, const std::string& id_prefix) const;
  Dataset seed_dataset(int n = 150) const;
  Dataset holdout_dataset(int n = 100) const;

  // Toxic-comment style corpus whose labelling rule overlaps the in-domain
  // harmful features and adds slang the in-domain data never shows.
  std::vector<Example> external_corpus(int n, std::uint64_t stream,
                                       const std::string& id_prefix) const;

  std::vector<double> embed(std::string_view text) const;

 private:
  std::vector<double> token_vector(std::string_view token) const;
  std::vector<int> pick_topics(Rng& rng, int lo, int hi) const;

  WorldConfig config_;
  std::vector<double> harm_direction_;
  std::vector<double> covert_cdf_;
};

// Lowercased alphanumeric tokens.
std::vector<std::string> tokenize(std::string_view text);

}  // namespace redloop::sim
