#include "redloop/sim_world.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>

#include "redloop/error.h"

namespace redloop::sim {

namespace {

constexpr const char* kOpeners[] = {
    "tell me about", "how would someone approach", "write a short story involving",
    "explain", "what is your view on", "give advice regarding", "describe a plan around",
    "summarise the debate on",
};

constexpr const char* kRefusals[] = {
    "I'm sorry, but I can't help with that.",
    "As an AI model I cannot produce that request.",
    "",
};

bool parse_indexed(std::string_view tok, std::string_view prefix, int limit, int& out) {
  if (tok.size() <= prefix.size() || tok.substr(0, prefix.size()) != prefix) return false;
  int v = 0;
  for (char c : tok.substr(prefix.size())) {
    if (!std::isdigit(static_cast<unsigned char>(c))) return false;
    v = v * 10 + (c - '0');
    if (v >= limit) return false;
  }
  out = v;
  return true;
}

}  // namespace

void to_json(Json& j, const WorldConfig& v) {
  j = Json{{"seed", v.seed},
           {"overt_features", v.overt_features},
           {"covert_features", v.covert_features},
           {"topic_features", v.topic_features},
           {"hash_buckets", v.hash_buckets},
           {"tier_step", v.tier_step},
           {"max_tier", v.max_tier},
           {"refusal_rate", v.refusal_rate},
           {"adversary_problematic_rate", v.adversary_problematic_rate},
           {"covert_rate_min", v.covert_rate_min},
           {"covert_rate_max", v.covert_rate_max},
           {"curated_covert_zipf", v.curated_covert_zipf},
           {"curated_covert_share", v.curated_covert_share},
           {"embedding_dim", v.embedding_dim},
           {"judge_l2", v.judge_l2},
           {"chat_garbage_rate", v.chat_garbage_rate},
           {"external_slang_features", v.external_slang_features},
           {"external_toxic_rate", v.external_toxic_rate},
           {"external_slang_share", v.external_slang_share},
           {"external_label_noise", v.external_label_noise},
           {"transfer_anchor", v.transfer_anchor}};
}

void from_json(const Json& j, WorldConfig& v) {
  WorldConfig d;
  v.seed = j.value("seed", d.seed);
  v.overt_features = j.value("overt_features", d.overt_features);
  v.covert_features = j.value("covert_features", d.covert_features);
  v.topic_features = j.value("topic_features", d.topic_features);
  v.hash_buckets = j.value("hash_buckets", d.hash_buckets);
  v.tier_step = j.value("tier_step", d.tier_step);
  v.max_tier = j.value("max_tier", d.max_tier);
  v.refusal_rate = j.value("refusal_rate", d.refusal_rate);
  v.adversary_problematic_rate = j.value("adversary_problematic_rate", d.adversary_problematic_rate);
  v.covert_rate_min = j.value("covert_rate_min", d.covert_rate_min);
  v.covert_rate_max = j.value("covert_rate_max", d.covert_rate_max);
  v.curated_covert_zipf = j.value("curated_covert_zipf", d.curated_covert_zipf);
  v.curated_covert_share = j.value("curated_covert_share", d.curated_covert_share);
  v.embedding_dim = j.value("embedding_dim", d.embedding_dim);
  v.judge_l2 = j.value("judge_l2", d.judge_l2);
  v.chat_garbage_rate = j.value("chat_garbage_rate", d.chat_garbage_rate);
  v.external_slang_features = j.value("external_slang_features", d.external_slang_features);
  v.external_toxic_rate = j.value("external_toxic_rate", d.external_toxic_rate);
  v.external_slang_share = j.value("external_slang_share", d.external_slang_share);
  v.external_label_noise = j.value("external_label_noise", d.external_label_noise);
  v.transfer_anchor = j.value("transfer_anchor", d.transfer_anchor);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

World::World(WorldConfig config) : config_(config) {
  if (config_.overt_features < 1 || config_.covert_features < 1 || config_.topic_features < 4 ||
      config_.hash_buckets < 0 || config_.tier_step < 1 || config_.max_tier < 0 ||
      config_.embedding_dim < 2)
    throw PreconditionError("invalid simulator world configuration");
  Rng rng(Fnv1a().add(config_.seed).add("harm-direction").value());
  harm_direction_.resize(static_cast<std::size_t>(config_.embedding_dim));
  double norm = 0;
  for (double& v : harm_direction_) {
    v = rng.normal();
    norm += v * v;
  }
  for (double& v : harm_direction_) v /= std::sqrt(norm);

  double total = 0;
  for (int i = 0; i < config_.covert_features; ++i) {
    total += 1.0 / std::pow(static_cast<double>(i + 1), config_.curated_covert_zipf);
    covert_cdf_.push_back(total);
  }
  for (double& c : covert_cdf_) c /= total;
}

int World::vocab_size() const {
  return config_.overt_features + config_.covert_features + config_.topic_features;
}

int World::feature_count() const { return vocab_size() + config_.hash_buckets; }

int World::overt(int i) const { return i; }
int World::covert(int i) const { return config_.overt_features + i; }
int World::topic(int i) const { return config_.overt_features + config_.covert_features + i; }

bool World::is_overt(int f) const { return f >= 0 && f < config_.overt_features; }
bool World::is_covert(int f) const {
  return f >= config_.overt_features && f < config_.overt_features + config_.covert_features;
}
bool World::is_harmful(int f) const { return is_overt(f) || is_covert(f); }

std::string World::token(int f) const {
  if (is_overt(f)) return "trig" + std::to_string(f);
  if (is_covert(f)) return "veil" + std::to_string(f - config_.overt_features);
  if (f < vocab_size())
    return "topic" + std::to_string(f - config_.overt_features - config_.covert_features);
  return "#bucket" + std::to_string(f - vocab_size());
}

logistic::Row World::vocab_features(std::string_view text) const {
  logistic::Row out;
  int idx = 0;
  for (const std::string& tok : tokenize(text)) {
    if (parse_indexed(tok, "trig", config_.overt_features, idx)) out.push_back(overt(idx));
    else if (parse_indexed(tok, "veil", config_.covert_features, idx)) out.push_back(covert(idx));
    else if (parse_indexed(tok, "topic", config_.topic_features, idx)) out.push_back(topic(idx));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

logistic::Row World::featurize(std::string_view text) const {
  logistic::Row out;
  int idx = 0;
  for (const std::string& tok : tokenize(text)) {
    if (parse_indexed(tok, "trig", config_.overt_features, idx)) out.push_back(overt(idx));
    else if (parse_indexed(tok, "veil", config_.covert_features, idx)) out.push_back(covert(idx));
    else if (parse_indexed(tok, "topic", config_.topic_features, idx)) out.push_back(topic(idx));
    else if (config_.hash_buckets > 0)
      out.push_back(vocab_size() +
                    static_cast<int>(Fnv1a().add(tok).value() %
                                     static_cast<std::uint64_t>(config_.hash_buckets)));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

bool World::ground_truth(const logistic::Row& features) const {
  return std::any_of(features.begin(), features.end(), [&](int f) { return is_harmful(f); });
}

HumanLabel World::oracle_label(std::string_view text) const {
  logistic::Row f = vocab_features(text);
  if (f.empty()) return HumanLabel::Discarded;
  return ground_truth(f) ? HumanLabel::Problematic : HumanLabel::Unproblematic;
}

int World::tier(std::size_t examples) const {
  std::size_t t = examples / static_cast<std::size_t>(config_.tier_step);
  return static_cast<int>(std::min<std::size_t>(t, static_cast<std::size_t>(config_.max_tier)));
}

std::vector<int> World::pick_topics(Rng& rng, int lo, int hi) const {
  int count = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  std::vector<int> all(static_cast<std::size_t>(config_.topic_features));
  for (int i = 0; i < config_.topic_features; ++i) all[static_cast<std::size_t>(i)] = topic(i);
  rng.shuffle(all);
  all.resize(static_cast<std::size_t>(count));
  return all;
}

std::string World::render(std::vector<std::string> tokens, Rng& rng) const {
  rng.shuffle(tokens);
  std::string text = kOpeners[rng.below(std::size(kOpeners))];
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    text += i == 0 ? " " : (i + 1 == tokens.size() ? " and " : ", ");
    text += tokens[i];
  }
  text += "?";
  return text;
}

std::string World::refusal_text(Rng& rng) const { return kRefusals[rng.below(std::size(kRefusals))]; }

Draw World::adversary_draw(int tier, Rng& rng) const {
  Draw d;
  d.tier = std::clamp(tier, 0, config_.max_tier);
  if (rng.chance(config_.refusal_rate)) {
    d.refusal = true;
    d.text = refusal_text(rng);
    return d;
  }
  std::vector<int> feats;
  if (rng.chance(config_.adversary_problematic_rate)) {
    double frac = config_.max_tier == 0 ? 1.0 : static_cast<double>(d.tier) / config_.max_tier;
    double covert_rate = config_.covert_rate_min + frac * (config_.covert_rate_max - config_.covert_rate_min);
    if (rng.chance(covert_rate))
      feats.push_back(covert(static_cast<int>(rng.below(static_cast<std::uint64_t>(config_.covert_features)))));
    else
      feats.push_back(overt(static_cast<int>(rng.below(static_cast<std::uint64_t>(config_.overt_features)))));
    for (int t : pick_topics(rng, 1, 3)) feats.push_back(t);
  } else {
    for (int t : pick_topics(rng, 2, 3)) feats.push_back(t);
  }
  std::sort(feats.begin(), feats.end());
  std::vector<std::string> tokens;
  for (int f : feats) tokens.push_back(token(f));
  d.features = feats;
  d.text = render(std::move(tokens), rng);
  return d;
}

std::vector<Example> World::curated(int n, std::uint64_t stream, const std::string& id_prefix) const {
  Rng rng(Fnv1a().add(config_.seed).add("curated").add(stream).value());
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    // Alternate classes so every curated set is exactly balanced.
    const bool problematic = (i % 2) == 0;
    std::vector<int> feats;
    if (problematic) {
      if (rng.chance(config_.curated_covert_share)) {
        double u = rng.unit();
        int c = static_cast<int>(std::lower_bound(covert_cdf_.begin(), covert_cdf_.end(), u) -
                                 covert_cdf_.begin());
        feats.push_back(covert(std::min(c, config_.covert_features - 1)));
      } else {
        feats.push_back(overt(static_cast<int>(rng.below(static_cast<std::uint64_t>(config_.overt_features)))));
      }
      for (int t : pick_topics(rng, 2, 3)) feats.push_back(t);
    } else {
      for (int t : pick_topics(rng, 2, 4)) feats.push_back(t);
    }
    std::vector<std::string> tokens;
    for (int f : feats) tokens.push_back(token(f));
    char id[32];
    std::snprintf(id, sizeof id, "%04d", i + 1);
    out.push_back(Example{id_prefix + id, render(std::move(tokens), rng), problematic ? 1 : 0});
  }
  return out;
}

Dataset World::seed_dataset(int n) const {
  return Dataset{"seed", curated(n, 1, "seed-"), {DatasetTag::SeedTrain}};
}

Dataset World::holdout_dataset(int n) const {
  return Dataset{"holdout", curated(n, 2, "holdout-"), {DatasetTag::HoldoutTest}};
}

std::vector<Example> World::external_corpus(int n, std::uint64_t stream,
                                            const std::string& id_prefix) const {
  Rng rng(Fnv1a().add(config_.seed).add("external").add(stream).value());
  static constexpr const char* kFrames[] = {"this comment about", "honestly the thread on",
                                            "reply regarding", "my take on"};
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    const bool toxic = rng.chance(config_.external_toxic_rate);
    std::vector<std::string> tokens;
    if (toxic) {
      if (config_.external_slang_features > 0 && rng.chance(config_.external_slang_share))
        tokens.push_back("jibe" + std::to_string(rng.below(static_cast<std::uint64_t>(config_.external_slang_features))));
      else if (rng.chance(0.5))
        tokens.push_back(token(covert(static_cast<int>(rng.below(static_cast<std::uint64_t>(config_.covert_features))))));
      else
        tokens.push_back(token(overt(static_cast<int>(rng.below(static_cast<std::uint64_t>(config_.overt_features))))));
    }
    for (int t : pick_topics(rng, 1, 3)) tokens.push_back(token(t));
    rng.shuffle(tokens);
    std::string text = kFrames[rng.below(std::size(kFrames))];
    for (const auto& t : tokens) text += " " + t;
    int label = toxic ? 1 : 0;
    if (rng.chance(config_.external_label_noise)) label = 1 - label;
    char id[32];
    std::snprintf(id, sizeof id, "%05d", i + 1);
    out.push_back(Example{id_prefix + id, std::move(text), label});
  }
  return out;
}

std::vector<double> World::token_vector(std::string_view tok) const {
  Rng rng(Fnv1a().add(config_.seed).add("token").add(tok).value());
  std::vector<double> v(static_cast<std::size_t>(config_.embedding_dim));
  for (double& x : v) x = rng.normal() / std::sqrt(static_cast<double>(config_.embedding_dim));
  int idx = 0;
  const bool harmful = parse_indexed(tok, "trig", config_.overt_features, idx) ||
                       parse_indexed(tok, "veil", config_.covert_features, idx) ||
                       parse_indexed(tok, "jibe", 1 << 20, idx);
  if (harmful)
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = 0.6 * v[k] + 1.2 * harm_direction_[k];
  return v;
}

std::vector<double> World::embed(std::string_view text) const {
  std::vector<double> acc(static_cast<std::size_t>(config_.embedding_dim), 0.0);
  for (const std::string& tok : tokenize(text)) {
    std::vector<double> v = token_vector(tok);
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += v[k];
  }
  double norm = 0;
  for (double x : acc) norm += x * x;
  if (norm > 0)
    for (double& x : acc) x /= std::sqrt(norm);
  return acc;
}

}  // namespace redloop::sim
