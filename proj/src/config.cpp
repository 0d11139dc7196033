#include "redloop/config.h"

#include "redloop/error.h"
#include "redloop/fsutil.h"

namespace redloop {

void RunConfig::validate() const {
  if (rounds < 0) throw PreconditionError("rounds must be >= 0");
  if (prompts_per_round < 1) throw PreconditionError("prompts_per_round must be >= 1");
  if (finetune_epochs_per_round < 1) throw PreconditionError("finetune_epochs_per_round must be >= 1");
  if (initial_finetune_epochs < 1) throw PreconditionError("initial_finetune_epochs must be >= 1");
  if (example_pool_cap && *example_pool_cap < 1)
    throw PreconditionError("example_pool_cap must be positive or null");
  if (max_discards_factor < 1) throw PreconditionError("max_discards_factor must be >= 1");
  if (parallelism < 1) throw PreconditionError("parallelism must be >= 1");
  if (temperature < 0) throw PreconditionError("temperature must be >= 0");
  if (max_tokens < 1) throw PreconditionError("max_tokens must be >= 1");
  if (seed_dataset_id == holdout_dataset_id)
    throw PreconditionError("seed and holdout datasets must differ");
  if (backend.kind != "simulator" && backend.kind != "remote")
    throw PreconditionError("backend.kind must be 'simulator' or 'remote'");
}

void to_json(Json& j, const BackendConfig& v) {
  j = Json{{"kind", v.kind},
           {"world", v.world},
           {"remote",
            {{"base_url", v.remote.base_url},
             {"api_key_env", v.remote.api_key_env},
             {"judge_mode", v.remote.judge_mode},
             {"timeout_s", v.remote.timeout_s}}}};
}

void from_json(const Json& j, BackendConfig& v) {
  BackendConfig d;
  v.kind = j.value("kind", d.kind);
  v.world = j.contains("world") ? j.at("world").get<sim::WorldConfig>() : d.world;
  const Json r = j.value("remote", Json::object());
  v.remote.base_url = r.value("base_url", d.remote.base_url);
  v.remote.api_key_env = r.value("api_key_env", d.remote.api_key_env);
  v.remote.judge_mode = r.value("judge_mode", d.remote.judge_mode);
  v.remote.timeout_s = r.value("timeout_s", d.remote.timeout_s);
}

void to_json(Json& j, const RunConfig& v) {
  j = Json{{"rounds", v.rounds},
           {"prompts_per_round", v.prompts_per_round},
           {"finetune_epochs_per_round", v.finetune_epochs_per_round},
           {"initial_finetune_epochs", v.initial_finetune_epochs},
           {"seed_dataset_id", v.seed_dataset_id},
           {"holdout_dataset_id", v.holdout_dataset_id},
           {"adversary_model", v.adversary_model},
           {"judge_base_model", v.judge_base_model},
           {"chat_model", v.chat_model},
           {"embedding_model", v.embedding_model},
           {"annotator", v.annotator == AnnotatorKind::SimulatedOracle ? "simulated" : "human"},
           {"example_pool_cap", v.example_pool_cap ? Json(*v.example_pool_cap) : Json(nullptr)},
           {"max_discards_factor", v.max_discards_factor},
           {"parallelism", v.parallelism},
           {"annotation_timeout_s", v.annotation_timeout_s},
           {"reveal_verdict", v.reveal_verdict},
           {"adversary_system_message", v.adversary_system_message},
           {"adversary_instruction", v.adversary_instruction},
           {"judge_system_message", v.judge_system_message},
           {"temperature", v.temperature},
           {"max_tokens", v.max_tokens},
           {"max_retries", v.max_retries},
           {"retry_base_delay_s", v.retry_base_delay_s},
           {"poll_interval_s", v.poll_interval_s},
           {"seed", v.seed},
           {"backend", v.backend}};
}

void from_json(const Json& j, RunConfig& v) {
  if (!j.is_object()) throw SchemaError("run config must be a JSON object");
  RunConfig d;
  v.rounds = j.value("rounds", d.rounds);
  v.prompts_per_round = j.value("prompts_per_round", d.prompts_per_round);
  v.finetune_epochs_per_round = j.value("finetune_epochs_per_round", d.finetune_epochs_per_round);
  v.initial_finetune_epochs = j.value("initial_finetune_epochs", d.initial_finetune_epochs);
  v.seed_dataset_id = j.value("seed_dataset_id", d.seed_dataset_id);
  v.holdout_dataset_id = j.value("holdout_dataset_id", d.holdout_dataset_id);
  v.adversary_model = j.value("adversary_model", d.adversary_model);
  v.judge_base_model = j.value("judge_base_model", d.judge_base_model);
  v.chat_model = j.value("chat_model", d.chat_model);
  v.embedding_model = j.value("embedding_model", d.embedding_model);
  const std::string annotator = j.value("annotator", std::string("simulated"));
  if (annotator == "simulated") v.annotator = AnnotatorKind::SimulatedOracle;
  else if (annotator == "human") v.annotator = AnnotatorKind::HumanViaService;
  else throw SchemaError("annotator must be 'simulated' or 'human'");
  const Json cap = j.value("example_pool_cap", Json(nullptr));
  v.example_pool_cap = cap.is_null() ? std::nullopt : std::optional<int>(cap.get<int>());
  v.max_discards_factor = j.value("max_discards_factor", d.max_discards_factor);
  v.parallelism = j.value("parallelism", d.parallelism);
  v.annotation_timeout_s = j.value("annotation_timeout_s", d.annotation_timeout_s);
  v.reveal_verdict = j.value("reveal_verdict", d.reveal_verdict);
  v.adversary_system_message = j.value("adversary_system_message", d.adversary_system_message);
  v.adversary_instruction = j.value("adversary_instruction", d.adversary_instruction);
  v.judge_system_message = j.value("judge_system_message", d.judge_system_message);
  v.temperature = j.value("temperature", d.temperature);
  v.max_tokens = j.value("max_tokens", d.max_tokens);
  v.max_retries = j.value("max_retries", d.max_retries);
  v.retry_base_delay_s = j.value("retry_base_delay_s", d.retry_base_delay_s);
  v.poll_interval_s = j.value("poll_interval_s", d.poll_interval_s);
  v.seed = j.value("seed", d.seed);
  v.backend = j.contains("backend") ? j.at("backend").get<BackendConfig>() : d.backend;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw SchemaError("config " + path.string() + ": " + e.what());
  }
  RunConfig c = j.get<RunConfig>();
  c.validate();
  return c;
}

}  // namespace redloop
