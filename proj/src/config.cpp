#include "ciseg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace ciseg {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& scope) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("config: unknown key '" + (scope.empty() ? it.key() : scope + "." + it.key()) +
                        "'");
}

template <typename T>
void get_if(const json& j, const char* key, T* out) {
  if (j.contains(key)) *out = j.at(key).get<T>();
}

uint64_t fnv1a_str(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: document must be a JSON object");

  static const std::set<std::string> top_keys = {
      "schema_version", "protocol",       "setting",          "mode",
      "seed",           "class_order_seed", "steps_iterations", "batch_size",
      "learning_rate",  "weight_decay",   "eval_interval",    "train_size",
      "test_size",      "image_size",     "instances_min",    "instances_max",
      "threads",        "record_wall_clock", "model",         "ablations",
      "loss_weights",   "cost_weights",   "pod_scales",       "output_dir",
      "dataset_cache",  "plots"};
  reject_unknown(j, top_keys, "");

  ExperimentConfig c;
  get_if(j, "schema_version", &c.schema_version);
  if (c.schema_version != 1)
    throw ConfigError("config: unsupported schema_version " + std::to_string(c.schema_version));
  get_if(j, "protocol", &c.protocol_name);
  get_if(j, "setting", &c.setting);
  if (c.setting != "overlapped" && c.setting != "disjoint")
    throw ConfigError("config: setting must be 'overlapped' or 'disjoint'");
  get_if(j, "mode", &c.mode);
  if (c.mode != "semantic" && c.mode != "instance")
    throw ConfigError("config: mode must be 'semantic' or 'instance'");
  get_if(j, "seed", &c.seed);
  get_if(j, "class_order_seed", &c.class_order_seed);
  get_if(j, "steps_iterations", &c.steps_iterations);
  get_if(j, "batch_size", &c.batch_size);
  get_if(j, "learning_rate", &c.learning_rate);
  get_if(j, "weight_decay", &c.weight_decay);
  get_if(j, "eval_interval", &c.eval_interval);
  get_if(j, "train_size", &c.train_size);
  get_if(j, "test_size", &c.test_size);
  get_if(j, "image_size", &c.image_size);
  get_if(j, "instances_min", &c.instances_min);
  get_if(j, "instances_max", &c.instances_max);
  get_if(j, "threads", &c.threads);
  get_if(j, "record_wall_clock", &c.record_wall_clock);
  get_if(j, "pod_scales", &c.pod_scales);
  get_if(j, "output_dir", &c.output_dir);
  get_if(j, "dataset_cache", &c.dataset_cache);
  get_if(j, "plots", &c.plots);

  if (j.contains("model")) {
    const json& m = j.at("model");
    reject_unknown(m, {"d_q", "decoder_layers", "backbone_channels", "attention_heads",
                       "ffn_hidden"},
                   "model");
    get_if(m, "d_q", &c.model.d_q);
    get_if(m, "decoder_layers", &c.model.decoder_layers);
    get_if(m, "backbone_channels", &c.model.backbone_channels);
    get_if(m, "attention_heads", &c.model.attention_heads);
    get_if(m, "ffn_hidden", &c.model.ffn_hidden);
  }
  if (j.contains("ablations")) {
    const json& a = j.at("ablations");
    reject_unknown(a, {"freeze_queries", "independent_match", "use_query_kd", "use_class_kd",
                       "use_mask_kd", "use_pod_kd"},
                   "ablations");
    get_if(a, "freeze_queries", &c.ablations.freeze_queries);
    get_if(a, "independent_match", &c.ablations.independent_match);
    get_if(a, "use_query_kd", &c.ablations.use_query_kd);
    get_if(a, "use_class_kd", &c.ablations.use_class_kd);
    get_if(a, "use_mask_kd", &c.ablations.use_mask_kd);
    get_if(a, "use_pod_kd", &c.ablations.use_pod_kd);
  }
  if (j.contains("loss_weights")) {
    const json& w = j.at("loss_weights");
    reject_unknown(w, {"lambda1", "lambda2", "lambda3", "lambda4", "lambda_c", "lambda_d"},
                   "loss_weights");
    get_if(w, "lambda1", &c.loss_weights.lambda1);
    get_if(w, "lambda2", &c.loss_weights.lambda2);
    get_if(w, "lambda3", &c.loss_weights.lambda3);
    get_if(w, "lambda4", &c.loss_weights.lambda4);
    get_if(w, "lambda_c", &c.loss_weights.lambda_c);
    get_if(w, "lambda_d", &c.loss_weights.lambda_d);
    for (double v : {c.loss_weights.lambda1, c.loss_weights.lambda2, c.loss_weights.lambda3,
                     c.loss_weights.lambda4, c.loss_weights.lambda_c, c.loss_weights.lambda_d})
      if (v < 0) throw ConfigError("config: loss weights must be >= 0");
  }
  if (j.contains("cost_weights")) {
    const json& w = j.at("cost_weights");
    reject_unknown(w, {"w_class", "w_ce", "w_dice"}, "cost_weights");
    get_if(w, "w_class", &c.cost_weights.w_class);
    get_if(w, "w_ce", &c.cost_weights.w_ce);
    get_if(w, "w_dice", &c.cost_weights.w_dice);
    if (c.cost_weights.w_class == 0 && c.cost_weights.w_ce == 0 && c.cost_weights.w_dice == 0)
      throw ConfigError("config: cost weights cannot all be zero");
  }

  c.model.image_h = c.model.image_w = c.image_size;
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string ExperimentConfig::to_json_text() const {
  ordered_json j;
  j["schema_version"] = schema_version;
  j["protocol"] = protocol_name;
  j["setting"] = setting;
  j["mode"] = mode;
  j["seed"] = seed;
  j["class_order_seed"] = class_order_seed;
  j["steps_iterations"] = steps_iterations;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["weight_decay"] = weight_decay;
  j["eval_interval"] = eval_interval;
  j["train_size"] = train_size;
  j["test_size"] = test_size;
  j["image_size"] = image_size;
  j["instances_min"] = instances_min;
  j["instances_max"] = instances_max;
  j["threads"] = threads;
  j["record_wall_clock"] = record_wall_clock;
  j["model"] = {{"d_q", model.d_q},
                {"decoder_layers", model.decoder_layers},
                {"backbone_channels", model.backbone_channels},
                {"attention_heads", model.attention_heads},
                {"ffn_hidden", model.ffn_hidden}};
  j["ablations"] = {{"freeze_queries", ablations.freeze_queries},
                    {"independent_match", ablations.independent_match},
                    {"use_query_kd", ablations.use_query_kd},
                    {"use_class_kd", ablations.use_class_kd},
                    {"use_mask_kd", ablations.use_mask_kd},
                    {"use_pod_kd", ablations.use_pod_kd}};
  j["loss_weights"] = {{"lambda1", loss_weights.lambda1},   {"lambda2", loss_weights.lambda2},
                       {"lambda3", loss_weights.lambda3},   {"lambda4", loss_weights.lambda4},
                       {"lambda_c", loss_weights.lambda_c}, {"lambda_d", loss_weights.lambda_d}};
  j["cost_weights"] = {{"w_class", cost_weights.w_class},
                       {"w_ce", cost_weights.w_ce},
                       {"w_dice", cost_weights.w_dice}};
  j["pod_scales"] = pod_scales;
  j["output_dir"] = output_dir;
  j["dataset_cache"] = dataset_cache;
  j["plots"] = plots;
  return j.dump(2);
}

std::string ExperimentConfig::hash() const {
  // identity subset: drop output/thread/timing knobs that cannot change
  // the numbers
  ordered_json j = ordered_json::parse(to_json_text());
  j.erase("output_dir");
  j.erase("dataset_cache");
  j.erase("plots");
  j.erase("threads");
  j.erase("record_wall_clock");
  uint64_t h = fnv1a_str(j.dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

TrainConfig ExperimentConfig::to_train_config() const {
  TrainConfig t;
  t.protocol = build_protocol(protocol_name,
                              setting == "disjoint" ? Setting::kDisjoint : Setting::kOverlapped,
                              class_order_seed);
  t.mode = mode == "instance" ? TaskMode::kInstance : TaskMode::kSemantic;
  t.model = model;
  t.steps_iterations = steps_iterations;
  t.batch_size = batch_size;
  t.learning_rate = learning_rate;
  t.weight_decay = weight_decay;
  t.seed = seed;
  t.ablations = ablations;
  t.loss_weights = loss_weights;
  t.cost_weights = cost_weights;
  t.pod_scales = pod_scales;
  t.eval_interval = eval_interval;
  t.train_size = train_size;
  t.test_size = test_size;
  t.instances_min = instances_min;
  t.instances_max = instances_max;
  t.threads = threads;
  t.record_wall_clock = record_wall_clock;
  t.out_dir = output_dir;
  t.config_hash = hash();
  t.validate();
  return t;
}

}  // namespace ciseg
