#include "hypermoe/config_io.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "hypermoe/errors.hpp"

namespace hypermoe {

namespace {

using nlohmann::json;

// Reads keys of one JSON object, rejecting anything it was not asked about.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
  }

  void size(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) {
        throw ConfigError(path(key) + ": expected a non-negative integer");
      }
      out = v->get<std::size_t>();
    }
  }
  void u64(const char* key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() ||
          (!v->is_number_unsigned() && v->get<long long>() < 0)) {
        throw ConfigError(path(key) + ": expected a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void real(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(path(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void flag(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(path(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void text(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(path(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  template <typename Parse, typename T>
  void choice(const char* key, T& out, Parse parse) {
    std::string value;
    if (!find(key)) return;
    text(key, value);
    try {
      out = parse(value);
    } catch (const ConfigError&) {
      throw ConfigError(path(key) + ": unknown value '" + value + "'");
    }
  }
  void sizes(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(path(key) + ": expected an array of integers");
      out.clear();
      for (const json& e : *v) {
        if (!e.is_number_integer() || e.get<long long>() < 0) {
          throw ConfigError(path(key) + ": expected an array of non-negative integers");
        }
        out.push_back(e.get<std::size_t>());
      }
    }
  }

  // Marks a key handled elsewhere; true when present.
  bool known(const char* key) { return find(key) != nullptr; }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path(it.key()) + ": unknown key");
    }
  }

 private:
  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string path(const std::string& key) const { return name_ + "." + key; }

  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void read_optimizer(const json& j, OptimizerConfig& o) {
  Section s(j, "optimizer");
  s.real("learning_rate", o.learning_rate);
  s.real("beta1", o.beta1);
  s.real("beta2", o.beta2);
  s.real("epsilon", o.epsilon);
  s.real("warmup_fraction", o.warmup_fraction);
  s.size("steps", o.steps);
  s.size("batch_size", o.batch_size);
  s.reject_unknown();
  if (o.learning_rate <= 0.0) throw ConfigError("optimizer.learning_rate: must be positive");
  if (o.warmup_fraction < 0.0 || o.warmup_fraction > 1.0) {
    throw ConfigError("optimizer.warmup_fraction: must lie in [0, 1]");
  }
  if (o.batch_size == 0) throw ConfigError("optimizer.batch_size: must be positive");
}

void read_model(const json& j, ModelConfig& m) {
  Section s(j, "model");
  s.choice("layer_kind", m.layer_kind, parse_layer_kind);
  s.size("hidden", m.hidden);
  s.size("inner", m.inner);
  s.size("num_experts", m.num_experts);
  s.size("top_k", m.top_k);
  s.size("num_layers", m.num_layers);
  s.size("selection_dim", m.selection_dim);
  s.size("embedding_dim", m.embedding_dim);
  s.size("hyper_input_dim", m.hyper_input_dim);
  s.size("bottleneck", m.bottleneck);
  s.size("selection_hidden", m.selection_hidden);
  s.real("aux_loss_coef", m.aux_loss_coef);
  s.flag("noise_enabled", m.noise_enabled);
  s.flag("renormalize_gates", m.renormalize_gates);
  s.choice("condition_on", m.condition_on, parse_condition_on);
  s.choice("embedding_source", m.embedding_source, parse_embedding_source);
  s.flag("zero_hypernetwork", m.zero_hypernetwork);
  s.u64("seed", m.seed);
  // Derived from the task; accepted so checkpoint snapshots read back.
  s.size("vocab_size", m.vocab_size);
  s.size("seq_len", m.seq_len);
  s.size("output_dim", m.output_dim);
  s.flag("scalar_inputs", m.scalar_inputs);
  if (s.known("optimizer")) read_optimizer(j.at("optimizer"), m.optimizer);
  s.reject_unknown();
}

void read_task(const json& j, TaskConfig& t) {
  Section s(j, "task");
  s.text("id", t.id);
  s.sizes("moduli", t.moduli);
  s.size("operand_range", t.operand_range);
  s.size("num_distractors", t.num_distractors);
  s.size("distractor_vocab", t.distractor_vocab);
  s.size("num_functions", t.num_functions);
  s.size("num_knots", t.num_knots);
  s.size("grid_size", t.grid_size);
  s.real("eval_fraction", t.eval_fraction);
  s.u64("seed", t.seed);
  s.size("eval_samples", t.eval_samples);
  s.reject_unknown();
}

std::string line_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, column = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  }
  return std::to_string(line) + ":" + std::to_string(column);
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    std::string what = e.what();
    if (auto pos = what.find("parse error"); pos != std::string::npos) what = what.substr(pos);
    throw ConfigError(origin + ":" + line_column(text, e.byte) + ": " + what);
  }
  if (!j.is_object()) throw ConfigError(origin + ": top level must be an object");
  RunConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (key == "model") {
      read_model(*it, cfg.model);
    } else if (key == "optimizer") {
      read_optimizer(*it, cfg.model.optimizer);
    } else if (key == "task") {
      read_task(*it, cfg.task);
    } else {
      throw ConfigError(key + ": unknown key");
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), path);
}

json to_json(const ModelConfig& m) {
  const OptimizerConfig& o = m.optimizer;
  return {
      {"layer_kind", to_string(m.layer_kind)},
      {"hidden", m.hidden},
      {"inner", m.inner},
      {"num_experts", m.num_experts},
      {"top_k", m.top_k},
      {"num_layers", m.num_layers},
      {"selection_dim", m.selection_dim},
      {"embedding_dim", m.embedding_dim},
      {"hyper_input_dim", m.hyper_input_dim},
      {"bottleneck", m.bottleneck},
      {"selection_hidden", m.selection_hidden},
      {"aux_loss_coef", m.aux_loss_coef},
      {"noise_enabled", m.noise_enabled},
      {"renormalize_gates", m.renormalize_gates},
      {"condition_on", to_string(m.condition_on)},
      {"embedding_source", to_string(m.embedding_source)},
      {"zero_hypernetwork", m.zero_hypernetwork},
      {"seed", m.seed},
      {"vocab_size", m.vocab_size},
      {"seq_len", m.seq_len},
      {"output_dim", m.output_dim},
      {"scalar_inputs", m.scalar_inputs},
      {"optimizer",
       {{"learning_rate", o.learning_rate},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"epsilon", o.epsilon},
        {"warmup_fraction", o.warmup_fraction},
        {"steps", o.steps},
        {"batch_size", o.batch_size}}},
  };
}

json to_json(const TaskConfig& t) {
  return {{"id", t.id},
          {"moduli", t.moduli},
          {"operand_range", t.operand_range},
          {"num_distractors", t.num_distractors},
          {"distractor_vocab", t.distractor_vocab},
          {"num_functions", t.num_functions},
          {"num_knots", t.num_knots},
          {"grid_size", t.grid_size},
          {"eval_fraction", t.eval_fraction},
          {"seed", t.seed},
          {"eval_samples", t.eval_samples}};
}

json to_json(const RunConfig& cfg) {
  json model = to_json(cfg.model);
  json optimizer = model["optimizer"];
  model.erase("optimizer");
  return {{"model", model}, {"optimizer", optimizer}, {"task", to_json(cfg.task)}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  read_model(j, m);
  return m;
}

TaskConfig task_config_from_json(const json& j) {
  TaskConfig t;
  read_task(j, t);
  return t;
}

std::string first_difference(const json& a, const json& b, const std::string& prefix) {
  if (a.is_object() && b.is_object()) {
    for (auto it = a.begin(); it != a.end(); ++it) {
      const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
      if (!b.contains(it.key())) return key;
      std::string d = first_difference(*it, b.at(it.key()), key);
      if (!d.empty()) return d;
    }
    for (auto it = b.begin(); it != b.end(); ++it) {
      if (!a.contains(it.key())) return prefix.empty() ? it.key() : prefix + "." + it.key();
    }
    return "";
  }
  return a == b ? "" : (prefix.empty() ? "<root>" : prefix);
}

}  // namespace hypermoe
