#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "nanonet/error.hpp"
#include "nanonet/train_loop.hpp"

namespace nanonet {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Parser {
  std::string key;
  std::string value;

  [[noreturn]] void bad(const std::string& what) const {
    throw ConfigError("run config: " + key + " = '" + value + "': " + what);
  }
  std::size_t size() const {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(value, &used);
      if (used != value.size() || value.front() == '-') bad("expected a non-negative integer");
      return static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
      bad("expected a non-negative integer");
    }
  }
  double real() const {
    try {
      std::size_t used = 0;
      const double v = std::stod(value, &used);
      if (used != value.size()) bad("expected a number");
      return v;
    } catch (const std::logic_error&) {
      bad("expected a number");
    }
  }
  bool boolean() const {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    bad("expected true or false");
  }
};

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir) {
  RunConfig c;
  auto path = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  using Setter = std::function<void(const Parser&)>;
  const std::map<std::string, Setter> setters{
      {"mode",
       [&](const Parser& p) {
         if (p.value == "supervised") c.mode = RunMode::supervised;
         else if (p.value == "nanonet") c.mode = RunMode::nanonet;
         else p.bad("expected supervised or nanonet");
       }},
      {"labeled", [&](const Parser& p) { c.labeled = path(p.value); }},
      {"unlabeled", [&](const Parser& p) { c.unlabeled = path(p.value); }},
      {"dev", [&](const Parser& p) { c.dev = path(p.value); }},
      {"test", [&](const Parser& p) { c.test = path(p.value); }},
      {"out_dir", [&](const Parser& p) { c.out_dir = path(p.value); }},
      {"max_len", [&](const Parser& p) { c.max_len = p.size(); }},
      {"n_layers", [&](const Parser& p) { c.model.n_layers = p.size(); }},
      {"d_model", [&](const Parser& p) { c.model.d_model = p.size(); }},
      {"n_heads", [&](const Parser& p) { c.model.n_heads = p.size(); }},
      {"d_ff", [&](const Parser& p) { c.model.d_ff = p.size(); }},
      {"n_classes", [&](const Parser& p) { c.model.n_classes = p.size(); }},
      {"global_every", [&](const Parser& p) { c.model.global_every = p.size(); }},
      {"local_window", [&](const Parser& p) { c.local_window = p.size(); }},
      {"global_theta", [&](const Parser& p) { c.global_theta = p.real(); }},
      {"local_theta", [&](const Parser& p) { c.local_theta = p.real(); }},
      {"token_dropout", [&](const Parser& p) { c.model.token_dropout = p.real(); }},
      {"hidden_dropout", [&](const Parser& p) { c.model.hidden_dropout = p.real(); }},
      {"norm_bias", [&](const Parser& p) { c.model.norm_bias = p.boolean(); }},
      {"init_checkpoint", [&](const Parser& p) { c.init_checkpoint = path(p.value); }},
      {"teacher", [&](const Parser& p) { c.teacher = path(p.value); }},
      {"students", [&](const Parser& p) { c.students = split(p.value, ';'); }},
      {"student_token_dropout", [&](const Parser& p) { c.student_token_dropout = p.real(); }},
      {"student_hidden_dropout", [&](const Parser& p) { c.student_hidden_dropout = p.real(); }},
      {"temperature", [&](const Parser& p) { c.cotrain.distill.temperature = p.real(); }},
      {"attn_weight", [&](const Parser& p) { c.cotrain.distill.attn_weight = p.real(); }},
      {"hidden_weight", [&](const Parser& p) { c.cotrain.distill.hidden_weight = p.real(); }},
      {"logit_weight", [&](const Parser& p) { c.cotrain.distill.logit_weight = p.real(); }},
      {"attn_distance",
       [&](const Parser& p) {
         if (p.value == "mse") c.cotrain.distill.attn_distance = AttentionDistance::mse;
         else if (p.value == "kl") c.cotrain.distill.attn_distance = AttentionDistance::kl;
         else p.bad("expected mse or kl");
       }},
      {"teacher_finetune", [&](const Parser& p) { c.cotrain.teacher_finetune = p.boolean(); }},
      {"lambda", [&](const Parser& p) { c.lambda = p.real(); }},
      {"mu_ramp_fraction", [&](const Parser& p) { c.mu_ramp_fraction = p.real(); }},
      {"bitfit", [&](const Parser& p) { c.policy.bitfit = p.boolean(); }},
      {"freeze_embeddings", [&](const Parser& p) { c.policy.freeze_embeddings = p.boolean(); }},
      {"train_head", [&](const Parser& p) { c.policy.train_head = p.boolean(); }},
      {"overrides",
       [&](const Parser& p) {
         // pattern:0|1 entries separated by commas
         for (const auto& item : split(p.value, ',')) {
           const auto colon = item.rfind(':');
           if (colon == std::string::npos) p.bad("override entries look like pattern:0 or pattern:1");
           const auto flag = trim(item.substr(colon + 1));
           if (flag != "0" && flag != "1") p.bad("override flag must be 0 or 1");
           c.policy.explicit_overrides.emplace_back(trim(item.substr(0, colon)), flag == "1");
         }
       }},
      {"regime", [&](const Parser& p) { c.regime = parse_regime(p.value); }},
      {"lr", [&](const Parser& p) { c.lr = p.real(); }},
      {"labeled_batch", [&](const Parser& p) { c.labeled_batch = p.size(); }},
      {"unlabeled_batch", [&](const Parser& p) { c.unlabeled_batch = p.size(); }},
      {"epochs", [&](const Parser& p) { c.epochs = p.size(); }},
      {"steps", [&](const Parser& p) { c.steps = p.size(); }},
      {"eval_interval", [&](const Parser& p) { c.eval_interval = p.size(); }},
      {"seed", [&](const Parser& p) { c.seed = p.size(); }},
  };

  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("run config line " + std::to_string(lineno) + ": expected key = value");
    Parser p{trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    auto it = setters.find(p.key);
    if (it == setters.end()) throw ConfigError("run config line " + std::to_string(lineno) + ": unknown key '" + p.key + "'");
    if (p.value.empty()) p.bad("empty value");
    it->second(p);
  }

  c.model.fill_schedule(c.local_window, c.global_theta, c.local_theta);
  c.cotrain.regime = regime_settings(c.regime);
  if (c.lr > 0.0) c.cotrain.regime.peak_lr = c.lr;
  c.cotrain.distill.validate();
  if (c.labeled_batch == 0 || c.unlabeled_batch == 0) throw ConfigError("batch sizes must be positive");
  if (c.eval_interval == 0) throw ConfigError("eval_interval must be positive");
  if (c.max_len == 0) throw ConfigError("max_len must be positive");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read run config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path());
}

}  // namespace nanonet
