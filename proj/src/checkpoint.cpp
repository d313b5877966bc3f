#include "nanonet/checkpoint.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "nanonet/error.hpp"

namespace nanonet {

namespace {

using nlohmann::json;

json kind_to_json(const AttentionKind& k) {
  return {{"type", k.type == AttentionType::global ? "global" : "local"},
          {"window", k.window},
          {"rope_theta", k.rope_theta}};
}

AttentionKind kind_from_json(const json& j) {
  AttentionKind k;
  const auto type = j.at("type").get<std::string>();
  if (type == "global") {
    k.type = AttentionType::global;
  } else if (type == "local") {
    k.type = AttentionType::local;
  } else {
    throw ConfigError("unknown attention type '" + type + "'");
  }
  k.window = j.at("window").get<std::size_t>();
  k.rope_theta = j.at("rope_theta").get<double>();
  return k;
}

void append_double(std::string& out, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

}  // namespace

std::string config_to_json(const EncoderConfig& c) {
  json schedule = json::array();
  for (const auto& k : c.attention_schedule) schedule.push_back(kind_to_json(k));
  json j = {{"n_layers", c.n_layers},
            {"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"d_ff", c.d_ff},
            {"vocab_size", c.vocab_size},
            {"n_classes", c.n_classes},
            {"global_every", c.global_every},
            {"attention_schedule", schedule},
            {"token_dropout", c.token_dropout},
            {"hidden_dropout", c.hidden_dropout},
            {"norm_bias", c.norm_bias},
            {"norm_eps", c.norm_eps}};
  return j.dump();
}

EncoderConfig config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    EncoderConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.n_classes = j.at("n_classes").get<std::size_t>();
    c.global_every = j.at("global_every").get<std::size_t>();
    for (const auto& k : j.at("attention_schedule")) c.attention_schedule.push_back(kind_from_json(k));
    c.token_dropout = j.at("token_dropout").get<double>();
    c.hidden_dropout = j.at("hidden_dropout").get<double>();
    c.norm_bias = j.at("norm_bias").get<bool>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed encoder config: ") + e.what());
  }
}

void save_checkpoint(const Encoder& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const auto params = model.params();
  out << "nanonet-checkpoint " << kCheckpointVersion << '\n';
  out << "config " << config_to_json(model.config()) << '\n';
  out << "params " << params.size() << '\n';
  std::string line;
  for (const Param* p : params) {
    const auto& shape = p->value.shape();
    out << p->name << ' ' << role_name(p->role) << ' ' << (p->trainable() ? 1 : 0) << ' ' << shape.size();
    for (auto d : shape) out << ' ' << d;
    out << '\n';
    line.clear();
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      if (i) line.push_back(' ');
      append_double(line, p->value.data()[i]);
    }
    out << line << '\n';
  }
  if (!out) throw IoError("failed while writing checkpoint " + path.string());
}

Encoder load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  auto fail = [&](const std::string& why) -> IoError { return IoError("checkpoint " + path.string() + ": " + why); };

  std::string line;
  std::getline(in, line);
  if (line != "nanonet-checkpoint " + std::to_string(kCheckpointVersion)) throw fail("unsupported header '" + line + "'");
  std::getline(in, line);
  if (line.rfind("config ", 0) != 0) throw fail("missing config line");
  Encoder model(config_from_json(line.substr(7)), 0);

  std::getline(in, line);
  std::size_t count = 0;
  if (std::sscanf(line.c_str(), "params %zu", &count) != 1) throw fail("missing params line");

  std::map<std::string, Param*> by_name;
  for (Param* p : model.params()) by_name[p->name] = p;
  if (count != by_name.size()) throw fail("parameter count does not match the config");

  for (std::size_t n = 0; n < count; ++n) {
    if (!std::getline(in, line)) throw fail("truncated");
    std::istringstream hdr(line);
    std::string name, role;
    int trainable = 0;
    std::size_t rank = 0;
    hdr >> name >> role >> trainable >> rank;
    Shape shape(rank);
    for (auto& d : shape) hdr >> d;
    if (!hdr) throw fail("malformed parameter header '" + line + "'");
    auto it = by_name.find(name);
    if (it == by_name.end()) throw fail("unknown parameter '" + name + "'");
    Param& p = *it->second;
    if (p.value.shape() != shape) throw fail("shape mismatch for '" + name + "'");
    p.role = parse_role(role);

    if (!std::getline(in, line)) throw fail("truncated values for '" + name + "'");
    auto values = p.value.mutable_data();
    const char* cur = line.data();
    const char* end = line.data() + line.size();
    for (std::size_t i = 0; i < values.size(); ++i) {
      while (cur < end && *cur == ' ') ++cur;
      auto res = std::from_chars(cur, end, values[i]);
      if (res.ec != std::errc()) throw fail("bad value in '" + name + "'");
      cur = res.ptr;
    }
    p.value.set_requires_grad(trainable != 0);
  }
  return model;
}

}  // namespace nanonet
