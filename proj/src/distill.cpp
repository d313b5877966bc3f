#include "nanonet/distill.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "nanonet/error.hpp"

namespace nanonet {

namespace {

std::vector<std::size_t> iota_range(std::size_t first, std::size_t last) {
  std::vector<std::size_t> v(last - first + 1);
  std::iota(v.begin(), v.end(), first);
  return v;
}

std::vector<std::size_t> cat(std::vector<std::size_t> a, const std::vector<std::size_t>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

const std::map<std::string, std::vector<std::size_t>, std::less<>>& named_policies() {
  static const std::map<std::string, std::vector<std::size_t>, std::less<>> table{
      {"BERT-A6", iota_range(0, 5)},   {"BERT-B6", iota_range(6, 11)},
      {"BERT-A4", iota_range(0, 3)},   {"BERT-B4", iota_range(8, 11)},
      {"BERT-A2", iota_range(0, 1)},   {"BERT-B2", iota_range(10, 11)},
      {"MBERT-A13", iota_range(0, 12)}, {"MBERT-B13", cat({0}, iota_range(16, 27))},
      {"MBERT-A4", iota_range(0, 3)},  {"MBERT-B4", cat({0}, iota_range(25, 27))},
  };
  return table;
}

// "0,16-27" or "[0, 16-27]".
std::vector<std::size_t> parse_index_list(std::string_view text) {
  std::string s;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c)) && c != '[' && c != ']') s.push_back(c);
  if (s.empty()) throw ConfigError("empty layer list");
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto comma = std::min(s.find(',', pos), s.size());
    const std::string item = s.substr(pos, comma - pos);
    const auto dash = item.find('-');
    auto parse = [&](const std::string& num) {
      if (num.empty() || !std::all_of(num.begin(), num.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        throw ConfigError("unknown layer policy '" + std::string(text) + "'");
      }
      return static_cast<std::size_t>(std::stoul(num));
    };
    if (dash == std::string::npos) {
      out.push_back(parse(item));
    } else {
      const auto lo = parse(item.substr(0, dash)), hi = parse(item.substr(dash + 1));
      if (hi < lo) throw ConfigError("descending layer range in '" + std::string(text) + "'");
      auto r = iota_range(lo, hi);
      out.insert(out.end(), r.begin(), r.end());
    }
    pos = comma + 1;
  }
  return out;
}

}  // namespace

HiddenProjection HiddenProjection::create(std::size_t d_student, std::size_t d_teacher, std::uint64_t seed) {
  std::vector<double> w(d_student * d_teacher, 0.0);
  if (d_student == d_teacher) {
    for (std::size_t i = 0; i < d_student; ++i) w[i * d_teacher + i] = 1.0;
  } else {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(d_student)));
    for (auto& v : w) v = dist(rng);
  }
  return {Param{"hidden_projection.weight", ParamRole::head, Tensor::from_data({d_student, d_teacher}, std::move(w), true)}};
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (attn_weight < 0.0 || hidden_weight < 0.0 || logit_weight < 0.0) throw ConfigError("loss weights must be non-negative");
}

LayerSelection select_layers(std::string_view policy, const EncoderConfig& teacher_config) {
  const auto& table = named_policies();
  LayerSelection sel;
  sel.policy_name = std::string(policy);
  if (auto it = table.find(policy); it != table.end()) {
    sel.teacher_indices = it->second;
  } else {
    sel.teacher_indices = parse_index_list(policy);
  }
  for (std::size_t i = 0; i < sel.teacher_indices.size(); ++i) {
    const auto idx = sel.teacher_indices[i];
    if (idx >= teacher_config.n_layers) {
      throw ConfigError("policy '" + sel.policy_name + "' selects layer " + std::to_string(idx) + " but the teacher has " +
                        std::to_string(teacher_config.n_layers) + " layers");
    }
    if (i > 0 && idx <= sel.teacher_indices[i - 1]) {
      throw ConfigError("policy '" + sel.policy_name + "' must list strictly increasing layers");
    }
  }
  return sel;
}

Encoder init_student(const Encoder& teacher, const LayerSelection& selection) {
  Encoder student = teacher.select_layers(selection.teacher_indices);
  for (Param* p : student.params()) p->value.set_requires_grad(true);
  return student;
}

Tensor loss_attn(const ForwardTrace& teacher, const ForwardTrace& student, const LayerSelection& selection,
                 const DistillConfig& config) {
  const auto& sel = selection.teacher_indices;
  if (sel.size() != student.attention_probs.size()) {
    throw ConfigError("layer selection has " + std::to_string(sel.size()) + " entries for a " +
                      std::to_string(student.attention_probs.size()) + "-layer student");
  }
  if (student.batch.cu_seqlens != teacher.batch.cu_seqlens) {
    throw ShapeError("attention transfer needs teacher and student traces of the same batch");
  }
  const auto& batch = student.batch;
  Tensor total;
  for (std::size_t l = 0; l < sel.size(); ++l) {
    if (sel[l] >= teacher.attention_probs.size()) throw ConfigError("selection refers past the teacher's depth");
    const Tensor& ps = student.attention_probs[l];
    const Tensor pt = detach(teacher.attention_probs[sel[l]]);
    if (ps.rows() != pt.rows()) {
      throw ConfigError("head-count mismatch: student " + std::to_string(ps.rows()) + " vs teacher " +
                        std::to_string(pt.rows()));
    }
    const std::size_t heads = ps.rows();
    Tensor term;
    if (config.attn_distance == AttentionDistance::mse) {
      const AttentionKind& ks = student.kinds.at(l);
      const AttentionKind& kt = teacher.kinds.at(sel[l]);
      std::size_t allowed = 0;
      for (std::size_t s = 0; s < batch.n_sequences(); ++s) {
        const std::size_t b = batch.seq_begin(s), len = batch.seq_len(s);
        for (std::size_t i = 0; i < len; ++i)
          for (std::size_t j = 0; j < len; ++j) {
            const auto pi = batch.positions[b + i], pj = batch.positions[b + j];
            if (ks.allows(pi, pj) || kt.allows(pi, pj)) ++allowed;
          }
      }
      Tensor diff = sub(ps, pt);
      term = scale(sum(multiply(diff, diff)), 1.0 / static_cast<double>(heads * allowed));
    } else {
      // KL(teacher || student) per attention row, averaged over rows and heads.
      const double rows = static_cast<double>(heads * batch.total_tokens());
      auto P = ps.data(), Q = pt.data();
      double kl = 0.0;
      for (std::size_t i = 0; i < P.size(); ++i) {
        if (Q[i] > 0.0) kl += Q[i] * (std::log(Q[i]) - std::log(std::max(P[i], 1e-300)));
      }
      term = autograd::make_result({1}, {kl / rows}, {ps}, [ps, pt, rows](auto, std::span<const double> g) {
        auto gp = autograd::grad_of(ps);
        auto P = ps.data(), Q = pt.data();
        for (std::size_t i = 0; i < P.size(); ++i) {
          if (Q[i] > 0.0) gp[i] -= g[0] * Q[i] / std::max(P[i], 1e-300) / rows;
        }
      });
    }
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(sel.size()));
}

Tensor loss_hidden(const ForwardTrace& teacher, const ForwardTrace& student, const LayerSelection& selection,
                   const HiddenProjection& projection) {
  const auto& sel = selection.teacher_indices;
  if (sel.empty() || sel.size() + 1 != student.hidden_states.size()) {
    throw ConfigError("layer selection does not match the student's depth");
  }
  const Tensor& w = projection.weight.value;
  const std::size_t ds = student.hidden_states.front().cols(), dt = teacher.hidden_states.front().cols();
  if (w.dim() != 2 || w.rows() != ds || w.cols() != dt) {
    throw ConfigError("hidden projection " + shape_str(w.shape()) + " does not map width " + std::to_string(ds) +
                      " to " + std::to_string(dt));
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (teacher state, student state)
  if (sel.front() == 0) pairs.emplace_back(0, 0);
  for (std::size_t l = 0; l < sel.size(); ++l) {
    if (sel[l] + 1 >= teacher.hidden_states.size()) throw ConfigError("selection refers past the teacher's depth");
    pairs.emplace_back(sel[l] + 1, l + 1);
  }
  Tensor total;
  for (auto [t, s] : pairs) {
    Tensor term = mse(detach(teacher.hidden_states[t]), matmul(student.hidden_states[s], w));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(pairs.size()));
}

Tensor loss_logit(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  return mse(detach(teacher_logits), scale(student_logits, 1.0 / temperature));
}

}  // namespace nanonet
