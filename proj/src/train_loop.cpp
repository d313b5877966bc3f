#include "nanonet/train_loop.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include <json.hpp>

#include "nanonet/checkpoint.hpp"
#include "nanonet/error.hpp"
#include "nanonet/harness.hpp"

namespace nanonet {

namespace {

using ordered_json = nlohmann::ordered_json;

// Endless shuffled stream of indices; reshuffles after every full pass.
class IndexCycle {
 public:
  IndexCycle(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> take(std::size_t count) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < count && !order_.empty(); ++i) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  // Remaining indices of the current pass, at most count of them.
  std::vector<std::size_t> take_in_pass(std::size_t count) {
    if (pos_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    const std::size_t n = std::min(count, order_.size() - pos_);
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt)};
  std::uint64_t out[1];
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  out[0] = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
  return out[0];
}

// Blank files are a configuration problem here, not a parse problem.
void require_records(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path);
  std::string line;
  std::size_t records = format_for(path) == CorpusFormat::csv ? 0 : 1;  // CSV spends one line on the header
  while (std::getline(in, line))
    if (line.find_first_not_of(" \t\r") != std::string::npos && ++records > 1) return;
  if (in.bad() || !std::filesystem::exists(path)) return;  // let the loader report I/O problems
  throw ConfigError(std::string(what) + " dataset " + path.string() + " is empty");
}

Corpus load_labeled(const std::filesystem::path& path, std::size_t n_classes, const char* what) {
  if (path.empty()) throw ConfigError(std::string("run config needs a ") + what + " corpus");
  require_records(path, what);
  Corpus c = load_corpus(path, format_for(path), n_classes);
  for (const auto& ex : c.examples)
    if (!ex.label) throw ValidationError(std::string(what) + " corpus " + path.string() + " has unlabeled examples");
  return c;
}

ordered_json record_json(const EvalRecord& r) {
  ordered_json kd_attn = ordered_json::array(), kd_hidden = ordered_json::array(), kd_logit = ordered_json::array();
  for (const auto& kd : r.losses.kd_per_student) {
    kd_attn.push_back(kd.attn);
    kd_hidden.push_back(kd.hidden);
    kd_logit.push_back(kd.logit);
  }
  ordered_json j;
  j["step"] = r.step;
  j["lr"] = r.losses.lr;
  j["mu"] = r.losses.mu;
  j["total"] = r.losses.total;
  j["ce_teacher"] = r.losses.ce_teacher;
  j["ce_student"] = r.losses.ce_student;
  j["kd_attn"] = kd_attn;
  j["kd_hidden"] = kd_hidden;
  j["kd_logit"] = kd_logit;
  j["dml"] = r.losses.dml_per_student;
  j["dev_acc"] = r.dev_accuracy;
  j["best_student"] = r.best_student;
  j["best_step"] = r.best_step;
  j["best_dev"] = r.best_dev;
  return j;
}

}  // namespace

TrainResult train_loop(const RunConfig& cfg) {
  std::optional<Encoder> teacher;
  std::vector<Student> students;

  if (cfg.mode == RunMode::nanonet) {
    if (cfg.teacher.empty()) throw ConfigError("nanonet mode needs a teacher checkpoint");
    if (cfg.students.empty()) throw ConfigError("nanonet mode needs at least one student policy");
    teacher = load_checkpoint(cfg.teacher);
    if (cfg.cotrain.teacher_finetune) {
      apply_policy(*teacher, cfg.policy);
    } else {
      for (Param* p : teacher->params()) p->value.set_requires_grad(false);
    }
    for (std::size_t k = 0; k < cfg.students.size(); ++k) {
      auto sel = select_layers(cfg.students[k], teacher->config());
      Encoder model = init_student(*teacher, sel);
      model.set_dropout(cfg.student_token_dropout, cfg.student_hidden_dropout);
      apply_policy(model, cfg.policy);
      auto proj = HiddenProjection::create(model.config().d_model, teacher->config().d_model, derive_seed(cfg.seed, 100 + k));
      apply_policy(std::vector<Param*>{&proj.weight}, ParamPolicy{cfg.policy.bitfit, cfg.policy.freeze_embeddings,
                                                                   cfg.policy.train_head, {}});
      students.push_back({std::move(model), std::move(sel), std::move(proj), derive_seed(cfg.seed, 200 + k)});
    }
  } else {
    Encoder model = cfg.init_checkpoint.empty() ? Encoder(cfg.model, derive_seed(cfg.seed, 1))
                                                : load_checkpoint(cfg.init_checkpoint);
    apply_policy(model, cfg.policy);
    LayerSelection all;
    all.policy_name = "all";
    for (std::size_t l = 0; l < model.config().n_layers; ++l) all.teacher_indices.push_back(l);
    auto proj = HiddenProjection::create(model.config().d_model, model.config().d_model, 0);
    students.push_back({std::move(model), std::move(all), std::move(proj), derive_seed(cfg.seed, 200)});
  }
  const std::size_t n_classes = students.front().model.config().n_classes;

  const Corpus labeled = load_labeled(cfg.labeled, n_classes, "labeled");
  const Corpus dev = load_labeled(cfg.dev, n_classes, "dev");
  std::optional<Corpus> test;
  if (!cfg.test.empty()) test = load_labeled(cfg.test, n_classes, "test");
  std::vector<std::vector<int>> unlabeled_seqs;
  if (!cfg.unlabeled.empty()) {
    require_records(cfg.unlabeled, "unlabeled");
    unlabeled_seqs = tokenize_corpus(load_corpus(cfg.unlabeled, format_for(cfg.unlabeled)), cfg.max_len);
  }
  const auto labeled_seqs = tokenize_corpus(labeled, cfg.max_len);

  const std::size_t steps_per_epoch = (labeled.size() + cfg.labeled_batch - 1) / cfg.labeled_batch;
  const std::size_t total_steps = cfg.steps ? cfg.steps : cfg.epochs * steps_per_epoch;

  Encoder* teacher_ptr = teacher ? &*teacher : nullptr;
  Adam optimizer(trainable_tensors(teacher_ptr, students, cfg.cotrain), cfg.cotrain.regime);
  IndexCycle labeled_cycle(labeled.size(), derive_seed(cfg.seed, 10));
  IndexCycle unlabeled_cycle(unlabeled_seqs.size(), derive_seed(cfg.seed, 11));

  std::filesystem::create_directories(cfg.out_dir);
  const auto metrics_path = cfg.out_dir / "metrics.jsonl";
  const auto ckpt_path = cfg.out_dir / "best.ckpt";
  std::ofstream(metrics_path, std::ios::trunc);

  TrainResult result;
  result.total_steps = total_steps;
  std::optional<Encoder> best_model;
  double best_dev = -1.0;

  auto evaluate_now = [&](std::size_t step, const LossBreakdown& losses) {
    EvalRecord rec;
    rec.step = step;
    rec.losses = losses;
    for (std::size_t k = 0; k < students.size(); ++k) {
      const double acc = evaluate(students[k].model, dev, cfg.max_len);
      rec.dev_accuracy.push_back(acc);
      if (acc > best_dev) {
        best_dev = acc;
        result.best_student = k;
        result.best_step = step;
        best_model = students[k].model.clone();
        save_checkpoint(*best_model, ckpt_path);
      }
    }
    rec.best_student = result.best_student;
    rec.best_step = result.best_step;
    rec.best_dev = best_dev;
    std::ofstream out(metrics_path, std::ios::app | std::ios::binary);
    out << record_json(rec).dump() << '\n';
    if (!out) throw IoError("cannot append to " + metrics_path.string());
    result.history.push_back(std::move(rec));
  };

  LossBreakdown initial;
  initial.ce_student.assign(students.size(), 0.0);
  initial.kd_per_student.assign(students.size(), {});
  initial.dml_per_student.assign(students.size(), 0.0);
  initial.lambda = cfg.lambda;
  evaluate_now(0, initial);

  ScheduleState state{0, total_steps, cfg.cotrain.regime.warmup_fraction, cfg.lambda, cfg.mu_ramp_fraction};
  for (std::size_t step = 0; step < total_steps; ++step) {
    state.step = step;
    SemiBatch batch;
    std::vector<std::vector<int>> seqs;
    std::vector<int> labels;
    for (auto i : labeled_cycle.take_in_pass(cfg.labeled_batch)) {
      seqs.push_back(labeled_seqs[i]);
      labels.push_back(*labeled.examples[i].label);
    }
    batch.labeled = pack_sequences(seqs, labels);
    seqs.clear();
    for (auto i : unlabeled_cycle.take(cfg.unlabeled_batch)) seqs.push_back(unlabeled_seqs[i]);
    if (!seqs.empty()) batch.unlabeled = pack_sequences(seqs);

    const LossBreakdown losses = train_step(teacher_ptr, students, batch, state, cfg.cotrain, optimizer);
    if ((step + 1) % cfg.eval_interval == 0 || step + 1 == total_steps) evaluate_now(step + 1, losses);
  }

  result.best_dev = best_dev;
  result.test_accuracy = test ? evaluate(*best_model, *test, cfg.max_len) : std::numeric_limits<double>::quiet_NaN();

  std::ofstream summary(cfg.out_dir / "summary.csv", std::ios::trunc | std::ios::binary);
  summary.precision(17);
  summary << "best_student,best_step,best_dev_acc,test_acc,total_steps\n";
  summary << result.best_student << ',' << result.best_step << ',' << result.best_dev << ',';
  if (test) summary << result.test_accuracy;
  summary << ',' << total_steps << '\n';
  if (!summary) throw IoError("cannot write summary.csv");
  return result;
}

}  // namespace nanonet
