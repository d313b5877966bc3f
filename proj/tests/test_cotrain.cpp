#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "nanonet/checkpoint.hpp"
#include "nanonet/cotrain.hpp"
#include "nanonet/error.hpp"
#include "nanonet/harness.hpp"
#include "nanonet/train_loop.hpp"
#include "support/test_support.hpp"

namespace nanonet {
namespace {

namespace fs = std::filesystem;
using testing::random_matrix;

std::vector<std::vector<double>> snapshot(const Encoder& m) {
  std::vector<std::vector<double>> out;
  for (const Param* p : m.params()) out.emplace_back(p->value.data().begin(), p->value.data().end());
  return out;
}

SemiBatch toy_batch(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SemiBatch b;
  auto lab = testing::random_sequences(rng, 4, 4, 2, 10, 256);
  b.labeled = pack_sequences(lab, std::vector<int>{0, 1, 2, 3});
  b.unlabeled = pack_sequences(testing::random_sequences(rng, 6, 6, 2, 10, 256));
  return b;
}

struct Setup {
  Encoder teacher;
  std::vector<Student> students;
};

Setup make_setup(std::uint64_t seed, std::vector<std::string> policies, double dropout = 0.0) {
  EncoderConfig cfg = testing::tiny_config();
  cfg.n_layers = 3;
  cfg.fill_schedule(4);
  Setup s{Encoder(cfg, seed), {}};
  for (Param* p : s.teacher.params()) p->value.set_requires_grad(false);
  for (std::size_t k = 0; k < policies.size(); ++k) {
    auto sel = select_layers(policies[k], s.teacher.config());
    Encoder m = init_student(s.teacher, sel);
    m.set_dropout(dropout, dropout);
    s.students.push_back({std::move(m), sel, HiddenProjection::create(8, 8, 0), 100 + k});
  }
  return s;
}

TEST(Dml, ValueAndGradientFlowOnlyToSelf) {
  std::mt19937_64 rng(1);
  Tensor a = random_matrix(3, 4, rng, 1.0, true), b = random_matrix(3, 4, rng, 1.0, true);
  loss_dml(a, b).backward();
  EXPECT_TRUE(a.has_grad());
  EXPECT_FALSE(b.has_grad());
  EXPECT_THROW(loss_dml(a, Tensor::zeros({3, 3})), ShapeError);
}

TEST(Dml, EqualInputsGiveZeroLossAndZeroGradient) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
  Tensor loss = loss_dml(a, a.clone());
  EXPECT_EQ(loss.item(), 0.0);
  loss.backward();
  ASSERT_EQ(a.grad().size(), 4u);
  for (double g : a.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Dml, DirectedPairSumsToTwiceMse) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const auto a = random_matrix(4, 3, rng), b = random_matrix(4, 3, rng);
    EXPECT_NEAR(loss_dml(a, b).item() + loss_dml(b, a).item(), 2.0 * mse(a, b).item(), 1e-12);
  }
}

TEST(Cohort, ReducesToDmlForTwoStudents) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_matrix(1 + rng() % 5, 4, rng, 3.0);
    const auto b = random_matrix(a.rows(), 4, rng, 3.0);
    EXPECT_NEAR(loss_cohort(a, {b}).item(), loss_dml(a, b).item(), 1e-12);
  }
}

TEST(Cohort, ThreeStudentsAverageTwoTerms) {
  std::mt19937_64 rng(4);
  const auto a = random_matrix(3, 4, rng), b = random_matrix(3, 4, rng), c = random_matrix(3, 4, rng);
  double sum = 0.0;
  for (const auto* peer : {&b, &c}) {
    double s = 0.0;
    for (std::size_t i = 0; i < 12; ++i) s += (a.data()[i] - peer->data()[i]) * (a.data()[i] - peer->data()[i]);
    sum += s / 12.0;
  }
  EXPECT_NEAR(loss_cohort(a, {b, c}).item(), sum / 2.0, 1e-14);
  EXPECT_EQ(loss_cohort(a, {a.clone(), a.clone()}).item(), 0.0);
  EXPECT_THROW(loss_cohort(a, {}), ConfigError);
}

TEST(MuRamp, LinearToOne) {
  ScheduleState s{0, 100, 0.2, 1.0, 0.2};
  EXPECT_EQ(mu_ramp(s), 0.0);
  s.step = 10;
  EXPECT_DOUBLE_EQ(mu_ramp(s), 0.5);
  s.step = 20;
  EXPECT_EQ(mu_ramp(s), 1.0);
  s.step = 90;
  EXPECT_EQ(mu_ramp(s), 1.0);
  s.total_steps = 0;
  EXPECT_THROW(mu_ramp(s), ConfigError);
}

TEST(Adam, SingleStepMatchesClosedForm) {
  Tensor w = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  Tensor frozen = Tensor::from_data({2}, {7.0, 8.0}, false);
  RegimeSettings rs;
  Adam opt({w, frozen}, rs);
  EXPECT_EQ(opt.bound_tensors(), 1u);
  EXPECT_EQ(opt.moment_buffers(), 2u);
  sum(multiply(w, Tensor::from_data({3}, {0.3, -4.0, 0.0}))).backward();
  opt.step(0.1);
  // First Adam step moves each coordinate by lr·g/(|g|+eps).
  EXPECT_NEAR(w.at(0), 1.0 - 0.1 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(w.at(1), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_EQ(w.at(2), 0.5);
}

TEST(Adam, DecoupledWeightDecayShrinksWeights) {
  Tensor w = Tensor::from_data({1}, {2.0}, true);
  auto rs = regime_settings(Regime::mbert);
  rs.weight_decay = 0.1;
  Adam opt({w}, rs);
  sum(scale(w, 0.0)).backward();
  opt.step(0.5);
  EXPECT_DOUBLE_EQ(w.at(0), 2.0 - 0.5 * 0.1 * 2.0);
}

TEST(TrainStep, BreakdownComposesToTotal) {
  auto s = make_setup(1, {"0,1", "1,2"}, 0.1);
  CotrainConfig cfg;
  cfg.distill.attn_weight = 0.7;
  cfg.distill.hidden_weight = 1.3;
  cfg.distill.temperature = 2.0;
  Adam opt(trainable_tensors(&s.teacher, s.students, cfg), cfg.regime);
  for (std::size_t step = 0; step < 6; ++step) {
    ScheduleState st{step, 10, 0.2, 0.8, 0.3};
    const auto br = train_step(&s.teacher, s.students, toy_batch(step), st, cfg, opt);
    EXPECT_NEAR(br.total, br.composed(cfg.distill), 1e-12) << step;
    EXPECT_EQ(br.ce_student.size(), 2u);
    EXPECT_DOUBLE_EQ(br.mu, mu_ramp(st));
  }
}

TEST(TrainStep, FrozenTeacherStaysBitIdenticalAndGradFree) {
  auto s = make_setup(2, {"0,2", "1,2"}, 0.1);
  const auto before = snapshot(s.teacher);
  CotrainConfig cfg;
  Adam opt(trainable_tensors(&s.teacher, s.students, cfg), cfg.regime);
  for (std::size_t step = 0; step < 4; ++step) {
    train_step(&s.teacher, s.students, toy_batch(step), {step, 4, 0.2, 1.0, 0.2}, cfg, opt);
    for (const Param* p : s.teacher.params()) EXPECT_FALSE(p->value.has_grad()) << p->name;
  }
  EXPECT_EQ(snapshot(s.teacher), before);
}

TEST(TrainStep, TeacherFinetuneAddsTeacherCe) {
  auto s = make_setup(3, {"0,1"});
  for (Param* p : s.teacher.params()) p->value.set_requires_grad(true);
  const auto before = snapshot(s.teacher);
  CotrainConfig cfg;
  cfg.teacher_finetune = true;
  Adam opt(trainable_tensors(&s.teacher, s.students, cfg), cfg.regime);
  const auto br = train_step(&s.teacher, s.students, toy_batch(1), {3, 10, 0.2, 1.0, 0.2}, cfg, opt);
  EXPECT_GT(br.ce_teacher, 0.0);
  EXPECT_NEAR(br.total, br.composed(cfg.distill), 1e-12);
  EXPECT_NE(snapshot(s.teacher), before);
}

TEST(TrainStep, TwinStudentsWithSharedNoiseHaveZeroDml) {
  auto s = make_setup(4, {"0,1", "0,1"}, 0.2);
  s.students[1].noise_seed = s.students[0].noise_seed;
  CotrainConfig cfg;
  Adam opt(trainable_tensors(&s.teacher, s.students, cfg), cfg.regime);
  const auto br = train_step(&s.teacher, s.students, toy_batch(2), {0, 10, 0.2, 1.0, 0.2}, cfg, opt);
  EXPECT_EQ(br.dml_per_student[0], 0.0);
  EXPECT_EQ(br.dml_per_student[1], 0.0);
}

TEST(TrainStep, DifferentNoiseSeedsDecorrelateTwins) {
  auto s = make_setup(4, {"0,1", "0,1"}, 0.2);
  CotrainConfig cfg;
  Adam opt(trainable_tensors(&s.teacher, s.students, cfg), cfg.regime);
  const auto br = train_step(&s.teacher, s.students, toy_batch(2), {0, 10, 0.2, 1.0, 0.2}, cfg, opt);
  EXPECT_GT(br.dml_per_student[0], 0.0);
}

TEST(TrainStep, ZeroLambdaAndKdIsPlainSupervisedTraining) {
  auto a = make_setup(5, {"0,1", "1,2"});
  auto b = make_setup(5, {"0,1", "1,2"});
  CotrainConfig cfg;
  cfg.distill.attn_weight = cfg.distill.hidden_weight = cfg.distill.logit_weight = 0.0;
  Adam opt_a(trainable_tensors(&a.teacher, a.students, cfg), cfg.regime);
  std::vector<Tensor> b_params;
  for (auto& st : b.students)
    for (Param* p : st.model.params()) b_params.push_back(p->value);
  Adam opt_b(b_params, cfg.regime);
  for (std::size_t step = 0; step < 3; ++step) {
    const auto batch = toy_batch(step);
    const ScheduleState st{step, 10, 0.2, 0.0, 0.2};
    const auto br = train_step(&a.teacher, a.students, batch, st, cfg, opt_a);
    Tensor ce;
    for (auto& stu : b.students) {
      Tensor t = cross_entropy(forward(stu.model, batch.labeled, {true, 0}).logits, *batch.labeled.labels);
      ce = ce.defined() ? add(ce, t) : t;
    }
    EXPECT_EQ(br.total, ce.item());
    ce.backward();
    ScheduleState next = st;
    next.step += 1;
    opt_b.step(lr_schedule(next, cfg.regime));
    opt_b.zero_grad();
  }
  for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(snapshot(a.students[k].model), snapshot(b.students[k].model));
}

TEST(TrainStep, OneStepLowersTrainingCe) {
  auto s = make_setup(6, {"0,1,2"});
  CotrainConfig cfg;
  cfg.distill.attn_weight = cfg.distill.hidden_weight = cfg.distill.logit_weight = 0.0;
  Adam opt(trainable_tensors(&s.teacher, s.students, cfg), cfg.regime);
  const auto batch = toy_batch(9);
  auto ce = [&] { return cross_entropy(forward(s.students[0].model, batch.labeled).logits, *batch.labeled.labels).item(); };
  const double before = ce();
  train_step(nullptr, s.students, batch, {0, 2, 0.0, 0.0, 0.2}, cfg, opt);  // no warmup: full 5e-4 step
  EXPECT_LT(ce(), before);
}

TEST(TrainStep, NanLossAbortsWithStepIndex) {
  auto s = make_setup(7, {"0,1"});
  s.students[0].model.head_bias().value.mutable_data()[0] = std::numeric_limits<double>::infinity();
  CotrainConfig cfg;
  Adam opt(trainable_tensors(&s.teacher, s.students, cfg), cfg.regime);
  try {
    train_step(&s.teacher, s.students, toy_batch(1), {42, 100, 0.2, 1.0, 0.2}, cfg, opt);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos) << e.what();
  }
}

// Gradient partitioning: ablating student A's directed consistency term must
// leave every gradient of student B untouched, and vice versa.
TEST(TrainStep, DmlGradientPartitioning) {
  auto s = make_setup(8, {"0,1", "1,2"});
  const auto batch = toy_batch(3);
  auto grads = [&](bool a_term, bool b_term) {
    for (auto& st : s.students) st.model.zero_grad();
    const auto za = forward(s.students[0].model, batch.unlabeled).logits;
    const auto zb = forward(s.students[1].model, batch.unlabeled).logits;
    Tensor total = add(cross_entropy(forward(s.students[0].model, batch.labeled).logits, *batch.labeled.labels),
                       cross_entropy(forward(s.students[1].model, batch.labeled).logits, *batch.labeled.labels));
    if (a_term) total = add(total, loss_dml(za, zb));
    if (b_term) total = add(total, loss_dml(zb, za));
    total.backward();
    std::vector<std::vector<std::vector<double>>> g(2);
    for (std::size_t k = 0; k < 2; ++k)
      for (const Param* p : s.students[k].model.params()) g[k].emplace_back(p->value.grad().begin(), p->value.grad().end());
    return g;
  };
  const auto full = grads(true, true);
  const auto no_a = grads(false, true);
  const auto no_b = grads(true, false);
  EXPECT_EQ(full[1], no_a[1]);
  EXPECT_EQ(full[0], no_b[0]);
  EXPECT_NE(full[0], no_a[0]);
}

// ---- train_loop and run files ----

class TrainLoopTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("nanonet_loop_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    ToyCorpusOptions o;
    o.n_examples = 400;
    const auto split = make_split(generate_toy_corpus(o), 3, 40, 40, 1);
    write_split(split, dir_ / "data");
    EncoderConfig cfg = testing::tiny_config();
    cfg.n_layers = 3;
    cfg.fill_schedule(8);
    save_checkpoint(Encoder(cfg, 1), dir_ / "teacher.ckpt");
  }
  void TearDown() override { fs::remove_all(dir_); }

  RunConfig config(const std::string& extra) const {
    const std::string text = "labeled = data/labeled.jsonl\nunlabeled = data/unlabeled.jsonl\n"
                             "dev = data/dev.jsonl\ntest = data/test.jsonl\nteacher = teacher.ckpt\n"
                             "students = 0,1;1,2\nsteps = 12\neval_interval = 5\nunlabeled_batch = 6\n" + extra;
    return parse_run_config(text, dir_);
  }

  static std::string read(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path dir_;
};

TEST_F(TrainLoopTest, MetricsAreMonotoneAndParseBack) {
  auto cfg = config("out_dir = run\n");
  const auto result = train_loop(cfg);
  std::ifstream in(dir_ / "run" / "metrics.jsonl");
  std::string line;
  std::vector<std::size_t> steps;
  std::size_t i = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    steps.push_back(j.at("step").get<std::size_t>());
    const auto& rec = result.history.at(i++);
    EXPECT_EQ(j.at("total").get<double>(), rec.losses.total);
    EXPECT_EQ(j.at("dev_acc").get<std::vector<double>>(), rec.dev_accuracy);
    EXPECT_EQ(j.at("dml").get<std::vector<double>>(), rec.losses.dml_per_student);
  }
  EXPECT_EQ(steps, (std::vector<std::size_t>{0, 5, 10, 12}));
  EXPECT_TRUE(fs::exists(dir_ / "run" / "best.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "run" / "summary.csv"));
  EXPECT_EQ(result.total_steps, 12u);
}

TEST_F(TrainLoopTest, SameSeedGivesByteIdenticalMetrics) {
  train_loop(config("out_dir = a\nseed = 3\n"));
  train_loop(config("out_dir = b\nseed = 3\n"));
  train_loop(config("out_dir = c\nseed = 4\n"));
  EXPECT_EQ(read(dir_ / "a" / "metrics.jsonl"), read(dir_ / "b" / "metrics.jsonl"));
  EXPECT_NE(read(dir_ / "a" / "metrics.jsonl"), read(dir_ / "c" / "metrics.jsonl"));
}

TEST_F(TrainLoopTest, ZeroStepsPersistsInitialModel) {
  auto cfg = config("mode = supervised\nepochs = 0\nout_dir = z\n");
  cfg.steps = 0;
  cfg.init_checkpoint = dir_ / "teacher.ckpt";
  train_loop(cfg);
  EXPECT_EQ(read(dir_ / "z" / "best.ckpt"), read(dir_ / "teacher.ckpt"));
}

TEST_F(TrainLoopTest, BestCheckpointReplaysLoggedDevAccuracy) {
  const auto result = train_loop(config("out_dir = r\n"));
  const Encoder best = load_checkpoint(dir_ / "r" / "best.ckpt");
  const Corpus dev = load_corpus(dir_ / "data" / "dev.jsonl", CorpusFormat::jsonl, 4);
  EXPECT_EQ(evaluate(best, dev, 64), result.best_dev);
  for (const auto& rec : result.history)
    if (rec.step == result.best_step) EXPECT_EQ(rec.dev_accuracy.at(result.best_student), result.best_dev);
}

TEST_F(TrainLoopTest, EmptyDatasetIsAConfigError) {
  std::ofstream(dir_ / "empty.jsonl").close();
  auto cfg = config("out_dir = e\n");
  cfg.labeled = dir_ / "empty.jsonl";
  EXPECT_THROW(train_loop(cfg), ConfigError);
}

TEST_F(TrainLoopTest, BitfitLeavesStudentWeightsUntouched) {
  const auto result = train_loop(config("out_dir = bf\nbitfit = true\nsteps = 8\n"));
  (void)result;
  const Encoder teacher = load_checkpoint(dir_ / "teacher.ckpt");
  const Encoder best = load_checkpoint(dir_ / "bf" / "best.ckpt");
  // Whichever student won, its weight tensors are copies of teacher layers.
  const auto sel = result.best_student == 0 ? std::vector<std::size_t>{0, 1} : std::vector<std::size_t>{1, 2};
  for (std::size_t l = 0; l < 2; ++l)
    EXPECT_EQ(testing::checksum(best.layers()[l].w_q.value), testing::checksum(teacher.layers()[sel[l]].w_q.value));
  EXPECT_EQ(testing::checksum(best.embedding().value), testing::checksum(teacher.embedding().value));
}

TEST(RunConfigParse, KeysPathsAndErrors) {
  const auto c = parse_run_config(
      "# comment\nmode = supervised\nlabeled = l.jsonl  # trailing\ntest = /abs/t.jsonl\nregime = mbert\n"
      "students = BERT-A4; BERT-B4\noverrides = layers.*.attn.w_q:1, head.*:0\nlambda = 0.5\n",
      "/base");
  EXPECT_EQ(c.mode, RunMode::supervised);
  EXPECT_EQ(c.labeled, fs::path("/base/l.jsonl"));
  EXPECT_EQ(c.test, fs::path("/abs/t.jsonl"));
  EXPECT_EQ(c.cotrain.regime.peak_lr, 1e-3);
  EXPECT_EQ(c.students, (std::vector<std::string>{"BERT-A4", "BERT-B4"}));
  ASSERT_EQ(c.policy.explicit_overrides.size(), 2u);
  EXPECT_EQ(c.policy.explicit_overrides[1], (std::pair<std::string, bool>{"head.*", false}));
  EXPECT_EQ(c.lambda, 0.5);
  EXPECT_EQ(parse_run_config("lr = 0.01\n").cotrain.regime.peak_lr, 0.01);
  EXPECT_THROW(parse_run_config("colour = blue\n"), ConfigError);
  EXPECT_THROW(parse_run_config("steps = -3\n"), ConfigError);
  EXPECT_THROW(parse_run_config("steps\n"), ConfigError);
  EXPECT_THROW(parse_run_config("regime = adam\n"), ConfigError);
  EXPECT_THROW(parse_run_config("eval_interval = 0\n"), ConfigError);
}

}  // namespace
}  // namespace nanonet
