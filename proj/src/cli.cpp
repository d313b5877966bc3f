#include "nanonet/cli.hpp"

#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "nanonet/checkpoint.hpp"
#include "nanonet/error.hpp"
#include "nanonet/harness.hpp"
#include "nanonet/peft.hpp"
#include "nanonet/train_loop.hpp"

namespace nanonet {

namespace {

struct TrainArgs {
  std::string config;
  std::string out_dir;
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::size_t max_len = 64;
};

struct ReportArgs {
  std::string checkpoint;
  std::string config;
  bool bitfit = false;
  bool freeze_embeddings = false;
  bool no_head = false;
  std::vector<std::string> overrides;
  std::string csv;
};

struct CkaArgs {
  std::string teacher;
  std::string student;
  std::string probe;
  std::size_t samples = 256;
  std::size_t max_len = 64;
  std::string out;
};

struct SplitArgs {
  std::string input;
  std::string out_dir;
  std::size_t per_class = 10;
  std::size_t dev = 200;
  std::size_t test = 0;
  std::uint64_t seed = 1;
};

int do_train(const TrainArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
  const TrainResult r = train_loop(cfg);
  std::cout << std::setprecision(17) << "steps " << r.total_steps << "\nbest_student " << r.best_student
            << "\nbest_step " << r.best_step << "\nbest_dev " << r.best_dev << "\ntest " << r.test_accuracy
            << "\nmetrics " << (cfg.out_dir / "metrics.jsonl").string() << '\n';
  return 0;
}

int do_eval(const EvalArgs& a) {
  const Encoder model = load_checkpoint(a.checkpoint);
  const Corpus corpus = load_corpus(a.data, format_for(a.data), model.config().n_classes);
  std::cout << std::setprecision(17) << evaluate(model, corpus, a.max_len) << '\n';
  return 0;
}

int do_report(const ReportArgs& a) {
  if (a.checkpoint.empty() == a.config.empty()) throw ConfigError("param-report needs exactly one of --checkpoint, --config");
  Encoder model = [&] {
    if (!a.checkpoint.empty()) return load_checkpoint(a.checkpoint);
    return Encoder(load_run_config(a.config).model, 0);
  }();
  ParamPolicy policy{a.bitfit, a.freeze_embeddings, !a.no_head, {}};
  for (const auto& o : a.overrides) {
    const auto colon = o.rfind(':');
    if (colon == std::string::npos || (o.substr(colon + 1) != "0" && o.substr(colon + 1) != "1")) {
      throw ConfigError("override '" + o + "' should look like pattern:0 or pattern:1");
    }
    policy.explicit_overrides.emplace_back(o.substr(0, colon), o.substr(colon + 1) == "1");
  }
  apply_policy(model, policy);
  const ParamReport report = count_params(model);
  std::cout << format_param_report(report);
  if (!a.csv.empty()) write_param_report_csv(report, a.csv);
  return 0;
}

int do_cka(const CkaArgs& a) {
  const Encoder teacher = load_checkpoint(a.teacher);
  const Encoder student = load_checkpoint(a.student);
  const Corpus probe = load_corpus(a.probe, format_for(a.probe));
  const CKAMatrix m = cka_heatmap(teacher, student, probe, a.samples, a.max_len);
  write_cka_csv(m, a.out);
  std::cout << "wrote " << m.values.size() << "x" << (m.values.empty() ? 0 : m.values[0].size()) << " CKA matrix to "
            << a.out << '\n';
  return 0;
}

int do_split(const SplitArgs& a) {
  const Corpus corpus = load_corpus(a.input, format_for(a.input));
  const SemiSplit s = make_split(corpus, a.per_class, a.dev, a.test, a.seed);
  write_split(s, a.out_dir);
  std::cout << "labeled " << s.labeled.size() << " unlabeled " << s.unlabeled.size() << " dev " << s.dev.size()
            << " test " << s.test.size() << '\n';
  return 0;
}

int do_gen_toy(const ToyCorpusOptions& o, const std::string& out, bool unlabeled) {
  Corpus c = generate_toy_corpus(o);
  if (unlabeled)
    for (auto& ex : c.examples) ex.label.reset();
  write_corpus(c, out, format_for(out));
  std::cout << "wrote " << c.size() << " examples to " << out << '\n';
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"nanonet: semi-supervised distillation, mutual learning and BitFit on a small encoder"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run a training job described by a run-config file");
  train_cmd->add_option("--config", train.config, "Run-config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out-dir", train.out_dir, "Override out_dir from the config");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy of a checkpoint on a labeled corpus");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval.data, "JSONL or CSV corpus")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--max-len", eval.max_len);

  ReportArgs report;
  auto* report_cmd = app.add_subcommand("param-report", "Total and trainable parameter counts by role");
  report_cmd->add_option("--checkpoint", report.checkpoint)->check(CLI::ExistingFile);
  report_cmd->add_option("--config", report.config, "Run-config file; its model section is used")->check(CLI::ExistingFile);
  report_cmd->add_flag("--bitfit", report.bitfit);
  report_cmd->add_flag("--freeze-embeddings", report.freeze_embeddings);
  report_cmd->add_flag("--no-head", report.no_head, "Freeze the classification head");
  report_cmd->add_option("--override", report.overrides, "pattern:0|1, repeatable");
  report_cmd->add_option("--csv", report.csv, "Also write the report as CSV");

  CkaArgs cka;
  auto* cka_cmd = app.add_subcommand("cka", "Teacher-vs-student linear CKA heatmap over CLS states");
  cka_cmd->add_option("--teacher", cka.teacher)->required()->check(CLI::ExistingFile);
  cka_cmd->add_option("--student", cka.student)->required()->check(CLI::ExistingFile);
  cka_cmd->add_option("--probe", cka.probe)->required()->check(CLI::ExistingFile);
  cka_cmd->add_option("--samples", cka.samples);
  cka_cmd->add_option("--max-len", cka.max_len);
  cka_cmd->add_option("--out", cka.out)->required();

  SplitArgs split;
  auto* split_cmd = app.add_subcommand("split", "Materialize a labeled/unlabeled/dev/test split");
  split_cmd->add_option("--input", split.input)->required()->check(CLI::ExistingFile);
  split_cmd->add_option("--out-dir", split.out_dir)->required();
  split_cmd->add_option("--per-class", split.per_class);
  split_cmd->add_option("--dev", split.dev);
  split_cmd->add_option("--test", split.test);
  split_cmd->add_option("--seed", split.seed);

  ToyCorpusOptions toy;
  std::string toy_out;
  bool toy_unlabeled = false;
  auto* toy_cmd = app.add_subcommand("gen-toy", "Write a synthetic keyword-topic corpus");
  toy_cmd->add_option("--out", toy_out)->required();
  toy_cmd->add_option("--classes", toy.n_classes)->check(CLI::Range(2, 64));
  toy_cmd->add_option("--examples", toy.n_examples);
  toy_cmd->add_option("--keywords-per-class", toy.keywords_per_class);
  toy_cmd->add_option("--keywords-per-example", toy.keywords_per_example);
  toy_cmd->add_option("--noise-words", toy.noise_words);
  toy_cmd->add_option("--mixing", toy.mixing)->check(CLI::Range(0.0, 1.0));
  toy_cmd->add_option("--seed", toy.seed);
  toy_cmd->add_option("--lexicon-seed", toy.lexicon_seed);
  toy_cmd->add_flag("--unlabeled", toy_unlabeled, "Drop labels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return do_train(train);
    if (*eval_cmd) return do_eval(eval);
    if (*report_cmd) return do_report(report);
    if (*cka_cmd) return do_cka(cka);
    if (*split_cmd) return do_split(split);
    if (*toy_cmd) return do_gen_toy(toy, toy_out, toy_unlabeled);
  } catch (const std::exception& e) {
    std::cerr << "nanonet: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace nanonet
