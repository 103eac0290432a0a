#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "polyspeech/error.hpp"
#include "polyspeech/experiment.hpp"

using namespace polyspeech;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "polyspeech_experiment_test" / name;
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig cfg;
  cfg.out_dir = out.string();
  for (const char* o : {"corpus.train_size=60", "corpus.val_size=10", "corpus.test_size=10", "sset.codebook_size=8",
                        "sset.num_rvq_layers=1", "sset.updates=4", "sset.init_sample=20", "sset.validate_every=2",
                        "lm.num_layers=1", "lm.d_model=16", "lm.d_ffn=32", "lm.num_heads=2", "train.max_updates=4",
                        "train.validate_every=2", "train.batch_size=2", "train.accumulation_steps=2",
                        "train.warmup_steps=2", "decoder.updates=4", "decoder.validate_every=2",
                        "text_lm.updates=2", "text_lm.corpus_size=20", "decode.max_len=8"}) {
    apply_override(cfg, o);
  }
  return cfg;
}

template <class Fn>
ErrorKind kind_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::kInvalidArgument;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) return false;
    ++files;
  }
  return files > 0;
}

}  // namespace

TEST_CASE("configs round-trip through json and accept dotted overrides") {
  ExperimentConfig cfg;
  apply_override(cfg, "train.max_updates=17");
  apply_override(cfg, "tasks=ASR,TTS");
  apply_override(cfg, "source=SSET_TOKENS");
  apply_override(cfg, "out_dir=somewhere");
  CHECK(cfg.train.max_updates == 17);
  CHECK(cfg.tasks == std::vector<TaskKind>{TaskKind::kAsr, TaskKind::kTts});
  CHECK(cfg.source == SourceRepresentation::kSsetTokens);
  CHECK(cfg.out_dir == "somewhere");
  CHECK(config_to_json(config_from_json(config_to_json(cfg))) == config_to_json(cfg));

  CHECK(kind_of([&] { apply_override(cfg, "train.max_update=3"); }) == ErrorKind::kUsage);
  CHECK(kind_of([&] { apply_override(cfg, "no_equals"); }) == ErrorKind::kUsage);
  CHECK(kind_of([&] { config_from_json(R"({"lm": {"depth": 3}})"); }) == ErrorKind::kUsage);
  CHECK(kind_of([&] { config_from_json("{"); }) == ErrorKind::kUsage);
  CHECK(kind_of([&] { apply_override(cfg, "tasks=ASR,ASR"); validate(cfg); }) == ErrorKind::kUsage);
}

TEST_CASE("gen-data is deterministic and refuses to overwrite") {
  const ExperimentConfig a = tiny(scratch("gen_a"));
  const ExperimentConfig b = tiny(scratch("gen_b"));
  gen_data(a);
  gen_data(b);
  CHECK(same_tree(Layout(a).manifests(), Layout(b).manifests()));
  CHECK(line_count(Layout(a).manifest("train")) == 60);
  CHECK(kind_of([&] { gen_data(a); }) == ErrorKind::kUsage);
  gen_data(a, true);
  CHECK(same_tree(Layout(a).manifests(), Layout(b).manifests()));

  ExperimentConfig c = tiny(scratch("gen_c"));
  c.seed = 2;
  gen_data(c);
  CHECK(slurp(Layout(a).manifest("train")) != slurp(Layout(c).manifest("train")));
}

TEST_CASE("missing artifacts are dependency errors") {
  ExperimentConfig cfg = tiny(scratch("deps"));
  CHECK(kind_of([&] { train_lm(cfg); }) == ErrorKind::kDependency);
  gen_data(cfg);
  cfg.tasks = {TaskKind::kAsr, TaskKind::kTts};
  CHECK(kind_of([&] { train_lm(cfg); }) == ErrorKind::kDependency);
  CHECK(kind_of([&] { train_decoder(cfg); }) == ErrorKind::kDependency);
  InferOptions opts;
  opts.input_manifest = Layout(cfg).manifest("test");
  CHECK(kind_of([&] { infer(cfg, opts); }) == ErrorKind::kDependency);
  opts.task = TaskKind::kTts;
  CHECK(kind_of([&] { infer(cfg, opts); }) == ErrorKind::kUsage);
}

TEST_CASE("a small pipeline trains, infers and evaluates consistently") {
  ExperimentConfig cfg = tiny(scratch("pipeline"));
  cfg.tasks = {TaskKind::kAsr, TaskKind::kLid, TaskKind::kTts};
  const Layout layout(cfg);
  gen_data(cfg);
  train_sset(cfg);
  const StageResult lm = train_lm(cfg);
  train_decoder(cfg);
  CHECK(lm.updates == 4);
  CHECK(line_count(layout.log("lm")) == 1 + 4);
  CHECK(fs::exists(layout.best_checkpoint("lm")));

  InferOptions opts;
  opts.input_manifest = layout.manifest("test");
  const fs::path outputs = infer(cfg, opts);
  const auto reports = evaluate(cfg, TaskKind::kAsr, outputs, opts.input_manifest);
  REQUIRE(reports.size() == 1);

  const Corpus corpus = load_corpus(cfg);
  const MultiModalLm model = load_lm(layout.best_checkpoint("lm"));
  std::vector<std::vector<int>> hyps, refs;
  for (const RawExample& ex : raw_examples(corpus.test, nullptr)) {
    hyps.push_back(recognize(model, ex, TaskKind::kAsr, cfg));
    refs.push_back(ex.text);
  }
  CHECK(reports[0].metric == "cer");
  CHECK(reports[0].n == corpus.test.size());
  CHECK(reports[0].value == doctest::Approx(corpus_cer(hyps, refs).value()).epsilon(1e-12));

  opts.task = TaskKind::kLid;
  const auto lid = evaluate(cfg, TaskKind::kLid, infer(cfg, opts), opts.input_manifest);
  CHECK(lid.size() == 2);

  opts.task = TaskKind::kTts;
  opts.prompt_utterance = corpus.test.front().id;
  const fs::path tts = infer(cfg, opts);
  CHECK(read_infer_outputs(tts).size() == corpus.test.size() - 1);
  CHECK_FALSE(evaluate(cfg, TaskKind::kTts, tts, opts.input_manifest).empty());

  const fs::path empty = layout.root / "empty.jsonl";
  std::ofstream(empty).close();
  CHECK(kind_of([&] { evaluate(cfg, TaskKind::kAsr, empty, opts.input_manifest); }) == ErrorKind::kDependency);
}

TEST_CASE("a resumed run reproduces the uninterrupted run") {
  ExperimentConfig full = tiny(scratch("resume_full"));
  ExperimentConfig part = tiny(scratch("resume_part"));
  gen_data(full);
  part.manifests_dir = Layout(full).manifests().string();
  train_lm(full);

  part.train.max_updates = 2;
  train_lm(part);
  part.train.max_updates = 4;
  const StageResult resumed = train_lm(part, true);
  CHECK(resumed.updates == 4);
  const Layout a(full), b(part);
  CHECK(slurp(a.best_checkpoint("lm")) == slurp(b.best_checkpoint("lm")));
  CHECK(slurp(a.stage_dir("lm") / "update-000004.pspk") == slurp(b.stage_dir("lm") / "update-000004.pspk"));
  CHECK(slurp(a.log("lm")) == slurp(b.log("lm")));
}

TEST_CASE("an ablation over a 2x1x2 matrix yields four rows") {
  ExperimentConfig cfg = tiny(scratch("ablate"));
  gen_data(cfg);
  const AblationMatrix m =
      parse_ablation_matrix(R"({"task_sets": [["ASR"], ["ASR", "LID"]], "sources": ["CONTINUOUS"], "text_lm_init": [false, true]})");
  const auto rows = ablate(cfg, m);
  REQUIRE(rows.size() == 4);
  for (const auto& r : rows) {
    CHECK(r.status == "ok");
    CHECK(r.asr_cer.has_value());
    CHECK(r.lid_accuracy.has_value() == (r.tasks.size() == 2));
  }
  CHECK(line_count(Layout(cfg).reports() / "ablation.csv") == 1 + 4);
  CHECK(kind_of([] { parse_ablation_matrix(R"({"task_sets": [], "sources": ["CONTINUOUS"], "text_lm_init": [false]})"); }) ==
        ErrorKind::kUsage);
}
