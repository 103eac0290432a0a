#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "polyspeech/error.hpp"
#include "polyspeech/experiment.hpp"

using namespace polyspeech;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsageExit = 1, kContractExit = 2, kNumericExit = 3 };

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON)");
  cmd->add_option("--set", c.overrides, "override a config key, key=value (repeatable)");
  cmd->add_option("-o,--out-dir", c.out_dir, "output directory");
  cmd->add_option("--seed", c.seed, "random seed (falls back to POLYSPEECH_SEED, then the config)");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  if (c.seed) {
    cfg.seed = *c.seed;
  } else if (const char* env = std::getenv("POLYSPEECH_SEED"); env && *env) {
    try {
      cfg.seed = std::stoull(env);
    } catch (const std::exception&) {
      fail(ErrorKind::kUsage, std::string("POLYSPEECH_SEED is not an integer: ") + env);
    }
  }
  validate(cfg);
  return cfg;
}

void print_stage(const StageResult& r) {
  std::cout << r.stage << ": " << r.updates << " updates, best " << r.best_checkpoint.string()
            << " (validation loss " << format_loss(r.best_validation_loss) << ")\n";
}

std::string read_file_or_literal(const std::string& s) {
  if (fs::exists(s)) {
    std::ifstream in(s);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"polyspeech: multitask speech/text language modelling on a synthetic toy world"};
  app.require_subcommand(1);

  Common gen, sset, lm, dec, inf, ev, abl;
  bool force = false, resume_sset = false, resume_lm = false, resume_dec = false;

  auto* gen_cmd = app.add_subcommand("gen-data", "sample the toy corpus into manifests/");
  add_common(gen_cmd, gen);
  gen_cmd->add_flag("--force", force, "overwrite an existing corpus");

  auto* sset_cmd = app.add_subcommand("train-sset", "train the speech tokenizer");
  add_common(sset_cmd, sset);
  sset_cmd->add_flag("--resume", resume_sset, "continue from the latest checkpoint");

  auto* lm_cmd = app.add_subcommand("train-lm", "train the multitask LM");
  add_common(lm_cmd, lm);
  lm_cmd->add_flag("--resume", resume_lm, "continue from the latest checkpoint");

  auto* dec_cmd = app.add_subcommand("train-decoder", "train the token-to-frame decoder");
  add_common(dec_cmd, dec);
  dec_cmd->add_flag("--resume", resume_dec, "continue from the latest checkpoint");

  std::string infer_task = "ASR", infer_input, infer_ckpt, prompt, infer_output;
  auto* inf_cmd = app.add_subcommand("infer", "decode a manifest with a trained LM");
  add_common(inf_cmd, inf);
  inf_cmd->add_option("-t,--task", infer_task, "ASR, TTS, LID or GID");
  inf_cmd->add_option("-i,--input", infer_input, "input manifest (default: manifests/test.jsonl)");
  inf_cmd->add_option("--checkpoint", infer_ckpt, "LM checkpoint (default: best LM checkpoint)");
  inf_cmd->add_option("--prompt-utterance", prompt, "TTS speech prompt: an utterance id from the input manifest");
  inf_cmd->add_option("--output", infer_output, "outputs manifest");

  std::string eval_task = "ASR", eval_outputs, eval_refs, eval_report;
  auto* ev_cmd = app.add_subcommand("eval", "score an outputs manifest");
  add_common(ev_cmd, ev);
  ev_cmd->add_option("-t,--task", eval_task, "ASR, TTS, LID or GID");
  ev_cmd->add_option("--outputs", eval_outputs, "outputs manifest written by infer")->required();
  ev_cmd->add_option("--references", eval_refs, "reference manifest (default: manifests/test.jsonl)");
  ev_cmd->add_option("--report", eval_report, "report CSV (default: reports/<task>.csv)");

  std::string matrix;
  auto* abl_cmd = app.add_subcommand("ablate", "run a matrix of experiments and tabulate them");
  add_common(abl_cmd, abl);
  abl_cmd->add_option("-m,--matrix", matrix, "matrix JSON (file or inline)")->required();

  std::uint64_t grad_seed = 1;
  double grad_tol = 1e-4;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every training loss");
  grad_cmd->add_option("--seed", grad_seed, "seed for the toy shapes");
  grad_cmd->add_option("--tolerance", grad_tol, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsageExit;
  }

  try {
    if (*gen_cmd) {
      const auto cfg = resolve(gen);
      const auto r = gen_data(cfg, force);
      std::cout << r.train.string() << '\n' << r.val.string() << '\n' << r.test.string() << '\n';
    } else if (*sset_cmd) {
      print_stage(train_sset(resolve(sset), resume_sset));
    } else if (*lm_cmd) {
      print_stage(train_lm(resolve(lm), resume_lm));
    } else if (*dec_cmd) {
      print_stage(train_decoder(resolve(dec), resume_dec));
    } else if (*inf_cmd) {
      const auto cfg = resolve(inf);
      InferOptions opts;
      opts.task = parse_task(infer_task);
      opts.input_manifest = infer_input.empty() ? Layout(cfg).manifest("test") : fs::path(infer_input);
      opts.checkpoint = infer_ckpt;
      opts.prompt_utterance = prompt;
      opts.output = infer_output;
      std::cout << infer(cfg, opts).string() << '\n';
    } else if (*ev_cmd) {
      const auto cfg = resolve(ev);
      const auto refs = eval_refs.empty() ? Layout(cfg).manifest("test") : fs::path(eval_refs);
      const auto reports = evaluate(cfg, parse_task(eval_task), eval_outputs, refs, eval_report);
      std::cout << "task,metric,value,n\n";
      for (const auto& r : reports) std::cout << format_report_row(r) << '\n';
    } else if (*abl_cmd) {
      const auto cfg = resolve(abl);
      const auto rows = ablate(cfg, parse_ablation_matrix(read_file_or_literal(matrix)));
      std::ifstream in(Layout(cfg).reports() / "ablation.csv");
      std::cout << in.rdbuf();
      for (const auto& r : rows) {
        if (r.status != "ok") return kContractExit;
      }
    } else if (*grad_cmd) {
      bool ok = true;
      for (const auto& r : gradcheck_all(grad_seed)) {
        const bool pass = r.max_relative_error < grad_tol;
        ok &= pass;
        std::cout << r.name << ' ' << r.max_relative_error << (pass ? " ok" : " FAIL") << '\n';
      }
      return ok ? kOk : kNumericExit;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    switch (e.kind()) {
      case ErrorKind::kUsage: return kUsageExit;
      case ErrorKind::kNumeric: return kNumericExit;
      default: return kContractExit;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kContractExit;
  }
  return kOk;
}
