#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "polyspeech_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string("\"") + POLYSPEECH_CLI + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::string tiny_flags(const std::string& name) {
  std::string s = "-o \"" + (kRoot / name).string() + "\"";
  for (const char* o : {"corpus.train_size=40", "corpus.val_size=6", "corpus.test_size=6", "lm.num_layers=1",
                        "lm.d_model=16", "lm.d_ffn=32", "lm.num_heads=2", "train.max_updates=2",
                        "train.validate_every=1", "train.batch_size=2", "train.accumulation_steps=1"}) {
    s += std::string(" --set ") + o;
  }
  return s;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run("--help") == 0);
  CHECK(run("") == 1);
  CHECK(run("no-such-command") == 1);
  CHECK(run("gen-data --bogus") == 1);
  CHECK(run("gen-data " + tiny_flags("usage") + " --set train.nonexistent=3") == 1);
  CHECK(run("gen-data " + tiny_flags("usage") + " --set tasks=ASR,ASR") == 1);
  CHECK(run("gen-data " + tiny_flags("usage") + " -c /nonexistent/config.json") == 1);
}

TEST_CASE("a small run exits cleanly and dependency errors exit with 2") {
  fs::remove_all(kRoot);
  const std::string flags = tiny_flags("run");
  CHECK(run("train-lm " + flags) == 2);
  CHECK(run("gen-data " + flags) == 0);
  CHECK(run("gen-data " + flags) == 1);
  CHECK(run("gen-data --force " + flags) == 0);
  CHECK(run("train-lm " + flags + " --set tasks=ASR,TTS") == 2);
  CHECK(run("train-lm " + flags) == 0);
  CHECK(run("infer " + flags) == 0);
  CHECK(run("infer -t TTS " + flags) == 1);
  const std::string outputs = (kRoot / "run" / "manifests" / "outputs-ASR.jsonl").string();
  CHECK(fs::exists(outputs));
  CHECK(run("eval " + flags + " --outputs \"" + outputs + "\"") == 0);
  CHECK(run("eval " + flags + " --outputs /nonexistent.jsonl") == 2);
}

TEST_CASE("gradcheck passes") { CHECK(run("gradcheck") == 0); }
