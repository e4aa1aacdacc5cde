#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include "corefkit/config.hpp"
#include "corefkit/corpus.hpp"

using namespace corefkit;

namespace {

namespace fs = std::filesystem;

const std::string cli = COREFKIT_CLI_PATH;

int run(const std::string& args) {
    const std::string command = cli + " " + args + " >/dev/null 2>&1";
    const int status = std::system(command.c_str());
    REQUIRE(status != -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST_CASE("config key table parses and rejects", "[config]") {
    RunConfig cfg;
    apply_config_key(cfg, "steps", "123");
    REQUIRE(cfg.steps == 123);
    apply_config_key(cfg, "mode", "wwm");
    REQUIRE(cfg.masking.mode == MaskMode::wwm);
    apply_config_key(cfg, "peak_lr", "0.01");
    REQUIRE(cfg.peak_lr == 0.01);
    apply_config_key(cfg, "pretagged", "false");
    REQUIRE_FALSE(cfg.pretagged);

    REQUIRE_THROWS_WITH(apply_config_key(cfg, "nonsense", "1"),
                        Catch::Matchers::ContainsSubstring("valid keys"));
    REQUIRE_THROWS_AS(apply_config_key(cfg, "steps", "abc"), UsageError);
}

TEST_CASE("config file parsing with comments", "[config]") {
    TempDir dir("corefkit_cfgfile");
    const auto path = dir.path / "run.cfg";
    {
        std::ofstream f(path);
        f << "# a comment\n";
        f << "steps = 77\n";
        f << "hidden=24   # trailing comment\n";
        f << "\n";
        f << "mode=mrm\n";
    }
    RunConfig cfg;
    apply_config_file(cfg, path);
    REQUIRE(cfg.steps == 77);
    REQUIRE(cfg.hidden == 24);
    REQUIRE(cfg.masking.mode == MaskMode::mrm);

    {
        std::ofstream f(path, std::ios::trunc);
        f << "not a key value line\n";
    }
    REQUIRE_THROWS_AS(apply_config_file(cfg, path), UsageError);
}

TEST_CASE("cli exit codes follow the contract", "[cli]") {
    // Usage errors -> 1.
    REQUIRE(run("") == 1);
    REQUIRE(run("no-such-subcommand") == 1);
    REQUIRE(run("train --bogus-flag 1") == 1);
    // Help -> 0.
    REQUIRE(run("--help") == 0);
    // Data errors -> 2; the message names the missing path (checked below).
    REQUIRE(run("train --data /nonexistent/corefkit_dir --vocab /nonexistent/v.txt "
                "--checkpoint /tmp/c.ckpt") == 2);
}

TEST_CASE("train names the missing manifest path", "[cli]") {
    TempDir dir("corefkit_cli_missing");
    const std::string err_file = (dir.path / "err.txt").string();
    const std::string command = cli + " train --data /nonexistent/corefkit_dir --vocab v "
                                      "--checkpoint c 2>" + err_file + " >/dev/null";
    const int status = std::system(command.c_str());
    REQUIRE(WIFEXITED(status));
    REQUIRE(WEXITSTATUS(status) == 2);
    const std::string err = file_bytes(err_file);
    REQUIRE(err.find("/nonexistent/corefkit_dir") != std::string::npos);
}

TEST_CASE("cli pipeline end to end with deterministic bytes", "[cli][slow]") {
    TempDir dir("corefkit_cli_e2e");
    const std::string out = dir.path.string();

    REQUIRE(run("gen-corpus --out " + out + " --stories 120 --probe-items 10 --seed 5 "
                "--stories-per-doc 6") == 0);
    REQUIRE(fs::exists(dir.path / "corpus.txt"));
    REQUIRE(fs::exists(dir.path / "probe_recovery.tsv"));

    REQUIRE(run("build-vocab --corpus " + out + "/corpus.txt --size 1024 --out " + out +
                "/vocab.txt") == 0);
    REQUIRE(fs::exists(dir.path / "vocab.txt"));

    REQUIRE(run("preprocess --corpus " + out + "/corpus.txt --vocab " + out +
                "/vocab.txt --out " + out + "/shards_a --mode full --seed 7") == 0);
    REQUIRE(run("preprocess --corpus " + out + "/corpus.txt --vocab " + out +
                "/vocab.txt --out " + out + "/shards_b --mode full --seed 7") == 0);
    const auto manifest = load_manifest(dir.path / "shards_a");
    REQUIRE(manifest.total_instances() > 0);
    for (const auto& entry : manifest.shards) {
        REQUIRE(file_bytes(dir.path / "shards_a" / entry.path) ==
                file_bytes(dir.path / "shards_b" / entry.path));
    }

    REQUIRE(run("stats --data " + out + "/shards_a") == 0);
    REQUIRE(run("inspect --data " + out + "/shards_a --vocab " + out +
                "/vocab.txt --limit 2") == 0);

    REQUIRE(run("train --data " + out + "/shards_a --vocab " + out + "/vocab.txt "
                "--checkpoint " + out + "/model.ckpt --metrics " + out +
                "/metrics.csv --steps 4 --batch-size 4 --seed 7") == 0);
    REQUIRE(fs::exists(dir.path / "model.ckpt"));

    REQUIRE(run("probe --checkpoint " + out + "/model.ckpt --vocab " + out +
                "/vocab.txt --probe " + out + "/probe_recovery.tsv --probe-mode recovery") == 0);
}

TEST_CASE("flag beats environment beats config file for the seed", "[cli][slow]") {
    TempDir dir("corefkit_cli_precedence");
    const std::string out = dir.path.string();
    REQUIRE(run("gen-corpus --out " + out + " --stories 40 --probe-items 4 --seed 3 "
                "--stories-per-doc 4") == 0);
    REQUIRE(run("build-vocab --corpus " + out + "/corpus.txt --size 1024 --out " + out +
                "/vocab.txt") == 0);
    {
        std::ofstream f(dir.path / "run.cfg");
        f << "corpus=" << out << "/corpus.txt\n";
        f << "vocab=" << out << "/vocab.txt\n";
        f << "seed=1\n";
    }
    const std::string cfg_flag = " --config " + out + "/run.cfg";

    // Reference outputs for seeds 1 and 2.
    REQUIRE(run("preprocess" + cfg_flag + " --out " + out + "/seed1") == 0);
    REQUIRE(run("preprocess" + cfg_flag + " --seed 2 --out " + out + "/seed2") == 0);
    const std::string shard1 = file_bytes(dir.path / "seed1" / "shard-00000.cpk");
    const std::string shard2 = file_bytes(dir.path / "seed2" / "shard-00000.cpk");
    REQUIRE(shard1 != shard2);

    // Environment overrides the config file.
    {
        const std::string command = "COREFKIT_SEED=2 " + cli + " preprocess" + cfg_flag +
                                    " --out " + out + "/env2 >/dev/null 2>&1";
        REQUIRE(WEXITSTATUS(std::system(command.c_str())) == 0);
    }
    REQUIRE(file_bytes(dir.path / "env2" / "shard-00000.cpk") == shard2);

    // An explicit flag still beats the environment.
    {
        const std::string command = "COREFKIT_SEED=2 " + cli + " preprocess" + cfg_flag +
                                    " --seed 1 --out " + out + "/flag1 >/dev/null 2>&1";
        REQUIRE(WEXITSTATUS(std::system(command.c_str())) == 0);
    }
    REQUIRE(file_bytes(dir.path / "flag1" / "shard-00000.cpk") == shard1);

    // Unknown config key is a usage error.
    {
        std::ofstream f(dir.path / "bad.cfg");
        f << "definitely_not_a_key=1\n";
    }
    REQUIRE(run("preprocess --config " + out + "/bad.cfg --out " + out + "/bad") == 1);
}
