#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pmdet/checkpoint.hpp"
#include "pmdet/common.hpp"
#include "pmdet/config.hpp"
#include "pmdet/rng.hpp"

using namespace pmdet;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.stage = "adapt";
  ck.epoch = 3;
  ck.step = 375;
  ck.config_text = Config::defaults().to_text();
  ck.rng_states["data"] = RngStream(5).state();
  ck.meta["adam_t"] = "375";
  RngStream rng(9);
  for (const char* name :
       {"detector/a", "pdm/source/token/value", "pdm/source/token/weight",
        "teacher/detector/a", "opt/m/detector/a"}) {
    Tensor t({7, 5});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1, 1);
    ck.arrays[name] = std::move(t);
  }
  return ck;
}

}  // namespace

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
  const fs::path dir = fs::temp_directory_path() / "pmdet_ckpt_test";
  fs::create_directories(dir);
  const fs::path a = dir / "a.ckpt", b = dir / "b.ckpt";

  Checkpoint ck = sample_checkpoint();
  save_checkpoint(ck, a.string());
  Checkpoint loaded = load_checkpoint(a.string());
  save_checkpoint(loaded, b.string());

  CHECK(slurp(a) == slurp(b));
  CHECK(loaded.stage == "adapt");
  CHECK(loaded.epoch == 3);
  CHECK(loaded.step == 375);
  CHECK(loaded.config_text == ck.config_text);
  CHECK(loaded.rng_states.at("data") == ck.rng_states.at("data"));
  for (const auto& [name, t] : ck.arrays) {
    const Tensor& lt = loaded.arrays.at(name);
    REQUIRE(lt.same_shape(t));
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(lt[i] == t[i]);
  }
  fs::remove_all(dir);
}

TEST_CASE("version and magic mismatches are rejected") {
  const fs::path dir = fs::temp_directory_path() / "pmdet_ckpt_bad";
  fs::create_directories(dir);
  const fs::path p = dir / "bad.ckpt";

  {
    std::ofstream out(p, std::ios::binary);
    out << "NOTAMAGC";
    out << std::string(64, '\0');
  }
  CHECK_THROWS_AS(load_checkpoint(p.string()), ParseError);

  // valid magic, wrong version
  {
    std::ofstream out(p, std::ios::binary);
    out.write("PMDETCKP", 8);
    const std::uint32_t version = 999;
    out.write(reinterpret_cast<const char*>(&version), 4);
    const std::uint64_t len = 0;
    out.write(reinterpret_cast<const char*>(&len), 8);
  }
  CHECK_THROWS_AS(load_checkpoint(p.string()), StateError);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent.ckpt"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("config: defaults, file parsing, overrides, unknown keys") {
  Config cfg = Config::defaults();
  CHECK(cfg.get_int("pdm.N") == 10);
  CHECK(cfg.get_int("pdm.M") == 4);
  CHECK(cfg.get_double("teacher.alpha") == doctest::Approx(0.999));
  CHECK(cfg.get_double("stage2.lambda_epa") == doctest::Approx(0.25));
  CHECK(cfg.get_bool("pma.enabled"));

  // the published 10x prompt/base learning-rate ratio holds by default
  CHECK(cfg.get_double("stage2.lr_prompt") ==
        doctest::Approx(10.0 * cfg.get_double("stage2.lr_base")));

  Config parsed = Config::from_text(
      "# comment line\n"
      "pdm.N = 16\n"
      "data.corruption=blur  # trailing comment\n");
  CHECK(parsed.get_int("pdm.N") == 16);
  CHECK(parsed.get("data.corruption") == "blur");
  CHECK(parsed.get_int("pdm.M") == 4);  // untouched default

  CHECK_THROWS_AS(Config::from_text("nonsense line\n"), ParseError);
  CHECK_THROWS_AS(cfg.set("no.such.key", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.get("no.such.key"), ConfigError);

  // canonical text round-trips
  Config again = Config::from_text(cfg.to_text());
  CHECK(again.to_text() == cfg.to_text());
}
