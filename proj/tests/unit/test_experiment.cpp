#include "doctest.h"
#include "ranlab/errors.hpp"
#include "ranlab/experiment.hpp"

using namespace ranlab;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.replicates = 2;
  c.gammas = {0.0, 0.3};
  c.modes = {TuneMode::LinearProbe, TuneMode::Ran};
  c.upstream.records = 60;
  c.task.records = 60;
  c.ood_records = 24;
  c.pretrain.epochs = 4;
  c.attack.iterations = 5;
  c.finetune.epochs = 10;
  return c;
}

bool same_results(const ResultRow& a, const ResultRow& b) {
  return a.gamma == b.gamma && a.kind == b.kind && a.mode == b.mode && a.split == b.split && a.seed == b.seed &&
         a.macro_auc == b.macro_auc && a.acc == b.acc;
}

}  // namespace

TEST_CASE("cell names and grid order") {
  CHECK(Cell{0.05, NoiseKind::ImageAdv, 3}.name() == "g0.05-image-s3");
  CHECK(Cell{0.3, NoiseKind::CaptionAdv, 0}.name() == "g0.3-caption-s0");
  CHECK(Cell{0.0, NoiseKind::ImageAdv, 2}.name() == Cell{0.0, NoiseKind::CaptionAdv, 2}.name());

  const auto c = small_config();
  const auto cells = grid_cells(c);
  REQUIRE(cells.size() == 2 * 2 * 2);
  CHECK(cells[0] == Cell{0.0, NoiseKind::ImageAdv, 0});
  CHECK(cells[1] == Cell{0.0, NoiseKind::ImageAdv, 1});
  CHECK(cells[2] == Cell{0.0, NoiseKind::CaptionAdv, 0});
  CHECK(cells.back() == Cell{0.3, NoiseKind::CaptionAdv, 1});
}

TEST_CASE("noise specs are per cell") {
  const auto c = small_config();
  const auto a = noise_spec(c, {0.3, NoiseKind::ImageAdv, 0});
  const auto b = noise_spec(c, {0.3, NoiseKind::ImageAdv, 1});
  CHECK(a.gamma == 0.3);
  CHECK(a.seed != b.seed);
}

TEST_CASE("crafting a cell perturbs floor(gamma N) records") {
  auto c = small_config();
  const Corpus clean = upstream_corpus(c, 0);
  const CraftResult r = craft_cell(c, {0.3, NoiseKind::CaptionAdv, 0}, clean, nullptr, nullptr);
  CHECK(r.noisy.size() == clean.size());
  CHECK(r.manifest.perturbed_indices.size() == 18);
  CHECK_THROWS_AS(craft_cell(c, {0.3, NoiseKind::ImageAdv, 0}, clean, nullptr, nullptr), ContractViolation);
}

TEST_CASE("task splits") {
  const auto c = small_config();
  const auto s = task_splits(c, 0);
  CHECK(s.train.size() + s.id_test.size() == 60);
  CHECK(s.ood_test.size() == 24);
  CHECK(s.train.header == s.ood_test.header);
}

TEST_CASE("run_matrix: row count, determinism, shared clean cells") {
  const auto c = small_config();
  const auto rows = run_matrix(c);
  // gammas x kinds x modes x seeds x splits
  REQUIRE(rows.size() == 2 * 2 * 2 * 2 * 2);
  for (const auto& r : rows) {
    CHECK(r.acc >= 0.0);
    CHECK(r.acc <= 1.0);
  }

  const auto again = run_matrix(c);
  REQUIRE(again.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(same_results(rows[i], again[i]));

  // gamma-zero rows agree across kinds
  for (const auto& a : rows)
    for (const auto& b : rows)
      if (a.gamma == 0.0 && b.gamma == 0.0 && a.mode == b.mode && a.split == b.split && a.seed == b.seed)
        CHECK(a.acc == b.acc);

  // a one-cell grid reproduces the matching rows of the full grid
  ExperimentConfig one = c;
  one.gammas = {0.3};
  one.kinds = {NoiseKind::CaptionAdv};
  one.replicates = 1;
  for (const auto& r : run_matrix(one)) {
    bool found = false;
    for (const auto& full : rows) found = found || same_results(r, full);
    CHECK(found);
  }

  const std::string csv = results_csv(rows);
  CHECK(csv.rfind(std::string(kResultsHeader) + "\n", 0) == 0);
  const auto parsed = parse_results_csv(csv);
  REQUIRE(parsed.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(same_results(parsed[i], rows[i]));

  const auto summary = trend_summary(rows);
  CHECK(summary["seeds"] == 2);
  CHECK(summary["ood_degradation"].size() == 2 * 2);
  CHECK(summary["ran_ge_mlp"].empty());
}

TEST_CASE("results csv rejects malformed input") {
  CHECK_THROWS_AS(parse_results_csv("a,b\n"), IoError);
  CHECK_THROWS_AS(parse_results_csv(std::string(kResultsHeader) + "\n0.1,image,lp,id\n"), IoError);
  CHECK_THROWS_AS(parse_results_csv(std::string(kResultsHeader) + "\n0.1,paint,lp,id,0,0.5,0.5,1\n"), IoError);
}

TEST_CASE("attack and zero-shot helpers") {
  auto c = small_config();
  c.attack_records = 6;
  const Corpus clean = upstream_corpus(c, 0);
  const auto enc = train_surrogate(c, clean, 0).params;
  const auto rep = attack_cell(c, clean, target_corpus(c, 0), enc, 0);
  CHECK(rep.rows.size() == 6);
  CHECK(zeroshot_corpus(c, 0).size() == c.zeroshot_records);
}
