// One line per acceptance criterion. Exit status is nonzero if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <unistd.h>

#include "ranlab/encoders.hpp"
#include "ranlab/errors.hpp"
#include "ranlab/experiment.hpp"
#include "ranlab/fusion_vqa.hpp"
#include "ranlab/gradcheck.hpp"
#include "ranlab/image_attack.hpp"
#include "ranlab/io.hpp"
#include "ranlab/ops.hpp"
#include "ranlab/rng.hpp"

using namespace ranlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Array random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Array a(Shape{r, c});
  for (double& v : a.data()) v = rng.normal();
  return a;
}

Array unit_rows(Array a) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double r = l2_norm(a.row(i));
    for (double& v : a.row(i)) v /= r;
  }
  return a;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

Outcome gradient_correctness() {
  Rng rng(2024);
  double worst = 0.0;
  std::size_t checks = 0;
  const auto track = [&](double err) {
    worst = std::max(worst, err);
    ++checks;
  };
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 3 + rng.below(4), d = 2 + rng.below(3), k = 2 + rng.below(3);
    std::vector<int> y;
    for (std::size_t i = 0; i < n; ++i) y.push_back(static_cast<int>(i % k));
    const Array f = random_matrix(n, d, rng), z = random_matrix(n, d, rng);
    const Array c = unit_rows(random_matrix(k, d, rng));
    const Array log_tau = Array::scalar(std::log(0.2 + rng.uniform()));

    track(finite_diff_check(
        [](Tape&, std::span<const Var> p) {
          return clip_loss(ops::normalize_rows(p[0]), ops::normalize_rows(p[1]), p[2]);
        },
        {f, z, log_tau}));
    track(finite_diff_check([](Tape&, std::span<const Var> p) { return cov_loss(p[0]); }, {z}));
    track(finite_diff_check([](Tape&, std::span<const Var> p) { return mse_consistency(p[0], p[1]); }, {f, z}));
    track(finite_diff_check([&](Tape&, std::span<const Var> p) { return adv_loss(p[0], y, p[1]); }, {f, c}));

    const TransformHead head = init_head(TuneMode::Ran, d, k, 0, static_cast<std::uint64_t>(rep));
    std::vector<Array> params;
    for (const auto& [name, t] : head.tensors()) params.push_back(*t);
    params.push_back(c);
    const FeatureBatch batch{f, y, std::nullopt};
    track(finite_diff_check(
        [&](Tape& tape, std::span<const Var> p) {
          const std::vector<Var> hv(p.begin(), p.end() - 1);
          const Var fv = tape.constant(f);
          const auto [zv, logits] = head_forward(tape, hv, TuneMode::Ran, fv);
          return ran_loss(logits, batch, fv, zv, p.back(), kDefaultAlpha, kDefaultBeta).total;
        },
        params));

    const std::size_t m = 1 + rng.below(4), l = 1 + rng.below(4);
    const CoAttentionBlock block = init_coattention(d, static_cast<std::uint64_t>(rep));
    std::vector<Array> cp;
    for (const auto& [name, t] : block.tensors()) cp.push_back(*t);
    cp.push_back(random_matrix(m, d, rng));
    cp.push_back(random_matrix(l, d, rng));
    const Array probe = random_matrix(1, d, rng);
    track(finite_diff_check(
        [&](Tape& tape, std::span<const Var> p) {
          const Var out = fuse_coattention(p.first(8), p[8], p[9]);
          return ops::sum(ops::mul(ops::reshape(out, {1, d}), tape.constant(probe)));
        },
        cp));
  }
  return {worst <= 1e-4, fmt("%.0f checks over 6 losses, max error %.2e <= 1e-4", static_cast<double>(checks), worst)};
}

Outcome pgd_constraints() {
  EncoderConfig ec;
  ec.vocab_size = Vocabulary::builtin().size();
  const auto enc = init_dual_encoder(ec, 7);
  Rng rng(99);
  std::size_t violations = 0, iterates = 0, identity_failures = 0;
  for (int rep = 0; rep < 200; ++rep) {
    Array x(Shape{12, 12, 1}), t(Shape{12, 12, 1});
    const double lo = rep % 3 == 0 ? 0.0 : rep % 3 == 1 ? 0.9 : 0.3;
    for (double& v : x.data()) v = rng.uniform(lo, std::min(1.0, lo + 0.1));
    for (double& v : t.data()) v = rng.uniform();
    AttackConfig cfg;
    cfg.epsilon = rng.uniform(0.0, 0.1);
    cfg.step_size = rng.uniform(0.001, 0.05);
    cfg.iterations = 1 + rng.below(5);
    const Array target = normalize(encode_image(enc, t)).vector.reshaped({1, ec.embed_dim});
    const PixelObjective cos = [&](Tape& tape, Var xv) {
      const EncoderGraph g = bind_encoder(tape, enc, false);
      return ops::sum(ops::row_dot(ops::normalize_rows(image_features(g, xv)), tape.constant(target)));
    };
    pgd_maximize(x, cos, cfg, [&](std::size_t, const Array& xt) {
      ++iterates;
      for (std::size_t i = 0; i < xt.size(); ++i)
        if (!(std::abs(xt[i] - x[i]) <= cfg.epsilon && xt[i] >= 0.0 && xt[i] <= 1.0)) ++violations;
    });
    if (rep % 20 == 0) {
      AttackConfig zero_eps = cfg, zero_iter = cfg;
      zero_eps.epsilon = 0.0;
      zero_iter.iterations = 0;
      identity_failures += !(pgd_attack(enc, x, t, zero_eps).x_adv == x);
      identity_failures += !(pgd_attack(enc, x, t, zero_iter).x_adv == x);
    }
  }
  return {violations == 0 && identity_failures == 0,
          fmt("200 attacks, %.0f iterates, %.0f pixel violations, %.0f eps=0/T=0 mismatches",
              static_cast<double>(iterates), static_cast<double>(violations),
              static_cast<double>(identity_failures))};
}

Outcome closed_form_pgd() {
  const Array x_clean = Array::vector({0.0, 0.0});
  const Array x_target = Array::matrix(1, 2, {1.0, 1.0});
  const PixelObjective inner = [&](Tape& tape, Var x) {
    return ops::sum(ops::row_dot(x, tape.constant(x_target)));
  };
  AttackConfig cfg;
  cfg.step_size = 0.1;
  cfg.epsilon = 0.05;
  cfg.iterations = 1;
  const auto r = pgd_maximize(x_clean, inner, cfg);
  return {r.x_adv[0] == 0.05 && r.x_adv[1] == 0.05, fmt("x_adv = (%.17g, %.17g), expected (0.05, 0.05)", r.x_adv[0], r.x_adv[1])};
}

Outcome loss_arithmetic() {
  const double cov = cov_loss(Array::from_rows({{1, 2}, {2, 4}, {3, 6}}));
  const double mse = mse_consistency(Array::from_rows({{1, 0}}), Array::from_rows({{0, 1}}));
  const double adv =
      adv_loss(Array::from_rows({{1, 0}}), std::vector<int>{0}, Array::from_rows({{1, 0}, {0, 1}}));
  const double adv_expected = -(std::sqrt(2.0) + std::numbers::pi / 2);
  const double ce = 1.0;
  const double total = compose_ran_loss(ce, mse, cov, adv, 0.01, 0.015);
  const double scalar = ce + 0.01 * (mse + cov) + 0.015 * adv;
  const bool ok = std::abs(cov - 4.0) <= 1e-10 && std::abs(mse - 2.0) <= 1e-12 &&
                  std::abs(adv - adv_expected) <= 1e-9 && std::abs(total - scalar) <= 1e-5;
  return {ok, fmt("cov %.12g, mse %.12g, adv %.12g, composed %.8g", cov, mse, adv, total)};
}

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  return wins / pairs;
}

Outcome auc_oracle() {
  Rng rng(77);
  std::size_t mismatches = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < n; ++i) {
      s.push_back(static_cast<double>(rng.below(9)) / 8.0);
      y.push_back(rng.bernoulli(0.5) ? 1 : 0);
    }
    y[0] = 1;
    y[1] = 0;
    mismatches += auc(s, y) != pairwise_auc(s, y);
  }
  return {mismatches == 0, fmt("100 tied instances, %.0f mismatches", static_cast<double>(mismatches))};
}

Outcome corpus_crafting(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.upstream.records = 200;
  const Corpus clean = upstream_corpus(c, 0);
  const Corpus targets = target_corpus(c, 0);
  const DualEncoderParams surrogate = train_surrogate(c, clean, 0).params;
  std::size_t wrong_counts = 0, irreproducible = 0, checked = 0;
  for (double g : {0.0, 0.05, 0.1, 0.2, 0.3})
    for (NoiseKind k : {NoiseKind::ImageAdv, NoiseKind::CaptionAdv}) {
      const Cell cell{g, k, 0};
      const auto a = craft_cell(c, cell, clean, &surrogate, &targets);
      const auto b = craft_cell(c, cell, clean, &surrogate, &targets);
      const auto expected = static_cast<std::size_t>(std::floor(g * 200.0 + 1e-9));
      wrong_counts += a.manifest.perturbed_indices.size() != expected;
      irreproducible += a.manifest.to_json().dump() != b.manifest.to_json().dump() ||
                        corpus_checksum(a.noisy) != corpus_checksum(b.noisy) ||
                        a.manifest.noisy_checksum != corpus_checksum(a.noisy);
      ++checked;
    }
  return {wrong_counts == 0 && irreproducible == 0,
          fmt("%.0f (gamma, kind) cells on N=200: %.0f wrong counts, %.0f irreproducible", static_cast<double>(checked),
              static_cast<double>(wrong_counts), static_cast<double>(irreproducible))};
}

Outcome attack_efficacy(const ExperimentConfig& cfg) {
  double clean = 0.0, adv = 0.0;
  std::size_t seeds_ok = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Corpus c = upstream_corpus(cfg, s);
    const auto enc = train_surrogate(cfg, c, s).params;
    const AttackReport r = attack_cell(cfg, c, target_corpus(cfg, s), enc, s);
    clean += r.mean_clean / 5.0;
    adv += r.mean_adv / 5.0;
    seeds_ok += r.mean_adv > r.mean_clean;
  }
  return {adv > clean && seeds_ok == 5,
          fmt("mean similarity to target: adversarial %.4f vs clean %.4f; %.0f/5 seeds", adv, clean,
              static_cast<double>(seeds_ok))};
}

double seed_mean(const std::vector<ResultRow>& rows, double g, NoiseKind k, TuneMode m, const char* split) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (r.gamma == g && r.kind == k && r.mode == m && r.split == split) {
      s += r.acc;
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::nan("");
}

Outcome ran_vs_mlp(const std::vector<ResultRow>& grid, const ExperimentConfig& cfg) {
  const double ran = seed_mean(grid, 0.2, NoiseKind::ImageAdv, TuneMode::Ran, "id");
  const double mlp = seed_mean(grid, 0.2, NoiseKind::ImageAdv, TuneMode::MlpTune, "id");
  const double ran_ood = seed_mean(grid, 0.2, NoiseKind::ImageAdv, TuneMode::Ran, "ood");
  const double mlp_ood = seed_mean(grid, 0.2, NoiseKind::ImageAdv, TuneMode::MlpTune, "ood");

  // mode collapse on the features of one gamma = 0.2 image-noise encoder
  const Cell cell{0.2, NoiseKind::ImageAdv, cfg.seed};
  const Corpus clean = upstream_corpus(cfg, cell.seed);
  const Corpus targets = target_corpus(cfg, cell.seed);
  const auto surrogate = train_surrogate(cfg, clean, cell.seed).params;
  const auto enc = pretrain_cell(cfg, cell, craft_cell(cfg, cell, clean, &surrogate, &targets).noisy).params;
  const TaskFeatures f = task_features(enc, task_splits(cfg, cell.seed));
  ExperimentConfig zero = cfg;
  zero.finetune.alpha = 0.0;
  zero.finetune.beta = 0.0;
  const auto a = finetune_cell(zero, cell, TuneMode::MlpTune, f);
  const auto b = finetune_cell(zero, cell, TuneMode::Ran, f);
  bool identical = a.log.size() == b.log.size();
  for (std::size_t e = 0; identical && e < a.log.size(); ++e)
    identical = a.log[e].ce == b.log[e].ce && a.log[e].train_accuracy == b.log[e].train_accuracy;
  const auto ta = a.head.tensors(), tb = b.head.tensors();
  for (std::size_t i = 0; identical && i < ta.size(); ++i) identical = *ta[i].second == *tb[i].second;

  return {ran >= mlp && identical,
          fmt("ID acc ran %.4f vs mlp %.4f (OOD %.4f vs %.4f)", ran, mlp, ran_ood, mlp_ood) +
              (identical ? "; alpha=beta=0 matches mlp bit for bit" : "; alpha=beta=0 DIFFERS from mlp")};
}

Outcome ood_degradation(const std::vector<ResultRow>& grid) {
  const auto lp = [&](double g, NoiseKind k, const char* split) { return seed_mean(grid, g, k, TuneMode::LinearProbe, split); };
  const double i0 = lp(0.0, NoiseKind::ImageAdv, "ood"), i3 = lp(0.3, NoiseKind::ImageAdv, "ood");
  const double c0 = lp(0.0, NoiseKind::CaptionAdv, "ood"), c3 = lp(0.3, NoiseKind::CaptionAdv, "ood");
  const nlohmann::json trends = trend_summary(grid);
  std::size_t bumps = 0, total = 0;
  for (const auto& b : trends["id_bump"]) {
    bumps += b["flag"].get<bool>();
    ++total;
  }
  return {i3 < i0 && c3 < c0,
          fmt("LP OOD acc image %.4f -> %.4f, caption %.4f -> %.4f", i0, i3, c0, c3) +
              "; ID bump flag (not gated) " + std::to_string(bumps) + "/" + std::to_string(total)};
}

Outcome zero_shot(const ExperimentConfig& cfg) {
  double worst_z = 1e300, mean_acc = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto enc = train_surrogate(cfg, upstream_corpus(cfg, s), s).params;
    const ZeroShotReport r = zero_shot_evaluate(enc, zeroshot_corpus(cfg, s), cfg.zeroshot);
    worst_z = std::min(worst_z, r.z_score);
    mean_acc += r.accuracy / 5.0;
  }
  return {worst_z >= 3.0, fmt("mean accuracy %.4f, smallest z over 5 seeds %.2f >= 3", mean_acc, worst_z)};
}

Outcome tiny_pipeline() {
#ifdef RANLAB_CLI_PATH
  const fs::path out = fs::temp_directory_path() / ("ranlab-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(out);
  const fs::path config = fs::path(RANLAB_SOURCE_DIR) / "configs" / "tiny.toml";
  const std::string cmd = std::string("\"") + RANLAB_CLI_PATH + "\" pipeline --config \"" + config.string() +
                          "\" --out \"" + out.string() + "\" > \"" + (out.string() + ".log") + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  const ExperimentConfig cfg = ExperimentConfig::load(config);
  const fs::path csv = out / cfg.hash() / "results.csv";
  std::size_t rows = 0;
  if (status == 0 && fs::exists(csv)) rows = parse_results_csv(io::read_text(csv)).size();
  const std::size_t expected = cfg.gammas.size() * cfg.kinds.size() * cfg.modes.size() * cfg.replicates * 2;
  fs::remove_all(out);
  fs::remove(out.string() + ".log");
  return {status == 0 && rows == expected,
          fmt("exit %.0f, %.0f CSV rows, grid arithmetic %.0f", status, static_cast<double>(rows),
              static_cast<double>(expected))};
#else
  return {false, "command-line tool not built (RANLAB_BUILD_CLI=OFF)"};
#endif
}

}  // namespace

int main() {
  const ExperimentConfig cfg;
  std::vector<ResultRow> grid;
  double grid_seconds = 0.0;
  const auto ensure_grid = [&] {
    if (!grid.empty()) return;
    const auto start = std::chrono::steady_clock::now();
    grid = run_matrix(cfg);
    grid_seconds = seconds_since(start);
  };

  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", 60, gradient_correctness},
      {2, "PGD constraints", 120, pgd_constraints},
      {3, "closed-form PGD", 0, closed_form_pgd},
      {4, "loss arithmetic", 0, loss_arithmetic},
      {5, "AUC oracle equivalence", 0, auc_oracle},
      {6, "corpus crafting", 0, [&] { return corpus_crafting(cfg); }},
      {7, "attack efficacy", 300, [&] { return attack_efficacy(cfg); }},
      {8, "Ran >= MLP and mode collapse", 600,
       [&] {
         ensure_grid();
         return ran_vs_mlp(grid, cfg);
       }},
      {9, "OOD degradation under linear probing", 0,
       [&] {
         ensure_grid();
         return ood_degradation(grid);
       }},
      {10, "zero-shot above chance", 0, [&] { return zero_shot(cfg); }},
      {11, "tiny-config pipeline", 600, tiny_pipeline},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    double t = seconds_since(start);
    std::string timing = fmt("%.1fs", t);
    if (c.id == 8) timing = fmt("%.1fs, grid %.1fs", t, grid_seconds);
    if (c.limit_s > 0 && t > c.limit_s) {
      o.pass = false;
      o.detail += fmt(" [over the %.0fs limit]", c.limit_s);
    }
    failures += !o.pass;
    std::printf("[%s] %2d %s: %s (%s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures ? 1 : 0;
}
