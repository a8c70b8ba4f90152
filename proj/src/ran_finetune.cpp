#include "ranlab/ran_finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ranlab/errors.hpp"
#include "ranlab/ops.hpp"
#include "ranlab/rng.hpp"

namespace ranlab {

std::string_view tune_mode_name(TuneMode m) {
  switch (m) {
    case TuneMode::LinearProbe: return "lp";
    case TuneMode::MlpTune: return "mlp";
    case TuneMode::Ran: return "ran";
  }
  throw ContractViolation("unknown tuning mode");
}

TuneMode parse_tune_mode(std::string_view name) {
  for (auto m : {TuneMode::LinearProbe, TuneMode::MlpTune, TuneMode::Ran})
    if (tune_mode_name(m) == name) return m;
  throw ContractViolation("unknown tuning mode '" + std::string(name) + "' (lp, mlp, ran)");
}

void RanConfig::validate() const {
  RANLAB_REQUIRE(std::isfinite(alpha) && alpha >= 0.0, "ran: alpha must be >= 0");
  RANLAB_REQUIRE(std::isfinite(beta) && beta >= 0.0, "ran: beta must be >= 0");
  RANLAB_REQUIRE(batch_size >= 2, "ran: batch_size must be >= 2");
  RANLAB_REQUIRE(optimizer.learning_rate >= 0.0, "ran: learning rate must be >= 0");
}

std::vector<std::pair<std::string, Array*>> TransformHead::tensors() {
  if (mode == TuneMode::LinearProbe) return {{"wc", &wc}, {"bc", &bc}};
  return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}, {"wc", &wc}, {"bc", &bc}};
}

std::vector<std::pair<std::string, const Array*>> TransformHead::tensors() const {
  std::vector<std::pair<std::string, const Array*>> out;
  for (auto& [name, ptr] : const_cast<TransformHead*>(this)->tensors()) out.emplace_back(name, ptr);
  return out;
}

namespace {

Array normal_array(Shape shape, Rng& rng, double stddev) {
  Array a(std::move(shape));
  for (double& v : a.data()) v = rng.normal() * stddev;
  return a;
}

}  // namespace

TransformHead init_head(TuneMode mode, std::size_t dim, std::size_t classes, std::size_t hidden,
                        std::uint64_t seed) {
  RANLAB_REQUIRE(dim > 0 && classes >= 2, "head: need D > 0 and k >= 2");
  Rng rng(mix_seed(seed, 0x4ead));
  const double d = static_cast<double>(dim);
  TransformHead h;
  h.mode = mode;
  if (mode != TuneMode::LinearProbe) {
    const std::size_t hid = hidden ? hidden : 2 * dim;
    h.w1 = normal_array({dim, hid}, rng, std::sqrt(2.0 / d));
    h.b1 = Array(Shape{hid}, 0.0);
    h.w2 = normal_array({hid, dim}, rng, std::sqrt(1.0 / static_cast<double>(hid)));
    h.b2 = Array(Shape{dim}, 0.0);
  }
  h.wc = normal_array({dim, classes}, rng, std::sqrt(1.0 / d));
  h.bc = Array(Shape{classes}, 0.0);
  return h;
}

nlohmann::json head_to_json(const TransformHead& head) {
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, a] : head.tensors())
    tensors[name] = {{"shape", a->shape()}, {"data", std::vector<double>(a->data().begin(), a->data().end())}};
  return {{"mode", tune_mode_name(head.mode)}, {"tensors", tensors}};
}

TransformHead head_from_json(const nlohmann::json& doc) {
  try {
    TransformHead h;
    h.mode = parse_tune_mode(doc.at("mode").get<std::string>());
    const auto& tensors = doc.at("tensors");
    for (auto& [name, a] : h.tensors()) {
      const auto& t = tensors.at(name);
      *a = Array(t.at("shape").get<Shape>(), t.at("data").get<std::vector<double>>());
    }
    RANLAB_REQUIRE(h.wc.rank() == 2 && h.bc.size() == h.wc.cols(), "classifier shapes disagree");
    if (h.mode != TuneMode::LinearProbe)
      RANLAB_REQUIRE(h.w1.rank() == 2 && h.w2.rank() == 2 && h.w1.cols() == h.w2.rows() &&
                         h.w2.cols() == h.wc.rows(),
                     "transform shapes disagree");
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("head: ") + e.what());
  } catch (const ContractViolation& e) {
    throw IoError(std::string("head: ") + e.what());
  }
}

void ClassCentroids::renormalize() {
  for (std::size_t j = 0; j < c.rows(); ++j) {
    auto row = c.row(j);
    const double r = l2_norm(row);
    if (!(r > 0.0)) throw DegenerateEmbedding("centroid " + std::to_string(j) + " collapsed to zero");
    for (double& v : row) v /= r;
  }
}

ClassCentroids centroids_from_means(const Array& z, std::span<const int> labels, std::size_t classes) {
  RANLAB_REQUIRE(z.rank() == 2 && z.rows() == labels.size(), "centroids: one label per row required");
  RANLAB_REQUIRE(classes >= 2, "centroids: need k >= 2");
  const std::size_t d = z.cols();
  ClassCentroids out{Array(Shape{classes, d}, 0.0)};
  std::vector<std::size_t> count(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    RANLAB_REQUIRE(labels[i] >= 0 && y < classes, "centroids: label outside [0,k)");
    ++count[y];
    for (std::size_t p = 0; p < d; ++p) out.c.at(y, p) += z.at(i, p);
  }
  for (std::size_t j = 0; j < classes; ++j)
    RANLAB_REQUIRE(count[j] > 0, "class " + std::to_string(j) +
                                     " is absent from the training data; its centroid is undefined");
  out.renormalize();
  return out;
}

Var cov_loss(Var z) {
  const Array& zv = z.value();
  RANLAB_REQUIRE(zv.rank() == 2 && zv.rows() >= 2, "cov_loss: need at least two rows");
  const std::size_t n = zv.rows(), d = zv.cols();
  Array off(Shape{d, d}, 1.0);
  for (std::size_t j = 0; j < d; ++j) off.at(j, j) = 0.0;
  const Var centered = ops::sub_row(z, ops::mean_rows(z));
  const Var cov = ops::scale(ops::matmul(ops::transpose(centered), centered), 1.0 / static_cast<double>(n - 1));
  return ops::scale(ops::sum(ops::mul(ops::square(cov), z.tape->constant(off))), 1.0 / static_cast<double>(d));
}

Var mse_consistency(Var f, Var z) {
  RANLAB_REQUIRE(f.value().rank() == 2 && f.shape() == z.shape(), "mse_consistency: shapes differ");
  const Var diff = ops::sub(ops::normalize_rows(f), ops::normalize_rows(z));
  return ops::scale(ops::sum(ops::square(diff)), 1.0 / static_cast<double>(f.value().rows()));
}

Var adv_loss(Var f, std::span<const int> labels, Var centroids) {
  const Array& fv = f.value();
  const Array& cv = centroids.value();
  RANLAB_REQUIRE(cv.rank() == 2 && cv.rows() >= 2, "adv_loss: need at least two centroids");
  RANLAB_REQUIRE(fv.rank() == 2 && fv.rows() == labels.size() && fv.rows() >= 1,
                 "adv_loss: one label per feature row required");
  const std::size_t n = fv.rows(), k = cv.rows();
  Array wrong(Shape{n, k}, 1.0 / static_cast<double>(k - 1));
  std::vector<std::size_t> own(n);
  for (std::size_t i = 0; i < n; ++i) {
    RANLAB_REQUIRE(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < k, "adv_loss: label outside [0,k)");
    own[i] = static_cast<std::size_t>(labels[i]);
    wrong.at(i, own[i]) = 0.0;
  }
  Tape& tape = *f.tape;
  const Var mask = tape.constant(std::move(wrong));
  const Var dist = ops::sum(ops::mul(ops::row_distances(f, centroids), mask));
  const Var angles = ops::acos_clamped(ops::matmul_nt(centroids, centroids), -1.0 + kAcosMargin, 1.0 - kAcosMargin);
  const Var margin = ops::sum(ops::mul(ops::gather_rows(angles, own), mask));
  return ops::scale(ops::add(dist, margin), -1.0 / static_cast<double>(n));
}

namespace {

template <typename Fn>
double eval_constant(Fn&& fn) {
  Tape tape;
  return fn(tape).value().item();
}

}  // namespace

double cov_loss(const Array& z) {
  return eval_constant([&](Tape& t) { return cov_loss(t.constant(z)); });
}

double mse_consistency(const Array& f, const Array& z) {
  return eval_constant([&](Tape& t) { return mse_consistency(t.constant(f), t.constant(z)); });
}

double adv_loss(const Array& f, std::span<const int> labels, const Array& centroids) {
  return eval_constant([&](Tape& t) { return adv_loss(t.constant(f), labels, t.constant(centroids)); });
}

double compose_ran_loss(double ce, double mse, double cov, double adv, double alpha, double beta) {
  return ce + (alpha * (mse + cov) + beta * adv);
}

RanLossParts ran_loss(Var logits, const FeatureBatch& batch, Var f, Var z, Var centroids, double alpha,
                      double beta, TaskLoss loss) {
  RanLossParts p;
  if (loss == TaskLoss::Binary) {
    RANLAB_REQUIRE(batch.targets.has_value(), "ran_loss: binary task needs a target matrix");
    p.ce = ops::binary_cross_entropy(logits, *batch.targets);
  } else {
    p.ce = ops::cross_entropy(logits, batch.labels);
  }
  p.mse = mse_consistency(f, z);
  p.cov = cov_loss(z);
  p.adv = adv_loss(z, batch.labels, centroids);
  p.total = ops::add(p.ce, ops::add(ops::scale(ops::add(p.mse, p.cov), alpha), ops::scale(p.adv, beta)));
  return p;
}

std::pair<Var, Var> head_forward(Tape&, const std::vector<Var>& v, TuneMode mode, Var f) {
  if (mode == TuneMode::LinearProbe) {
    RANLAB_REQUIRE(v.size() == 2, "head_forward: linear probe expects 2 tensors");
    return {f, ops::add_row(ops::matmul(f, v[0]), v[1])};
  }
  RANLAB_REQUIRE(v.size() == 6, "head_forward: MLP head expects 6 tensors");
  const Var h = ops::smooth_relu(ops::add_row(ops::matmul(f, v[0]), v[1]));
  const Var z = ops::add_row(ops::matmul(h, v[2]), v[3]);
  return {z, ops::add_row(ops::matmul(z, v[4]), v[5])};
}

nlohmann::json EpochLog::to_json() const {
  return {{"epoch", epoch}, {"total", total}, {"ce", ce},   {"mse", mse},
          {"cov", cov},     {"adv", adv},     {"accuracy", train_accuracy}};
}

namespace {

std::vector<Var> bind(Tape& tape, const TransformHead& head, bool trainable) {
  std::vector<Var> vars;
  for (const auto& [name, t] : head.tensors()) vars.push_back(trainable ? tape.leaf(*t, name) : tape.constant(*t));
  return vars;
}

Array rows_of(const Array& a, std::span<const std::size_t> idx) {
  const std::size_t d = a.cols();
  Array out(Shape{idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(a.row(idx[i]).begin(), d, out.row(i).begin());
  return out;
}

// Batch boundaries over n rows; a trailing single row joins the previous batch
// so covariance terms always see at least two rows.
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s < n; s += size) out.emplace_back(s, std::min(size, n - s));
  if (out.size() > 1 && out.back().second == 1) {
    out[out.size() - 2].second += 1;
    out.pop_back();
  }
  return out;
}

}  // namespace

Array head_logits(const TransformHead& head, const Array& features) {
  Tape tape;
  const auto vars = bind(tape, head, false);
  return head_forward(tape, vars, head.mode, tape.constant(features)).second.value();
}

std::vector<int> argmax_rows(const Array& scores) {
  RANLAB_REQUIRE(scores.rank() == 2 && scores.cols() > 0, "argmax_rows: expected a matrix");
  std::vector<int> out(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const auto row = scores.row(i);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  RANLAB_REQUIRE(predicted.size() == labels.size() && !labels.empty(), "accuracy: size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

FineTuneResult fine_tune(const FeatureStage& stage, std::size_t n, std::span<const int> labels,
                         const std::optional<Array>& targets, std::size_t classes, const RanConfig& cfg) {
  cfg.validate();
  RANLAB_REQUIRE(n >= 2, "fine_tune: need at least two training rows");
  RANLAB_REQUIRE(labels.size() == n, "fine_tune: one label per training row required");
  RANLAB_REQUIRE(classes >= 2, "fine_tune: need k >= 2");
  std::vector<std::size_t> count(classes, 0);
  for (int y : labels) {
    RANLAB_REQUIRE(y >= 0 && static_cast<std::size_t>(y) < classes, "fine_tune: label outside [0,k)");
    ++count[static_cast<std::size_t>(y)];
  }
  for (std::size_t j = 0; j < classes; ++j)
    RANLAB_REQUIRE(count[j] > 0, "class " + std::to_string(j) + " is absent from the training split");
  if (cfg.loss == TaskLoss::Binary)
    RANLAB_REQUIRE(targets && targets->shape() == Shape({n, classes}),
                   "fine_tune: binary task needs an (n, k) target matrix");

  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  const auto frozen_features = [&] {
    Tape tape;
    std::vector<Var> sv;
    for (const auto& [name, t] : stage.params) sv.push_back(tape.constant(*t));
    return stage.produce(tape, sv, all).value();
  };
  const Array f0 = frozen_features();
  RANLAB_REQUIRE(f0.rank() == 2 && f0.rows() == n && f0.cols() > 0, "fine_tune: stage must produce (n, D) features");
  RANLAB_REQUIRE(f0.all_finite(), "fine_tune: features must be finite");

  FineTuneResult result;
  result.head = init_head(cfg.mode, f0.cols(), classes, cfg.hidden, cfg.seed);
  const bool ran = cfg.mode == TuneMode::Ran;
  if (ran) {
    Tape tape;
    const auto vars = bind(tape, result.head, false);
    const Array z0 = head_forward(tape, vars, cfg.mode, tape.constant(f0)).first.value();
    result.centroids = centroids_from_means(z0, labels, classes);
  }

  std::vector<Array*> slots;
  for (auto& [name, t] : result.head.tensors()) slots.push_back(t);
  for (const auto& [name, t] : stage.params) slots.push_back(t);
  if (ran) slots.push_back(&result.centroids->c);

  const auto ranges = batch_ranges(n, cfg.batch_size);
  Adam adam(cfg.optimizer, ranges.size() * cfg.epochs);
  Rng rng(mix_seed(cfg.seed, 0xf17e));
  std::vector<std::size_t> order = all;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch;
    for (const auto& [start, len] : ranges) {
      const std::span<const std::size_t> rows = std::span(order).subspan(start, len);
      FeatureBatch batch;
      for (auto r : rows) batch.labels.push_back(labels[r]);
      if (targets) batch.targets = rows_of(*targets, rows);
      Tape tape;
      std::vector<Var> leaves = bind(tape, result.head, true);
      const std::size_t head_count = leaves.size();
      std::vector<Var> sv;
      for (const auto& [name, t] : stage.params) sv.push_back(tape.leaf(*t, name));
      leaves.insert(leaves.end(), sv.begin(), sv.end());
      try {
        const Var f = stage.produce(tape, sv, rows);
        const auto [z, logits] =
            head_forward(tape, std::vector<Var>(leaves.begin(), leaves.begin() + static_cast<std::ptrdiff_t>(head_count)),
                         cfg.mode, f);
        Var total;
        if (ran) {
          const Var c = tape.leaf(result.centroids->c, "centroids");
          leaves.push_back(c);
          const RanLossParts parts = ran_loss(logits, batch, f, z, c, cfg.alpha, cfg.beta, cfg.loss);
          total = parts.total;
          log.mse += parts.mse.value().item();
          log.cov += parts.cov.value().item();
          log.adv += parts.adv.value().item();
          log.ce += parts.ce.value().item();
        } else {
          total = cfg.loss == TaskLoss::Binary ? ops::binary_cross_entropy(logits, *batch.targets)
                                               : ops::cross_entropy(logits, batch.labels);
          log.ce += total.value().item();
        }
        log.total += total.value().item();
        const auto grads = tape.grad(total, leaves);
        adam.step(slots, grads);
      } catch (const NumericError& e) {
        throw NumericError("fine_tune diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (ran) result.centroids->renormalize();
    }
    const double batches = static_cast<double>(ranges.size());
    for (double* v : {&log.total, &log.ce, &log.mse, &log.cov, &log.adv}) *v /= batches;
    log.train_accuracy = accuracy(argmax_rows(head_logits(result.head, frozen_features())), labels);
    result.log.push_back(log);
  }
  return result;
}

FineTuneResult fine_tune(const FeatureBatch& train, std::size_t classes, const RanConfig& cfg) {
  RANLAB_REQUIRE(train.features.rank() == 2, "fine_tune: features must be an (n, D) matrix");
  FeatureStage stage;
  stage.produce = [&](Tape& tape, std::span<const Var>, std::span<const std::size_t> rows) {
    return tape.constant(rows_of(train.features, rows));
  };
  return fine_tune(stage, train.size(), train.labels, train.targets, classes, cfg);
}

}  // namespace ranlab
