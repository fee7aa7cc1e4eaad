#include "dirnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

namespace dirnet {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (eval_batch_size < 1) throw ConfigError("eval_batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(alpha0 > lr_floor)) throw ConfigError("alpha0 must exceed lr_floor");
  if (plateau_window < 2) throw ConfigError("plateau_window must be >= 2");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.eps > 0)) {
    throw ConfigError("adam betas must lie in [0, 1) and eps must be positive");
  }
}

// ---------------------------------------------------------------------------
// Loss

namespace {

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

void check_labels(const Shape& s, const std::vector<std::size_t>& labels) {
  if (s.h != 1 || s.w != 1) throw ShapeError("probabilities must have shape (n, classes, 1, 1), got " + s.str());
  if (labels.size() != s.n) throw ShapeError("label count does not match batch size");
  for (auto l : labels)
    if (l >= s.c) throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(s.c) + ")");
}

template <typename T>
double bce_sum(const T* row, std::size_t classes, std::size_t label) {
  double acc = 0.0;
  for (std::size_t j = 0; j < classes; ++j) {
    const double p = clamp_prob(static_cast<double>(row[j]));
    acc -= j == label ? std::log(p) : std::log(1.0 - p);
  }
  return acc;
}

}  // namespace

double cross_entropy(const Tensor<double>& probs, const std::vector<std::size_t>& labels) {
  const Shape& s = probs.shape();
  check_labels(s, labels);
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) total += bce_sum(probs.ptr() + n * s.c, s.c, labels[n]);
  return total / static_cast<double>(s.c) / static_cast<double>(s.n);
}

double cross_entropy(const Tensor<double>& probs, const Tensor<double>& targets) {
  require_same_shape(probs.shape(), targets.shape(), "cross_entropy targets");
  const Shape& s = targets.shape();
  std::vector<std::size_t> labels(s.n);
  for (std::size_t n = 0; n < s.n; ++n) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < s.c; ++c) {
      const double t = targets[n * s.c + c];
      if (t == 1.0) {
        ++ones;
        labels[n] = c;
      } else if (t != 0.0) {
        throw DataError("target rows must be one-hot");
      }
    }
    if (ones != 1) throw DataError("target rows must be one-hot");
  }
  return cross_entropy(probs, labels);
}

LossResult cross_entropy_with_grad(const Tensor<float>& probs, const std::vector<std::size_t>& labels) {
  const Shape& s = probs.shape();
  check_labels(s, labels);
  LossResult out{0.0, Tensor<float>(s)};
  const double norm = 1.0 / (static_cast<double>(s.c) * static_cast<double>(s.n));
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    const float* row = probs.ptr() + n * s.c;
    total += bce_sum(row, s.c, labels[n]);
    for (std::size_t j = 0; j < s.c; ++j) {
      const double raw = row[j];
      if (raw < kProbClamp || raw > 1.0 - kProbClamp) continue;  // clamped: flat
      const double g = j == labels[n] ? -1.0 / raw : 1.0 / (1.0 - raw);
      out.grad[n * s.c + j] = static_cast<float>(g * norm);
    }
  }
  out.loss = total * norm;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

void adam_step(const std::vector<Param<float>*>& params, AdamState& state, double alpha,
               const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match parameter list");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const auto b1 = static_cast<float>(cfg.beta1);
  const auto b2 = static_cast<float>(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param<float>& p = *params[i];
    Tensor<float>& m = state.m[i];
    Tensor<float>& v = state.v[i];
    require_same_shape(m.shape(), p.value.shape(), "adam moment for " + p.name);
    require_same_shape(p.grad.shape(), p.value.shape(), "gradient for " + p.name);
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const float g = p.grad[k];
      m[k] = b1 * m[k] + (1.0f - b1) * g;
      v[k] = b2 * v[k] + (1.0f - b2) * g * g;
      const double mh = m[k] / c1;
      const double vh = v[k] / c2;
      p.value[k] -= static_cast<float>(alpha * mh / (std::sqrt(vh) + cfg.eps));
    }
  }
}

double lr_update(std::span<const double> history, double alpha, std::size_t window, double floor) {
  if (window < 2 || history.size() < window) return alpha;
  const double anchor = history[history.size() - window];
  const double recent = *std::min_element(history.end() - static_cast<std::ptrdiff_t>(window - 1), history.end());
  if (recent < anchor) return alpha;
  if (0.1 * alpha <= floor) return alpha;
  return 0.1 * alpha;
}

std::size_t batches_per_epoch(std::size_t samples, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  return (samples + batch_size - 1) / batch_size;
}

std::vector<std::size_t> epoch_order(std::size_t samples, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  // Fisher-Yates with explicit index draws so the order does not depend on
  // the standard library's shuffle.
  for (std::size_t i = samples; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

// ---------------------------------------------------------------------------
// Evaluation

std::size_t class_rank(const float* probs, std::size_t classes, std::size_t label) {
  const float target = probs[label];
  std::size_t rank = 0;
  for (std::size_t j = 0; j < classes; ++j) {
    if (probs[j] > target || (probs[j] == target && j < label)) ++rank;
  }
  return rank;
}

EvalResult score_probabilities(const Tensor<float>& probs, const std::vector<std::size_t>& labels) {
  const Shape& s = probs.shape();
  check_labels(s, labels);
  EvalResult r;
  r.samples = s.n;
  std::size_t hit1 = 0, hit5 = 0;
  double loss = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    const float* row = probs.ptr() + n * s.c;
    const std::size_t rank = class_rank(row, s.c, labels[n]);
    hit1 += rank < 1 ? 1 : 0;
    hit5 += rank < 5 ? 1 : 0;
    loss += bce_sum(row, s.c, labels[n]) / static_cast<double>(s.c);
  }
  if (s.n > 0) {
    r.loss = loss / static_cast<double>(s.n);
    r.top1 = static_cast<double>(hit1) / static_cast<double>(s.n);
    r.top5 = static_cast<double>(hit5) / static_cast<double>(s.n);
  }
  return r;
}

EvalResult evaluate(Network<float>& net, const DatasetSplit& split, std::size_t batch_size, bool use_roi) {
  if (split.samples.empty()) throw DataError("cannot evaluate an empty split");
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t hit1 = 0, hit5 = 0;
  double loss = 0.0;
  for (std::size_t first = 0; first < order.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, order.size() - first);
    Batch b = make_batch(split, order, first, count, use_roi);
    const Tensor<float> probs = net.forward(b.images, Mode::Infer);
    require_finite(probs, "evaluation probabilities");
    const EvalResult part = score_probabilities(probs, b.labels);
    hit1 += static_cast<std::size_t>(std::llround(part.top1 * static_cast<double>(count)));
    hit5 += static_cast<std::size_t>(std::llround(part.top5 * static_cast<double>(count)));
    loss += part.loss * static_cast<double>(count);
  }
  const auto n = static_cast<double>(order.size());
  return EvalResult{loss / n, static_cast<double>(hit1) / n, static_cast<double>(hit5) / n, order.size()};
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_row(std::ofstream& os, const Metrics& m, bool with_val) {
  os << m.iteration << ',' << m.epoch << ',' << fmt(m.train_loss) << ',';
  if (with_val) {
    os << fmt(m.val_loss) << ',' << fmt(m.top1) << ',' << fmt(m.top5);
  } else {
    os << ",,";
  }
  os << ',' << fmt(m.lr) << '\n';
  os.flush();
}

}  // namespace

TrainResult train(Network<float>& net, const DatasetSplit& train_split, const DatasetSplit& val,
                  const TrainConfig& cfg, const fs::path& out_dir, const ProgressFn& progress) {
  cfg.validate();
  if (train_split.samples.empty()) throw DataError("training split is empty");
  if (val.samples.empty()) throw DataError("validation split is empty");
  if (train_split.num_classes != net.num_classes() || val.num_classes != net.num_classes()) {
    throw ConfigError("dataset has " + std::to_string(train_split.num_classes) + " classes but the network has " +
                      std::to_string(net.num_classes()));
  }
  fs::create_directories(out_dir);

  TrainResult result;
  result.csv_path = out_dir / "metrics.csv";
  result.best_checkpoint = out_dir / "best.ckpt";
  result.last_checkpoint = out_dir / "last.ckpt";
  std::ofstream csv(result.csv_path, std::ios::trunc);
  if (!csv) throw Error("cannot write " + result.csv_path.string());
  csv << kMetricsHeader << '\n';

  const auto params = net.params();
  AdamState adam;
  double alpha = cfg.alpha0;
  std::vector<double> history;
  std::size_t iteration = 0;
  const bool threaded = configured_threads() > 1;
  result.best_val_loss = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    BatchPrefetcher batches(train_split, epoch_order(train_split.size(), cfg.seed, epoch), cfg.batch_size,
                            cfg.use_roi, cfg.prefetch_capacity, threaded);
    double epoch_loss = 0.0;
    while (auto batch = batches.next()) {
      net.zero_grad();
      const Tensor<float> probs = net.forward(batch->images, Mode::Train);
      require_finite(probs, "training probabilities");
      LossResult loss = cross_entropy_with_grad(probs, batch->labels);
      net.backward(loss.grad);
      adam_step(params, adam, alpha, cfg.adam);
      ++iteration;
      epoch_loss += loss.loss * static_cast<double>(batch->labels.size());
      if (!std::isfinite(loss.loss)) throw NumericError("training loss is not finite");
      if (cfg.log_every_iteration) {
        write_row(csv, Metrics{iteration, epoch, loss.loss, 0, 0, 0, alpha}, false);
      }
    }

    const EvalResult ev = evaluate(net, val, cfg.eval_batch_size, cfg.use_roi);
    Metrics m{iteration, epoch, epoch_loss / static_cast<double>(train_split.size()), ev.loss, ev.top1, ev.top5,
              alpha};
    write_row(csv, m, true);
    result.epochs.push_back(m);
    if (progress) progress(m);

    if (ev.loss < result.best_val_loss) {
      result.best_val_loss = ev.loss;
      result.best_epoch = epoch;
      save_checkpoint(net, result.best_checkpoint);
    }
    history.push_back(ev.loss);
    const double next = lr_update(history, alpha, cfg.plateau_window, cfg.lr_floor);
    if (next != alpha) history.clear();
    alpha = next;
  }
  save_checkpoint(net, result.last_checkpoint);
  return result;
}

}  // namespace dirnet
