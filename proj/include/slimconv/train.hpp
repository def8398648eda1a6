#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slimconv/executor.hpp"
#include "slimconv/model_zoo.hpp"

namespace slimconv {

// --- learning-rate schedules --------------------------------------------------

inline double cosine_lr(std::size_t epoch, std::size_t total, double base) {
  if (epoch >= total) throw ContractViolation("cosine_lr: epoch must be in [0, total)");
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total)));
}

inline double step_lr(std::size_t epoch, double base, const std::vector<std::size_t>& milestones, double gamma) {
  double lr = base;
  for (std::size_t m : milestones)
    if (epoch >= m) lr *= gamma;
  return lr;
}

struct Schedule {
  enum class Kind { Step, Cosine };
  Kind kind = Kind::Cosine;
  std::vector<std::size_t> milestones;  // step only
  double gamma = 0.1;
};

// --- configuration ------------------------------------------------------------

struct DatasetSpec {
  std::size_t classes = 10;
  std::size_t per_class = 500;
  Shape image{1, 3, 32, 32};  // n is ignored
  std::uint64_t seed = 7;
  double noise = 0.5;

  bool operator==(const DatasetSpec&) const = default;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 50;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  Schedule schedule;
  std::uint64_t seed = 1;
  // Stop once an epoch's train accuracy reaches this value (0 disables).
  double stop_accuracy = 0.0;
  bool hflip = false;
  DatasetSpec dataset;

  double lr_at(std::size_t epoch) const {
    return schedule.kind == Schedule::Kind::Cosine ? cosine_lr(epoch, epochs, lr)
                                                   : step_lr(epoch, lr, schedule.milestones, schedule.gamma);
  }
};

inline void validate(const TrainConfig& c) {
  if (c.epochs == 0) throw ConfigError("train: epochs must be positive");
  if (c.batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ConfigError("train: lr must be positive");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("train: momentum must be in [0, 1)");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be non-negative");
  if (c.dataset.classes < 2) throw ConfigError("train: dataset needs at least 2 classes");
  if (c.dataset.per_class == 0) throw ConfigError("train: dataset per_class must be positive");
}

namespace detail {

inline double parse_real(const nlohmann::json& j, const std::string& where) {
  if (!j.is_number()) throw SpecError(where, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw SpecError(where, "expected a finite number");
  return v;
}

inline void reject_unknown(const nlohmann::json& j, const std::string& base, std::initializer_list<const char*> known) {
  for (const auto& item : j.items()) {
    const std::string& key = item.key();
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
      throw SpecError(base + "/" + key, "unknown field");
    }
  }
}

}  // namespace detail

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json sched{{"kind", c.schedule.kind == Schedule::Kind::Cosine ? "cosine" : "step"}};
  if (c.schedule.kind == Schedule::Kind::Step) {
    sched["milestones"] = c.schedule.milestones;
    sched["gamma"] = c.schedule.gamma;
  }
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"schedule", sched},
          {"seed", c.seed},
          {"stop_accuracy", c.stop_accuracy},
          {"hflip", c.hflip},
          {"dataset",
           {{"classes", c.dataset.classes},
            {"per_class", c.dataset.per_class},
            {"image_shape", {c.dataset.image.c, c.dataset.image.h, c.dataset.image.w}},
            {"seed", c.dataset.seed},
            {"noise", c.dataset.noise}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  using detail::parse_real;
  if (!j.is_object()) throw SpecError("/", "expected a JSON object");
  detail::reject_unknown(j, "", {"epochs", "batch_size", "lr", "momentum", "weight_decay", "schedule", "seed",
                                 "stop_accuracy", "hflip", "dataset"});
  TrainConfig c;
  if (j.contains("epochs")) c.epochs = parse_count(j["epochs"], "/epochs");
  if (j.contains("batch_size")) c.batch_size = parse_count(j["batch_size"], "/batch_size");
  if (j.contains("lr")) c.lr = parse_real(j["lr"], "/lr");
  if (j.contains("momentum")) c.momentum = parse_real(j["momentum"], "/momentum");
  if (j.contains("weight_decay")) c.weight_decay = parse_real(j["weight_decay"], "/weight_decay");
  if (j.contains("seed")) c.seed = parse_count(j["seed"], "/seed");
  if (j.contains("stop_accuracy")) c.stop_accuracy = parse_real(j["stop_accuracy"], "/stop_accuracy");
  if (j.contains("hflip")) {
    if (!j["hflip"].is_boolean()) throw SpecError("/hflip", "expected true or false");
    c.hflip = j["hflip"].get<bool>();
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    if (!s.is_object() || !s.contains("kind")) throw SpecError("/schedule", "expected {\"kind\": \"cosine\"|\"step\"}");
    detail::reject_unknown(s, "/schedule", {"kind", "milestones", "gamma"});
    if (s["kind"] == "cosine") {
      c.schedule.kind = Schedule::Kind::Cosine;
    } else if (s["kind"] == "step") {
      c.schedule.kind = Schedule::Kind::Step;
      if (s.contains("milestones")) c.schedule.milestones = detail::parse_counts(s["milestones"], "/schedule/milestones");
      if (s.contains("gamma")) c.schedule.gamma = parse_real(s["gamma"], "/schedule/gamma");
    } else {
      throw SpecError("/schedule/kind", "expected cosine or step");
    }
  }
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    if (!d.is_object()) throw SpecError("/dataset", "expected an object");
    detail::reject_unknown(d, "/dataset", {"classes", "per_class", "image_shape", "seed", "noise"});
    if (d.contains("classes")) c.dataset.classes = parse_count(d["classes"], "/dataset/classes");
    if (d.contains("per_class")) c.dataset.per_class = parse_count(d["per_class"], "/dataset/per_class");
    if (d.contains("seed")) c.dataset.seed = parse_count(d["seed"], "/dataset/seed");
    if (d.contains("noise")) c.dataset.noise = parse_real(d["noise"], "/dataset/noise");
    if (d.contains("image_shape")) {
      const auto dims = detail::parse_counts(d["image_shape"], "/dataset/image_shape");
      if (dims.size() != 3) throw SpecError("/dataset/image_shape", "expected [C, H, W]");
      c.dataset.image = Shape{1, dims[0], dims[1], dims[2]};
    }
  }
  const std::pair<bool, const char*> checks[] = {
      {c.epochs > 0, "/epochs"},
      {c.batch_size > 0, "/batch_size"},
      {c.lr > 0.0, "/lr"},
      {c.momentum >= 0.0 && c.momentum < 1.0, "/momentum"},
      {c.weight_decay >= 0.0, "/weight_decay"},
      {c.stop_accuracy >= 0.0 && c.stop_accuracy <= 1.0, "/stop_accuracy"},
      {c.dataset.classes >= 2, "/dataset/classes"},
      {c.dataset.per_class > 0, "/dataset/per_class"},
      {c.dataset.noise >= 0.0, "/dataset/noise"},
  };
  for (auto [ok, where] : checks)
    if (!ok) throw SpecError(where, "value out of range");
  return c;
}

// --- synthetic data -----------------------------------------------------------

struct Dataset {
  Tensor<float> images;  // [N, C, H, W]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

// Classes pair a grating orientation with one of two blob colours, so mean
// colour alone separates only the two colour groups and orientation needs
// nonlinear features. Every sample draws its own frequency, phase, contrast,
// blob position and pixel noise. Samples are stored class-interleaved.
inline Dataset make_synthetic(const DatasetSpec& d) {
  if (d.classes < 2 || d.per_class == 0) throw ConfigError("dataset: need >= 2 classes and >= 1 sample per class");
  const std::size_t c = d.image.c, h = d.image.h, w = d.image.w;
  const std::size_t n = d.classes * d.per_class;
  const std::size_t orientations = (d.classes + 1) / 2;
  Dataset out{Tensor<float>(Shape{n, c, h, w}), std::vector<int>(n)};
  std::mt19937_64 rng(d.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<double> colour[2];
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double v = u01(rng) + 0.5;
    colour[0].push_back(ch % 2 == 0 ? v : -v);
    colour[1].push_back(ch % 2 == 0 ? -v : v);
  }

  const double sigma = 0.15;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % d.classes;
    out.labels[i] = static_cast<int>(k);
    const double theta = std::numbers::pi * static_cast<double>(k % orientations) / static_cast<double>(orientations);
    const std::vector<double>& col = colour[k / orientations];
    const double freq = 1.5 + 2.0 * u01(rng);
    const double phase = 2.0 * std::numbers::pi * u01(rng);
    const double contrast = 0.5 + 0.5 * u01(rng);
    const double strength = 0.6 + 0.4 * u01(rng);
    const double bx = 0.2 + 0.6 * u01(rng), by = 0.2 + 0.6 * u01(rng);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
        const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
        const double grating = contrast * std::sin(2.0 * std::numbers::pi * freq * (fx * ct + fy * st) + phase);
        const double r2 = (fx - bx) * (fx - bx) + (fy - by) * (fy - by);
        const double blob = strength * std::exp(-r2 / (2.0 * sigma * sigma));
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double v = grating + col[ch] * blob + d.noise * gauss(rng);
          out.images.at(i, ch, y, x) = static_cast<float>(v);
        }
      }
    }
  }
  return out;
}

// --- optimizer ------------------------------------------------------------------

// Velocity per trainable tensor, keyed by name in store order.
template <typename T>
struct SgdState {
  std::vector<std::pair<std::string, Tensor<T>>> velocity;

  Tensor<T>& slot(const std::string& name, const Shape& s) {
    for (auto& [n, v] : velocity)
      if (n == name) return v;
    velocity.emplace_back(name, Tensor<T>(s));
    return velocity.back().second;
  }
};

// v <- momentum*v + grad + wd*param; param <- param - lr*v.
template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr, double momentum,
              double weight_decay, const std::string& name = "param") {
  if (param.shape() != grad.shape() || param.shape() != velocity.shape()) {
    throw ContractViolation("sgd_step: shape mismatch for '" + name + "'");
  }
  for (std::size_t i = 0; i < param.numel(); ++i) {
    if (!std::isfinite(static_cast<double>(grad[i]))) {
      throw NumericError("sgd_step: non-finite gradient in '" + name + "' at index " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double v = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    velocity[i] = static_cast<T>(v);
    param[i] = static_cast<T>(param[i] - lr * v);
  }
}

template <typename T>
nlohmann::json to_json(const SgdState<T>& s, std::size_t epoch) {
  nlohmann::json v = nlohmann::json::object();
  for (const auto& [name, t] : s.velocity) v[name] = t.values();
  return {{"optimizer", "sgd"}, {"epoch", epoch}, {"velocity", v}};
}

// --- training loop ----------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  double seconds = 0.0;

  const EpochMetrics& last() const { return history.back(); }
};

inline std::string metrics_csv(const TrainResult& r) {
  std::ostringstream os;
  os << "epoch,lr,loss,acc\n";
  os << std::setprecision(9);
  for (const auto& e : r.history) os << e.epoch << "," << e.lr << "," << e.loss << "," << e.accuracy << "\n";
  return os.str();
}

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files
  std::function<void(const EpochMetrics&)> on_epoch;
};

template <typename T>
Tensor<T> gather_batch(const Dataset& d, const std::vector<std::size_t>& order, std::size_t begin, std::size_t count,
                       bool hflip, std::mt19937_64& rng, std::vector<int>& labels) {
  const Shape& s = d.images.shape();
  Tensor<T> batch(Shape{count, s.c, s.h, s.w});
  labels.resize(count);
  const std::size_t per = s.c * s.plane();
  for (std::size_t b = 0; b < count; ++b) {
    const std::size_t i = order[begin + b];
    labels[b] = d.labels[i];
    const bool flip = hflip && (rng() & 1u);
    const float* src = d.images.data() + i * per;
    T* dst = batch.data() + b * per;
    for (std::size_t ch = 0; ch < s.c; ++ch)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x) {
          const std::size_t sx = flip ? s.w - 1 - x : x;
          dst[(ch * s.h + y) * s.w + x] = static_cast<T>(src[(ch * s.h + y) * s.w + sx]);
        }
  }
  return batch;
}

// Mini-batch SGD with cross-entropy. Batches are drawn from a per-epoch
// shuffle seeded by cfg.seed; a trailing partial batch is dropped.
template <typename T>
TrainResult train(Model<T>& m, const Dataset& data, const TrainConfig& cfg, const TrainOptions& opt = {}) {
  validate(cfg);
  if (m.spec.classes != cfg.dataset.classes) {
    throw ConfigError("train: model has " + std::to_string(m.spec.classes) + " classes, dataset has " +
                      std::to_string(cfg.dataset.classes));
  }
  if (data.size() < cfg.batch_size) throw ConfigError("train: dataset is smaller than one batch");
  const auto start = std::chrono::steady_clock::now();
  SgdState<T> state;
  TrainResult result;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  const std::size_t steps = data.size() / cfg.batch_size;
  std::vector<int> labels;

  std::ofstream log;
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    log.open(opt.out_dir / "metrics.csv");
    if (!log) throw IoError("cannot write " + (opt.out_dir / "metrics.csv").string());
    log << "epoch,lr,loss,acc\n" << std::setprecision(9);
  }

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t step = 0; step < steps; ++step) {
      const Tensor<T> batch = gather_batch<T>(data, order, step * cfg.batch_size, cfg.batch_size, cfg.hflip, rng, labels);
      Tape<T> tape;
      ParamBinding<T> p(tape, m.params, true);
      const Var<T> logits = run_graph(p, m.graph, tape.constant(batch), Mode::Train);
      const Var<T> loss = ops::softmax_cross_entropy(tape, logits, labels);
      const double l = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(l)) {
        throw NumericError("train: loss diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      }
      loss_sum += l;
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < m.spec.classes; ++k)
          if (logits.value().at(b, k, 0, 0) > logits.value().at(b, best, 0, 0)) best = k;
        if (static_cast<int>(best) == labels[b]) ++correct;
      }
      tape.backward(loss);
      for (const std::string& name : p.order()) {
        const Var<T>& v = p.var(name);
        if (!v.requires_grad()) continue;
        Tensor<T>& value = m.params.at(name);
        sgd_step(value, tape.grad(v), state.slot(name, value.shape()), lr, cfg.momentum, cfg.weight_decay, name);
      }
    }
    EpochMetrics e{epoch, lr, loss_sum / static_cast<double>(steps),
                   static_cast<double>(correct) / static_cast<double>(steps * cfg.batch_size)};
    result.history.push_back(e);
    if (log) log << e.epoch << "," << e.lr << "," << e.loss << "," << e.accuracy << "\n" << std::flush;
    if (opt.on_epoch) opt.on_epoch(e);
    if (!opt.out_dir.empty()) {
      m.save(opt.out_dir / "checkpoint");
      write_text_file(opt.out_dir / "checkpoint" / "optimizer.json", to_json(state, epoch).dump() + "\n");
    }
    if (cfg.stop_accuracy > 0.0 && e.accuracy >= cfg.stop_accuracy) break;
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace slimconv
