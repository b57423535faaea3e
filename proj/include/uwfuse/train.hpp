// SPDX-License-Identifier: Apache-2.0
//
// Training loop, evaluation, ablation runner and single-image inference.
//
// Batch k of the run is drawn from epoch k / B at position k % B, where B is
// the number of full batches per epoch and each epoch uses a seeded
// permutation. All randomness is a function of (seed, step), so a resumed run
// needs nothing but the global step to continue bit-identically.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "uwfuse/checkpoint.hpp"
#include "uwfuse/data.hpp"
#include "uwfuse/losses.hpp"
#include "uwfuse/metrics.hpp"

namespace uwfuse {

struct CriticStats {
  float real = 0.0f;
  float fake = 0.0f;
  float penalty = 0.0f;
  float total = 0.0f;
};

struct GeneratorStats {
  float adv = 0.0f;
  float l1 = 0.0f;
  float total = 0.0f;
};

/// One logged training iteration.
struct StepLog {
  std::int64_t step = 0;
  float d_loss = 0.0f;
  float g_adv = 0.0f;
  float g_l1 = 0.0f;
  float g_total = 0.0f;
  float d_real = 0.0f;
  float d_fake = 0.0f;
  float gp = 0.0f;
};

namespace detail {

inline void check_finite(float v, const char* who, const char* term, std::int64_t step) {
  if (!std::isfinite(v))
    throw Error(std::string("non-finite ") + who + " loss term '" + term + "' (" + text::format(v) +
                ") at step " + std::to_string(step));
}

}  // namespace detail

/// Applies critic and generator updates to a TrainState over a fixed dataset.
class Trainer {
 public:
  Trainer(TrainState& state, const Dataset& data) : s_(state), data_(data) {
    s_.config.validate();
    const auto n = data.pairs.size();
    if (n == 0) throw Error("train: dataset is empty");
    if (n < static_cast<std::size_t>(s_.config.batch_size))
      throw Error("train: " + std::to_string(n) + " pairs is fewer than batch_size " +
                  std::to_string(s_.config.batch_size));
    if (data.size != s_.config.model.input_size)
      throw Error("train: dataset resized to " + std::to_string(data.size) + " but model input_size is " +
                  std::to_string(s_.config.model.input_size));
  }

  std::int64_t batches_per_epoch() const {
    return static_cast<std::int64_t>(data_.pairs.size()) / s_.config.batch_size;
  }

  std::int64_t batches_per_iteration() const {
    return s_.config.objective == Objective::MseOnly ? 1 : s_.config.critic_steps;
  }

  std::int64_t total_iterations() const {
    const std::int64_t full = s_.config.epochs * batches_per_epoch() / batches_per_iteration();
    return s_.config.max_steps > 0 ? std::min(full, s_.config.max_steps) : full;
  }

  /// Epoch containing the first batch of iteration `t`.
  std::int64_t epoch_of(std::int64_t t) const { return t * batches_per_iteration() / batches_per_epoch(); }

  std::pair<Tensor, Tensor> batch(std::int64_t k) const {
    const std::int64_t bpe = batches_per_epoch();
    const auto perm = epoch_permutation(data_.pairs.size(), s_.config.seed, static_cast<std::uint64_t>(k / bpe));
    const auto b = static_cast<std::size_t>(s_.config.batch_size);
    const auto start = static_cast<std::size_t>(k % bpe) * b;
    return make_batch(data_, std::span<const std::size_t>(perm.data() + start, b));
  }

  /// One critic update on (x, y) against the current generator's output.
  CriticStats critic_step(const Tensor& x, const Tensor& y, std::span<const float> eps) {
    Tape tape;
    BoundParams pd(s_.discriminator.params(), &tape);
    const Tensor gx = s_.generator(x);
    auto critic = [&](const Tensor& c, const Tensor& cand) { return s_.discriminator.forward(pd, c, cand); };
    CriticLoss loss = critic_loss(tape, critic, x, y, gx, weights(), eps);
    CriticStats st{loss.real.item(), loss.fake.item(), loss.penalty.item(), loss.total.item()};
    detail::check_finite(st.real, "critic", "d_real", s_.step);
    detail::check_finite(st.fake, "critic", "d_fake", s_.step);
    detail::check_finite(st.penalty, "critic", "gp", s_.step);
    detail::check_finite(st.total, "critic", "d_loss", s_.step);
    const auto grads = tape.grad(loss.total, pd.tensors());
    adam_step(s_.adam_d, s_.discriminator.params(), grads);
    return st;
  }

  /// One generator update; the critic is held constant.
  GeneratorStats generator_step(const Tensor& x, const Tensor& y) {
    Tape tape;
    BoundParams pg(s_.generator.params(), &tape);
    const Tensor gx = s_.generator.forward(pg, x);
    GeneratorStats st;
    Tensor total;
    if (s_.config.objective == Objective::MseOnly) {
      total = mse_loss(gx, y);
      st.total = total.item();
      detail::check_finite(st.total, "generator", "mse", s_.step);
    } else {
      BoundParams pd(s_.discriminator.params(), nullptr);
      auto critic = [&](const Tensor& c, const Tensor& cand) { return s_.discriminator.forward(pd, c, cand); };
      GeneratorLoss loss = generator_loss(critic, x, y, gx, weights());
      st = {loss.adv.item(), loss.l1.item(), loss.total.item()};
      detail::check_finite(st.adv, "generator", "g_adv", s_.step);
      detail::check_finite(st.l1, "generator", "g_l1", s_.step);
      detail::check_finite(st.total, "generator", "g_total", s_.step);
      total = loss.total;
    }
    const auto grads = tape.grad(total, pg.tensors());
    adam_step(s_.adam_g, s_.generator.params(), grads);
    return st;
  }

  /// Runs iteration `state.step` and advances the step counter.
  StepLog iteration() {
    const std::int64_t t = s_.step;
    const std::int64_t first = t * batches_per_iteration();
    StepLog log;
    log.step = t;
    if (s_.config.objective == Objective::MseOnly) {
      auto [x, y] = batch(first);
      log.g_total = generator_step(x, y).total;
    } else {
      Tensor x, y;
      for (int c = 0; c < s_.config.critic_steps; ++c) {
        std::tie(x, y) = batch(first + c);
        std::mt19937_64 rng(mix_seed(s_.config.seed, 0x6770, static_cast<std::uint64_t>(first + c)));
        const auto eps = draw_interpolation_weights(x.dim(0), rng);
        const CriticStats cs = critic_step(x, y, eps);
        log.d_loss = cs.total;
        log.d_real = cs.real;
        log.d_fake = cs.fake;
        log.gp = cs.penalty;
      }
      const GeneratorStats gs = generator_step(x, y);
      log.g_adv = gs.adv;
      log.g_l1 = gs.l1;
      log.g_total = gs.total;
    }
    s_.step = t + 1;
    return log;
  }

 private:
  LossWeights weights() const { return LossWeights{s_.config.lambda_gp, s_.config.lambda_l1}; }

  TrainState& s_;
  const Dataset& data_;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  bool append_logs = false;       // continue existing loss logs (resume)
  std::int64_t progress_every = 0;
  std::function<void(std::int64_t epoch, const TrainState&)> on_epoch;
};

inline constexpr const char* kLossLogHeader = "step\td_loss\tg_adv\tg_l1\tg_total";
inline constexpr const char* kCriticLogHeader = "step\td_real\td_fake\tgp\td_loss";

/// Runs `state` forward to the configured number of iterations, writing
/// `loss.tsv`, `critic.tsv` and `checkpoint.bin` under `opt.out_dir`. The
/// checkpoint is refreshed at every epoch boundary and at the end.
inline std::vector<StepLog> train(TrainState& state, const Dataset& data, const TrainOptions& opt = {}) {
  Trainer trainer(state, data);
  const bool files = !opt.out_dir.empty();
  std::ofstream loss_log, critic_log;
  if (files) {
    std::filesystem::create_directories(opt.out_dir);
    const auto mode = std::ios::binary | (opt.append_logs ? std::ios::app : std::ios::trunc);
    loss_log.open(opt.out_dir / "loss.tsv", mode);
    critic_log.open(opt.out_dir / "critic.tsv", mode);
    if (!loss_log || !critic_log) throw Error("cannot open loss logs under '" + opt.out_dir.string() + "'");
    if (!opt.append_logs) {
      loss_log << kLossLogHeader << '\n';
      critic_log << kCriticLogHeader << '\n';
    }
  }
  std::vector<StepLog> logs;
  const std::int64_t total = trainer.total_iterations();
  while (state.step < total) {
    const StepLog l = trainer.iteration();
    logs.push_back(l);
    if (files) {
      using text::format;
      loss_log << l.step << '\t' << format(l.d_loss) << '\t' << format(l.g_adv) << '\t' << format(l.g_l1) << '\t'
               << format(l.g_total) << '\n';
      if (state.config.objective == Objective::CwganGpL1)
        critic_log << l.step << '\t' << format(l.d_real) << '\t' << format(l.d_fake) << '\t' << format(l.gp)
                   << '\t' << format(l.d_loss) << '\n';
      if (!loss_log || !critic_log) throw Error("failed writing loss logs (disk full?)");
    }
    if (opt.progress_every > 0 && (state.step % opt.progress_every == 0 || state.step == total))
      std::cerr << "step " << state.step << "/" << total << "  d_loss " << l.d_loss << "  g_total " << l.g_total
                << "\n";
    const bool epoch_end = state.step == total || trainer.epoch_of(state.step) != trainer.epoch_of(l.step);
    if (epoch_end) {
      if (files) {
        loss_log.flush();
        critic_log.flush();
        save_checkpoint(opt.out_dir / "checkpoint.bin", state);
      }
      if (opt.on_epoch) opt.on_epoch(trainer.epoch_of(l.step), state);
    }
  }
  if (files && logs.empty()) save_checkpoint(opt.out_dir / "checkpoint.bin", state);
  return logs;
}

// ---------------------------------------------------------------------------

/// Runs the generator over every pair and scores G(x) against y in [0, 1].
/// Output images are written as `<id>.png` under `image_dir` when given.
inline MetricReport evaluate(const Generator& g, const Dataset& data,
                             const std::filesystem::path& image_dir = {}) {
  if (data.pairs.empty()) throw Error("evaluate: no pairs to evaluate");
  const int S = g.config().input_size;
  if (data.size != S)
    throw Error("evaluate: dataset resized to " + std::to_string(data.size) + " but model input_size is " +
                std::to_string(S));
  if (!image_dir.empty()) std::filesystem::create_directories(image_dir);
  MetricReport r;
  for (const ImagePair& p : data.pairs) {
    const Tensor out = g(p.x.reshaped_value({1, 3, S, S}));
    const Image img = from_normalized_tensor(out, 0);
    r.add(p.id, img, from_normalized_tensor(p.y));
    if (!image_dir.empty()) write_png(image_dir / (p.id + ".png"), img);
  }
  return r;
}

/// Scores the degraded input itself (G(x) = x).
inline MetricReport evaluate_identity(const Dataset& data) {
  if (data.pairs.empty()) throw Error("evaluate: no pairs to evaluate");
  MetricReport r;
  for (const ImagePair& p : data.pairs) r.add(p.id, from_normalized_tensor(p.x), from_normalized_tensor(p.y));
  return r;
}

/// Resizes, normalizes and enhances one image file.
inline Image enhance(const Generator& g, const Image& input) {
  const int S = g.config().input_size;
  const Image resized = resize_bilinear(input, S, S);
  return from_normalized_tensor(g(to_normalized_tensor(resized).reshaped_value({1, 3, S, S})), 0);
}

inline void infer(const std::filesystem::path& checkpoint, const std::filesystem::path& input,
                  const std::filesystem::path& output) {
  const TrainState s = load_checkpoint(checkpoint);
  write_png(output, enhance(s.generator, read_png(input)));
}

// ---------------------------------------------------------------------------

struct AblationRow {
  GeneratorVariant variant;
  double psnr = 0.0;  // median over seeds of held-out mean PSNR
  double mse = 0.0;
  std::vector<double> seed_psnr;
  std::vector<double> seed_mse;
};

struct AblationOptions {
  TrainConfig base;  // objective and variant are overridden per run
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out_dir;
  bool progress = false;
};

struct FullScaleRow {
  GeneratorVariant variant;
  double psnr;
  double mse;
};

/// Full-scale results for the six generator structures (256x256, 512 pairs,
/// batch 8, 100 epochs). Documentation only.
inline constexpr std::array<FullScaleRow, 6> kFullScaleReference{{
    {GeneratorVariant::G2, 16.78, 0.022},
    {GeneratorVariant::UNet, 18.11, 0.016},
    {GeneratorVariant::UNetRB, 18.85, 0.013},
    {GeneratorVariant::UNetGF, 20.46, 0.0091},
    {GeneratorVariant::OursNoGF, 21.82, 0.0068},
    {GeneratorVariant::Ours, 22.60, 0.0055},
}};

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline void write_ablation_table(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "variant\tpsnr\tmse\n";
  for (const AblationRow& r : rows)
    out << variant_label(r.variant) << '\t' << text::format(r.psnr) << '\t' << text::format(r.mse) << '\n';
  out << "# full-scale reference (256x256, 512 pairs, 100 epochs); not a desk-scale target\n";
  for (const FullScaleRow& p : kFullScaleReference)
    out << "# " << variant_label(p.variant) << '\t' << text::format(p.psnr) << '\t' << text::format(p.mse) << '\n';
  out.flush();
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

/// Trains every generator variant with the MSE objective on identical data
/// and seeds, scores each on the held-out split, and writes `ablation.tsv`
/// (medians over seeds) plus `curves.tsv` (per-epoch held-out PSNR/MSE).
inline std::vector<AblationRow> ablate(const Dataset& data, const AblationOptions& opt) {
  if (opt.seeds.empty()) throw Error("ablate: no seeds given");
  if (data.pairs.size() < static_cast<std::size_t>(opt.base.batch_size))
    throw Error("ablate: " + std::to_string(data.pairs.size()) + " pairs is fewer than batch_size " +
                std::to_string(opt.base.batch_size));
  const bool files = !opt.out_dir.empty();
  std::ofstream curves;
  if (files) {
    std::filesystem::create_directories(opt.out_dir);
    curves.open(opt.out_dir / "curves.tsv", std::ios::binary | std::ios::trunc);
    if (!curves) throw Error("cannot write curves under '" + opt.out_dir.string() + "'");
    curves << "seed\tvariant\tepoch\ttrain_mse\theldout_psnr\theldout_mse\n";
  }
  std::vector<AblationRow> rows;
  for (GeneratorVariant v : kAllVariants) rows.push_back(AblationRow{v});
  for (std::uint64_t seed : opt.seeds) {
    const auto [train_idx, test_idx] = holdout_split(data.pairs.size(), seed);
    const Dataset train_set = data.subset(train_idx);
    const Dataset test_set = data.subset(test_idx);
    for (AblationRow& row : rows) {
      TrainConfig cfg = opt.base;
      cfg.seed = seed;
      cfg.objective = Objective::MseOnly;
      cfg.model.variant = row.variant;
      TrainState state(cfg);
      std::vector<double> epoch_loss;
      auto on_epoch = [&](std::int64_t epoch, const TrainState& s) {
        const MetricReport r = evaluate(s.generator, test_set);
        double train_mse = 0.0;
        for (double l : epoch_loss) train_mse += l;
        train_mse = epoch_loss.empty() ? 0.0 : train_mse / static_cast<double>(epoch_loss.size());
        epoch_loss.clear();
        if (files)
          curves << seed << '\t' << variant_name(row.variant) << '\t' << epoch << '\t' << text::format(train_mse)
                 << '\t' << text::format(r.mean_psnr()) << '\t' << text::format(r.mean_mse()) << '\n';
      };
      Trainer trainer(state, train_set);
      while (state.step < trainer.total_iterations()) {
        const std::int64_t before = state.step;
        epoch_loss.push_back(trainer.iteration().g_total);
        if (state.step == trainer.total_iterations() || trainer.epoch_of(state.step) != trainer.epoch_of(before))
          on_epoch(trainer.epoch_of(before), state);
      }
      const MetricReport r = evaluate(state.generator, test_set);
      row.seed_psnr.push_back(r.mean_psnr());
      row.seed_mse.push_back(r.mean_mse());
      if (opt.progress)
        std::cerr << "seed " << seed << "  " << variant_label(row.variant) << "  psnr " << r.mean_psnr()
                  << "  mse " << r.mean_mse() << "\n";
    }
  }
  for (AblationRow& row : rows) {
    row.psnr = median(row.seed_psnr);
    row.mse = median(row.seed_mse);
  }
  if (files) {
    curves.flush();
    if (!curves) throw Error("failed writing curves (disk full?)");
    write_ablation_table(opt.out_dir / "ablation.tsv", rows);
  }
  return rows;
}

}  // namespace uwfuse
