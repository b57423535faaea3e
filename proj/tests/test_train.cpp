// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>

#include "testing.hpp"

using namespace uwfuse;
using namespace uwfuse::testing;

namespace {

TrainConfig tiny_config(Objective obj = Objective::CwganGpL1) {
  TrainConfig c;
  c.objective = obj;
  c.batch_size = 2;
  c.epochs = 100;
  c.seed = 3;
  c.model.variant = GeneratorVariant::Ours;
  c.model.input_size = 8;
  c.model.base_channels = 4;
  c.model.max_channels = 8;
  c.model.disc_layers = 1;
  return c;
}

Dataset tiny_dataset(const fs::path& dir, int count = 6, int size = 8) {
  SynthOptions opt;
  opt.count = count;
  opt.size = size;
  opt.params.seed = 1;
  return load_pairs(synth_dataset(opt, dir), size);
}

std::vector<std::vector<std::string>> read_tsv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& line : text::split(read_file(p), '\n'))
    if (!line.empty()) rows.push_back(text::split(line, '\t'));
  return rows;
}

std::string join_tabs(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "\t" : "") + v[i];
  return out;
}

std::string cli() { return UWFUSE_CLI_PATH; }

int run(const std::string& cmd) { return std::system((cmd + " >/dev/null 2>&1").c_str()); }

}  // namespace

TEST(Train, SameSeedBitIdentical) {
  TempDir dir;
  const Dataset data = tiny_dataset(dir.path());
  TrainConfig cfg = tiny_config();
  cfg.max_steps = 6;
  TrainState a(cfg), b(cfg);
  train(a, data);
  train(b, data);
  EXPECT_EQ(a.step, 6);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(encode_checkpoint(a), encode_checkpoint(b));
  cfg.seed = 4;
  TrainState c(cfg);
  train(c, data);
  EXPECT_FALSE(a.generator.params() == c.generator.params());
}

TEST(Train, ResumeIsBitExact) {
  TempDir dir;
  const Dataset data = tiny_dataset(dir.path() / "data");
  TrainConfig cfg = tiny_config();
  cfg.critic_steps = 2;
  TrainState straight(cfg);
  Trainer ts(straight, data);
  std::vector<StepLog> want;
  for (int i = 0; i < 22; ++i) want.push_back(ts.iteration());

  TrainState first(cfg);
  Trainer tf(first, data);
  for (int i = 0; i < 10; ++i) tf.iteration();
  save_checkpoint(dir.path() / "ck.bin", first);
  TrainState resumed = load_checkpoint(dir.path() / "ck.bin");
  EXPECT_TRUE(resumed == first);
  Trainer tr(resumed, data);
  for (int i = 10; i < 22; ++i) {
    const StepLog l = tr.iteration();
    EXPECT_EQ(l.step, want[static_cast<std::size_t>(i)].step);
    EXPECT_EQ(l.d_loss, want[static_cast<std::size_t>(i)].d_loss) << i;
    EXPECT_EQ(l.g_total, want[static_cast<std::size_t>(i)].g_total) << i;
  }
  EXPECT_TRUE(resumed == straight);
}

TEST(Train, ResumedRunWritesTheSameLogs) {
  TempDir dir;
  const Dataset data = tiny_dataset(dir.path() / "data");
  TrainConfig cfg = tiny_config();
  cfg.max_steps = 14;
  TrainState a(cfg);
  train(a, data, TrainOptions{dir.path() / "a"});

  TrainConfig short_cfg = cfg;
  short_cfg.max_steps = 6;
  TrainState b(short_cfg);
  train(b, data, TrainOptions{dir.path() / "b"});
  TrainState c = load_checkpoint(dir.path() / "b" / "checkpoint.bin");
  c.config.max_steps = 14;
  train(c, data, TrainOptions{dir.path() / "b", true});
  EXPECT_EQ(read_file(dir.path() / "a" / "loss.tsv"), read_file(dir.path() / "b" / "loss.tsv"));
  EXPECT_EQ(read_file(dir.path() / "a" / "critic.tsv"), read_file(dir.path() / "b" / "critic.tsv"));
  EXPECT_TRUE(a.generator.params() == c.generator.params());
  EXPECT_TRUE(a.adam_d == c.adam_d);
}

TEST(Train, CriticAndGeneratorStepsAreIsolated) {
  TempDir dir;
  const Dataset data = tiny_dataset(dir.path());
  TrainState s(tiny_config());
  Trainer t(s, data);
  auto [x, y] = t.batch(0);
  const ParameterStore g0 = s.generator.params(), d0 = s.discriminator.params();
  t.critic_step(x, y, std::vector<float>{0.3f, 0.6f});
  EXPECT_TRUE(s.generator.params() == g0);
  EXPECT_FALSE(s.discriminator.params() == d0);
  EXPECT_EQ(s.adam_g.step, 0);
  const ParameterStore d1 = s.discriminator.params();
  t.generator_step(x, y);
  EXPECT_TRUE(s.discriminator.params() == d1);
  EXPECT_FALSE(s.generator.params() == g0);
  EXPECT_EQ(s.adam_d.step, 1);
}

TEST(Train, MseObjectiveNeverTouchesTheCritic) {
  TempDir dir;
  const Dataset data = tiny_dataset(dir.path());
  TrainConfig cfg = tiny_config(Objective::MseOnly);
  cfg.max_steps = 5;
  TrainState s(cfg);
  const ParameterStore d0 = s.discriminator.params();
  train(s, data, TrainOptions{dir.path() / "run"});
  EXPECT_TRUE(s.discriminator.params() == d0);
  EXPECT_EQ(s.adam_d.step, 0);
  const auto rows = read_tsv(dir.path() / "run" / "loss.tsv");
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i][1], "0");
    EXPECT_NE(rows[i][4], "0");
  }
}

TEST(Train, LoggedTotalsEqualTheirComponents) {
  TempDir dir;
  const Dataset data = tiny_dataset(dir.path());
  TrainConfig cfg = tiny_config();
  cfg.max_steps = 12;
  TrainState s(cfg);
  train(s, data, TrainOptions{dir.path() / "run"});
  const auto loss = read_tsv(dir.path() / "run" / "loss.tsv");
  const auto critic = read_tsv(dir.path() / "run" / "critic.tsv");
  ASSERT_EQ(loss.size(), 13u);
  ASSERT_EQ(critic.size(), 13u);
  EXPECT_EQ(join_tabs(loss[0]), kLossLogHeader);
  EXPECT_EQ(join_tabs(critic[0]), kCriticLogHeader);
  auto f = [](const std::string& v) { return text::parse<float>(v, "log"); };
  for (std::size_t i = 1; i < loss.size(); ++i) {
    const float adv = f(loss[i][2]), l1 = f(loss[i][3]), total = f(loss[i][4]);
    EXPECT_EQ(total, adv + 10.0f * l1) << "step " << loss[i][0];
    const float real = f(critic[i][1]), fake = f(critic[i][2]), gp = f(critic[i][3]), d = f(critic[i][4]);
    EXPECT_EQ(d, (fake - real) + 10.0f * gp) << "step " << critic[i][0];
    EXPECT_EQ(critic[i][4], loss[i][1]);
  }
}

TEST(Train, MemorizesASinglePair) {
  TempDir dir;
  Dataset one = tiny_dataset(dir.path(), 1);
  one.pairs[0].y = one.pairs[0].x;
  int decreasing = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TrainConfig cfg = tiny_config(Objective::MseOnly);
    cfg.batch_size = 1;
    cfg.max_steps = 50;
    cfg.seed = seed;
    TrainState s(cfg);
    const auto logs = train(s, one);
    ASSERT_EQ(logs.size(), 50u);
    if (logs.back().g_total <= logs.front().g_total) ++decreasing;
  }
  EXPECT_GE(decreasing, 9);
}

TEST(Train, TrainedModelBeatsIdentityOnTrainingPairs) {
  TempDir dir;
  const Dataset data = tiny_dataset(dir.path(), 8, 16);
  TrainConfig cfg = tiny_config(Objective::MseOnly);
  cfg.model.variant = GeneratorVariant::G2;
  cfg.model.input_size = 16;
  cfg.model.base_channels = 8;
  cfg.lr = 2e-3f;
  cfg.max_steps = 300;
  TrainState s(cfg);
  train(s, data);
  EXPECT_GT(evaluate(s.generator, data).mean_psnr(), evaluate_identity(data).mean_psnr());
}

TEST(Train, EvaluateChecksInputs) {
  TempDir dir;
  // SSIM needs at least 11x11.
  const Dataset data = tiny_dataset(dir.path(), 3, 16);
  TrainConfig cfg = tiny_config();
  cfg.model.input_size = 16;
  TrainState s(cfg);
  EXPECT_THROW(evaluate(s.generator, Dataset{}), Error);
  EXPECT_THROW(evaluate(s.generator, tiny_dataset(dir.path() / "big", 2, 32)), Error);
  const MetricReport r = evaluate(s.generator, data, dir.path() / "out");
  EXPECT_EQ(r.count(), data.pairs.size());
  EXPECT_TRUE(fs::exists(dir.path() / "out" / (data.pairs[0].id + ".png")));
}

TEST(Train, TrainRejectsBadInputs) {
  TempDir dir;
  const Dataset data = tiny_dataset(dir.path());
  TrainConfig cfg = tiny_config();
  cfg.batch_size = 7;
  TrainState s(cfg);
  EXPECT_THROW(train(s, data), Error);
  TrainState t(tiny_config());
  EXPECT_THROW(train(t, Dataset{}), Error);
}

TEST(Train, NonFiniteLossAbortsNamingTheTerm) {
  TempDir dir;
  const Dataset data = tiny_dataset(dir.path());
  for (Objective obj : {Objective::MseOnly, Objective::CwganGpL1}) {
    TrainState s(tiny_config(obj));
    s.generator.params().mutable_values()[0].mutable_data()[0] = std::nanf("");
    Trainer t(s, data);
    try {
      t.iteration();
      ADD_FAILURE() << "expected an abort";
    } catch (const Error& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find(obj == Objective::MseOnly ? "'mse'" : "'d_fake'"), std::string::npos) << msg;
      EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    }
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  const Dataset data = tiny_dataset(dir.path());
  TrainConfig cfg = tiny_config();
  cfg.max_steps = 3;
  cfg.lambda_l1 = 7.5f;
  TrainState s(cfg);
  train(s, data);
  save_checkpoint(dir.path() / "ck.bin", s);
  const TrainState back = load_checkpoint(dir.path() / "ck.bin");
  EXPECT_TRUE(back == s);
  EXPECT_EQ(back.config, s.config);
  EXPECT_EQ(encode_checkpoint(back), read_file(dir.path() / "ck.bin"));
  EXPECT_FALSE(fs::exists(dir.path() / "ck.bin.tmp"));
}

TEST(Checkpoint, TensorNamesDependOnConfigOnly) {
  TrainConfig cfg = tiny_config();
  TrainState a(cfg);
  cfg.seed = 99;
  cfg.lr = 1e-3f;
  TrainState b(cfg);
  EXPECT_EQ(a.generator.params().names(), b.generator.params().names());
  EXPECT_EQ(encode_checkpoint(a).size() - checkpoint_config_text(a).size(),
            encode_checkpoint(b).size() - checkpoint_config_text(b).size());
}

TEST(Checkpoint, RejectsCorruptAndMismatchedFiles) {
  TrainState small(tiny_config());
  TrainConfig wide_cfg = tiny_config();
  wide_cfg.model.base_channels = 8;
  TrainState wide(wide_cfg);
  const std::string good = encode_checkpoint(small);

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic, "t"), Error);
  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 3), "t"), Error);
  EXPECT_THROW(decode_checkpoint(good + "x", "t"), Error);

  // Initialization convention is part of the metadata; same-length edit.
  const std::size_t at = good.find("normal(0, 0.02)");
  ASSERT_NE(at, std::string::npos);
  std::string other_init = good;
  other_init.replace(at, 15, "normal(0, 0.05)");
  EXPECT_THROW(decode_checkpoint(other_init, "t"), Error);

  // Header of the small config, tensors of the wide one.
  const std::string header = encode_checkpoint(small).substr(0, 8 + 4 + 4 + checkpoint_config_text(small).size());
  const std::string wide_bytes = encode_checkpoint(wide);
  const std::string wide_tail = wide_bytes.substr(8 + 4 + 4 + checkpoint_config_text(wide).size());
  try {
    decode_checkpoint(header + wide_tail, "mixed");
    ADD_FAILURE() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("shape"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_checkpoint("/nonexistent/ck.bin"), Error);
}

TEST(Infer, OutputSizeAndDeterminism) {
  TempDir dir;
  TrainState s(tiny_config());
  save_checkpoint(dir.path() / "ck.bin", s);
  std::mt19937_64 rng(1);
  write_png(dir.path() / "in.png", procedural_texture(20, rng));
  infer(dir.path() / "ck.bin", dir.path() / "in.png", dir.path() / "a.png");
  infer(dir.path() / "ck.bin", dir.path() / "in.png", dir.path() / "b.png");
  const Image out = read_png(dir.path() / "a.png");
  EXPECT_EQ(out.height, 8);
  EXPECT_EQ(out.width, 8);
  EXPECT_EQ(read_file(dir.path() / "a.png"), read_file(dir.path() / "b.png"));
  EXPECT_THROW(infer(dir.path() / "ck.bin", dir.path() / "missing.png", dir.path() / "c.png"), Error);
}

TEST(Ablation, TableHasSixRowsAndReferenceFooter) {
  TempDir dir;
  const Dataset data = tiny_dataset(dir.path() / "data", 8, 16);
  AblationOptions opt;
  opt.base = tiny_config(Objective::MseOnly);
  opt.base.model.input_size = 16;
  opt.base.max_steps = 2;
  opt.seeds = {0, 1};
  opt.out_dir = dir.path() / "abl";
  const auto rows = ablate(data, opt);
  ASSERT_EQ(rows.size(), 6u);
  for (const auto& r : rows) EXPECT_EQ(r.seed_mse.size(), 2u);
  const auto lines = text::split(read_file(dir.path() / "abl" / "ablation.tsv"), '\n');
  EXPECT_EQ(lines[0], "variant\tpsnr\tmse");
  for (int i = 1; i <= 6; ++i) EXPECT_EQ(text::split(lines[static_cast<std::size_t>(i)], '\t').size(), 3u);
  const std::string all = read_file(dir.path() / "abl" / "ablation.tsv");
  EXPECT_NE(all.find("not a desk-scale target"), std::string::npos);
  EXPECT_NE(all.find("22.6"), std::string::npos);
  EXPECT_NE(all.find("0.0055"), std::string::npos);
  EXPECT_NE(all.find("18.11"), std::string::npos);
  EXPECT_NE(all.find("0.016"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir.path() / "abl" / "curves.tsv"));
}

TEST(Ablation, MedianOfOddAndEvenCounts) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
}

TEST(Config, KeyValueRoundTripAndUnknownKeys) {
  TrainConfig c = tiny_config();
  c.lr = 1.5e-4f;
  c.critic_steps = 5;
  EXPECT_EQ(parse_train_config(serialize(c)), c);
  EXPECT_THROW(parse_train_config("no_such_key = 1\n"), Error);
  EXPECT_THROW(parse_train_config("critic_steps = 0\n"), Error);
  EXPECT_THROW(parse_train_config("objective = gan\n"), Error);
}

TEST(Config, DefaultsMatchPublishedSettings) {
  const TrainConfig c;
  EXPECT_EQ(c.lambda_gp, 10.0f);
  EXPECT_EQ(c.lambda_l1, 10.0f);
  EXPECT_EQ(c.lr, 0.0002f);
  EXPECT_EQ(c.beta1, 0.5f);
  EXPECT_EQ(c.beta2, 0.999f);
  EXPECT_EQ(c.batch_size, 1);
  EXPECT_EQ(c.epochs, 50);
  EXPECT_EQ(c.critic_steps, 1);
  EXPECT_EQ(c.objective, Objective::CwganGpL1);
}

TEST(Cli, FlagsOverrideConfigFile) {
  TempDir dir;
  const std::string d = dir.path().string();
  ASSERT_EQ(run(cli() + " synth --out " + d + "/data --count 4 --size 16 --seed 2"), 0);
  {
    std::ofstream f(dir.path() / "cfg.txt");
    f << "# tiny run\nepochs = 1\nlr = 0.001\nbatch_size = 2\ninput_size = 16\nbase_channels = 4\n"
         "max_channels = 8\ndisc_layers = 1\nobjective = mse_only\n";
  }
  ASSERT_EQ(run(cli() + " train --config " + d + "/cfg.txt --lr 0.002 --manifest " + d + "/data/manifest.tsv --out " +
                d + "/run"),
            0);
  const TrainState s = load_checkpoint(dir.path() / "run" / "checkpoint.bin");
  EXPECT_EQ(s.config.lr, 0.002f);
  EXPECT_EQ(s.config.epochs, 1);
  EXPECT_EQ(s.config.objective, Objective::MseOnly);
  EXPECT_EQ(s.step, 2);
  EXPECT_EQ(read_tsv(dir.path() / "run" / "loss.tsv").size(), 3u);

  ASSERT_EQ(run(cli() + " eval --checkpoint " + d + "/run/checkpoint.bin --manifest " + d +
                "/data/manifest.tsv --report " + d + "/r.tsv --baseline " + d + "/b.tsv"),
            0);
  EXPECT_EQ(read_tsv(dir.path() / "r.tsv").size(), 6u);
  EXPECT_TRUE(fs::exists(dir.path() / "b.tsv"));

  EXPECT_NE(run(cli() + " train --config " + d + "/cfg.txt --bogus 1 --manifest x --out y"), 0);
  EXPECT_NE(run(cli() + " train --manifest " + d + "/missing.tsv --out " + d + "/run2"), 0);
}
