#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "knnfuse/encoder.hpp"
#include "test_support.hpp"

using namespace knnfuse;
using Catch::Matchers::ContainsSubstring;

namespace {

EncoderConfig micro_cfg() {
  EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.ffn_dim = 12;
  cfg.vocab = 5;
  cfg.d_value = 6;
  cfg.fusion_m = 2;
  cfg.fusion_at = {2};
  cfg.seed = 7;
  return cfg;
}

// Small one-hot-valued memory; the last entry's key sits far away so no
// query ever retrieves it.
struct MicroSource {
  ValueEmbedder values;
  ExternalMemory mem;
  ExactIndex exact;
  RetrievalHandle handle;

  MicroSource(int d_model, int d_value, size_t n_entries, uint64_t seed)
      : values(ValueEmbedder::one_hot(n_entries, static_cast<size_t>(d_value), seed)),
        mem(static_cast<size_t>(d_model), static_cast<size_t>(d_value)),
        exact(mem) {
    Rng rng(mix64(seed, fnv1a("micro-keys")));
    for (uint64_t id = 0; id < n_entries; ++id) {
      MemoryRecord rec;
      rec.id = id;
      rec.entry_id = id;
      rec.key.resize(static_cast<size_t>(d_model));
      for (float& x : rec.key) x = static_cast<float>(rng.normal());
      if (id + 1 == n_entries) {
        for (float& x : rec.key) x += 1000.0f;
      }
      CatalogEntry entry;
      entry.id = id;
      rec.value = values.embed(entry);
      mem.append(std::move(rec));
    }
    handle.memory = &mem;
    handle.exact = &exact;
  }
};

std::vector<RenderedUtt> random_utts(size_t n, int t, int d, int vocab, uint64_t seed) {
  Rng rng(mix64(seed, fnv1a("encoder-test-utts")));
  std::vector<RenderedUtt> out;
  for (size_t u = 0; u < n; ++u) {
    RenderedUtt utt;
    utt.frames.resize(t, d);
    for (int i = 0; i < t; ++i) {
      for (int j = 0; j < d; ++j) utt.frames(i, j) = rng.normal();
    }
    utt.labels.resize(static_cast<size_t>(t));
    for (int& l : utt.labels) l = static_cast<int>(rng.next_below(static_cast<uint64_t>(vocab)));
    utt.frame_word.assign(static_cast<size_t>(t), 0);
    utt.voice = 0;
    out.push_back(std::move(utt));
  }
  return out;
}

}  // namespace

TEST_CASE("encoder config validation rejects bad shapes and sites", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  CHECK_NOTHROW(cfg.validate());

  EncoderConfig bad = cfg;
  bad.fusion_at = {0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.fusion_at = {3};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.fusion_at = {1, 1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.fusion_at = {2, 1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.dropout = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.vocab = 513;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.vocab = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.n_layers = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.fusion_m = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("initialization is seeded and sized by the layout", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  EncoderModel a = init_encoder(cfg);
  EncoderModel b = init_encoder(cfg);
  CHECK(a.params.size() == b.params.size());
  CHECK(a.params == b.params);
  CHECK(a.n_params() == a.layout.total);

  cfg.seed = 8;
  EncoderModel c = init_encoder(cfg);
  CHECK(a.params != c.params);

  // fusion-site query projections start at identity
  const auto& ss = a.layout.sites.at(0);
  Eigen::MatrixXd w_q = knnfuse::detail::slot_mat(a.params, ss.w_q);
  CHECK(w_q.isIdentity(0.0));
}

TEST_CASE("forward produces finite logits of the right shape", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  EncoderModel model = init_encoder(cfg);
  MicroSource src(cfg.d_model, cfg.d_value, 5, 21);
  auto utts = random_utts(1, 6, cfg.d_model, cfg.vocab, 3);

  Eigen::MatrixXd logits = encoder_forward(model, utts[0].frames, &src.handle);
  CHECK(logits.rows() == 6);
  CHECK(logits.cols() == cfg.vocab);
  CHECK(logits.allFinite());

  // repeated calls share no state
  Eigen::MatrixXd again = encoder_forward(model, utts[0].frames, &src.handle);
  CHECK(logits == again);

  CHECK_THROWS_AS(encoder_forward(model, Eigen::MatrixXd(0, cfg.d_model), &src.handle),
                  InvalidArgumentError);
  CHECK_THROWS_AS(encoder_forward(model, Eigen::MatrixXd::Zero(3, cfg.d_model + 1), &src.handle),
                  ShapeError);
  Eigen::MatrixXd poisoned = utts[0].frames;
  poisoned(2, 2) = std::nan("");
  CHECK_THROWS_AS(encoder_forward(model, poisoned, &src.handle), DataError);
}

TEST_CASE("analytic gradients match central differences across the stack", "[encoder]") {
  EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 6;
  cfg.ffn_dim = 10;
  cfg.vocab = 5;
  cfg.d_value = 7;
  cfg.fusion_m = 2;
  cfg.fusion_at = {1, 2};
  cfg.seed = 3;
  EncoderGradCheck rep = encoder_gradcheck(cfg, 42, 4);
  CHECK(rep.n_params > 500);
  CHECK(rep.max_rel_err < 1e-4);

  SECTION("without fusion sites") {
    cfg.fusion_at = {};
    EncoderGradCheck plain = encoder_gradcheck(cfg, 43, 3);
    CHECK(plain.max_rel_err < 1e-4);
  }
  SECTION("single block, site in front") {
    cfg.n_layers = 1;
    cfg.fusion_at = {1};
    EncoderGradCheck one = encoder_gradcheck(cfg, 44, 2);
    CHECK(one.max_rel_err < 1e-4);
  }
  SECTION("oversized widths are refused") {
    cfg.d_model = 17;
    CHECK_THROWS_AS(encoder_gradcheck(cfg, 1), ConfigError);
  }
}

TEST_CASE("softmax cross entropy is stable and labels are checked", "[encoder]") {
  Eigen::MatrixXd logits(2, 3);
  logits << 1.0, 2.0, 0.5, 1000.0, -1000.0, 0.0;
  LossGrad lg = softmax_xent(logits, {1, 0});
  CHECK(std::isfinite(lg.loss));
  CHECK(lg.n_correct == 2);
  // gradient rows sum to zero: softmax minus one-hot
  CHECK(std::abs(lg.d_logits.row(0).sum()) < 1e-12);
  CHECK(std::abs(lg.d_logits.row(1).sum()) < 1e-12);

  CHECK_THROWS_AS(softmax_xent(logits, {1}), ShapeError);
  CHECK_THROWS_AS(softmax_xent(logits, {1, 3}), InvalidArgumentError);
  CHECK_THROWS_AS(softmax_xent(logits, {1, -1}), InvalidArgumentError);
  CHECK_THROWS_AS(softmax_xent(Eigen::MatrixXd(0, 3), {}), InvalidArgumentError);
}

TEST_CASE("no fusion sites means memory has no effect at all", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  cfg.fusion_at = {};
  EncoderModel model = init_encoder(cfg);
  MicroSource src(cfg.d_model, cfg.d_value, 5, 22);
  auto utts = random_utts(1, 5, cfg.d_model, cfg.vocab, 4);

  Eigen::MatrixXd with_mem = encoder_forward(model, utts[0].frames, &src.handle);
  Eigen::MatrixXd without = encoder_forward(model, utts[0].frames, nullptr);
  Eigen::MatrixXd bypass = encoder_forward(model, utts[0].frames, nullptr, nullptr,
                                           FusionMode::kBypass);
  CHECK(with_mem == without);
  CHECK(with_mem == bypass);
}

TEST_CASE("a silenced fusion site reproduces the plain stack", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  cfg.fusion_at = {1, 2};
  EncoderModel model = init_encoder(cfg);
  for (const auto& ss : model.layout.sites) {
    knnfuse::detail::slot_vec(model.params, ss.w_v).setZero();
    knnfuse::detail::slot_vec(model.params, ss.ln_beta).setZero();
  }
  MicroSource src(cfg.d_model, cfg.d_value, 5, 23);
  auto utts = random_utts(1, 6, cfg.d_model, cfg.vocab, 5);

  Eigen::MatrixXd fused = encoder_forward(model, utts[0].frames, &src.handle);
  Eigen::MatrixXd empty_ctx = encoder_forward(model, utts[0].frames, nullptr);
  Eigen::MatrixXd plain = encoder_forward(model, utts[0].frames, &src.handle, nullptr,
                                          FusionMode::kBypass);
  CHECK(fused.cwiseEqual(plain).all());
  CHECK(empty_ctx.cwiseEqual(plain).all());
}

TEST_CASE("training is deterministic and lowers the loss", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  MicroSource src(cfg.d_model, cfg.d_value, 5, 24);
  auto utts = random_utts(10, 6, cfg.d_model, cfg.vocab, 6);

  TrainConfig tc;
  tc.lr = 3e-3;
  tc.epochs = 5;
  tc.seed = 11;

  EncoderModel a = init_encoder(cfg);
  TrainResult ra = train_encoder(a, utts, tc, &src.handle);
  EncoderModel b = init_encoder(cfg);
  TrainResult rb = train_encoder(b, utts, tc, &src.handle);

  CHECK(ra.steps == utts.size() * static_cast<size_t>(tc.epochs));
  REQUIRE(ra.epoch_loss.size() == static_cast<size_t>(tc.epochs));
  CHECK(ra.epoch_loss == rb.epoch_loss);
  CHECK(a.params == b.params);
  CHECK(ra.epoch_loss.back() < ra.epoch_loss.front());
}

TEST_CASE("zero learning rate leaves the model untouched", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  MicroSource src(cfg.d_model, cfg.d_value, 5, 25);
  auto utts = random_utts(6, 5, cfg.d_model, cfg.vocab, 7);

  EncoderModel model = init_encoder(cfg);
  Eigen::VectorXd snapshot = model.params;
  TrainConfig tc;
  tc.lr = 0.0;
  tc.epochs = 3;
  tc.seed = 2;
  TrainResult res = train_encoder(model, utts, tc, &src.handle);
  CHECK(model.params == snapshot);
  CHECK(res.epoch_loss[0] == res.epoch_loss[1]);
  CHECK(res.epoch_loss[1] == res.epoch_loss[2]);
}

TEST_CASE("a diverging run raises a training error naming the step", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  auto utts = random_utts(4, 5, cfg.d_model, cfg.vocab, 8);
  EncoderModel model = init_encoder(cfg);
  TrainConfig tc;
  tc.lr = 1e80;
  tc.epochs = 4;
  tc.seed = 3;
  CHECK_THROWS_MATCHES(train_encoder(model, utts, tc, nullptr), TrainingError,
                       Catch::Matchers::MessageMatches(ContainsSubstring("at step")));
}

TEST_CASE("training rejects invalid configurations", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  EncoderModel model = init_encoder(cfg);
  auto utts = random_utts(2, 4, cfg.d_model, cfg.vocab, 9);

  TrainConfig tc;
  tc.lr = -1.0;
  CHECK_THROWS_AS(train_encoder(model, utts, tc), ConfigError);
  tc = TrainConfig{};
  tc.epochs = 0;
  CHECK_THROWS_AS(train_encoder(model, utts, tc), ConfigError);
  tc = TrainConfig{};
  tc.beta1 = 1.0;
  CHECK_THROWS_AS(train_encoder(model, utts, tc), ConfigError);
  tc = TrainConfig{};
  CHECK_THROWS_AS(train_encoder(model, {}, tc), InvalidArgumentError);
  tc.train_values = true;
  CHECK_THROWS_AS(train_encoder(model, utts, tc), ConfigError);
}

TEST_CASE("the value hook trains retrieved rows and refreshes the memory", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  cfg.fusion_at = {1};
  const size_t n_entries = 6;  // the last key is unreachable by construction
  MicroSource src(cfg.d_model, cfg.d_value, n_entries, 26);
  auto utts = random_utts(8, 5, cfg.d_model, cfg.vocab, 10);

  EncoderModel model = init_encoder(cfg);
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.epochs = 3;
  tc.seed = 13;
  tc.train_values = true;
  ValueTrainHook hook{&src.values, &src.mem};
  const std::vector<float> before = src.values.table();
  train_encoder(model, utts, tc, &src.handle, &hook);
  const std::vector<float>& after = src.values.table();

  const size_t dv = static_cast<size_t>(cfg.d_value);
  double touched = 0.0;
  for (size_t i = 0; i < (n_entries - 1) * dv; ++i) {
    touched += std::abs(static_cast<double>(after[i]) - static_cast<double>(before[i]));
  }
  CHECK(touched > 0.0);
  for (size_t i = (n_entries - 1) * dv; i < n_entries * dv; ++i) {
    CHECK(after[i] == before[i]);
  }
  for (size_t r = 0; r < src.mem.size(); ++r) {
    const auto& rec = src.mem.record(r);
    const std::vector<float> row(after.begin() + static_cast<std::ptrdiff_t>(rec.entry_id * dv),
                                 after.begin() +
                                     static_cast<std::ptrdiff_t>((rec.entry_id + 1) * dv));
    CHECK(rec.value == row);
  }

  SECTION("the hook refuses a non one-hot table") {
    auto spell = ValueEmbedder::pretrained({{"abc", std::vector<float>(dv, 0.5f)}});
    ValueTrainHook bad{&spell, &src.mem};
    TrainConfig tv = tc;
    CHECK_THROWS_AS(train_encoder(model, utts, tv, &src.handle, &bad), ConfigError);
  }
}

TEST_CASE("dropout is seeded, training-only, and off by default", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  cfg.dropout = 0.5;
  EncoderModel model = init_encoder(cfg);
  MicroSource src(cfg.d_model, cfg.d_value, 5, 27);
  auto utts = random_utts(1, 6, cfg.d_model, cfg.vocab, 11);
  const Eigen::MatrixXd& frames = utts[0].frames;

  Eigen::MatrixXd t1 = encoder_forward(model, frames, &src.handle, nullptr,
                                       FusionMode::kActive, true, 99);
  Eigen::MatrixXd t2 = encoder_forward(model, frames, &src.handle, nullptr,
                                       FusionMode::kActive, true, 99);
  Eigen::MatrixXd t3 = encoder_forward(model, frames, &src.handle, nullptr,
                                       FusionMode::kActive, true, 100);
  CHECK(t1 == t2);
  CHECK(t1 != t3);

  // inference ignores dropout entirely
  Eigen::MatrixXd eval_out = encoder_forward(model, frames, &src.handle);
  EncoderConfig dry = cfg;
  dry.dropout = 0.0;
  EncoderModel same = init_encoder(dry);
  same.params = model.params;
  CHECK(eval_out == encoder_forward(same, frames, &src.handle));
}

TEST_CASE("evaluation reports coherent rates and latencies", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  MicroSource src(cfg.d_model, cfg.d_value, 5, 28);
  auto utts = random_utts(6, 5, cfg.d_model, cfg.vocab, 12);
  EncoderModel model = init_encoder(cfg);

  EvalReport rep = evaluate_encoder(model, utts, &src.handle);
  CHECK(rep.n_utterances == utts.size());
  CHECK(rep.n_frames == utts.size() * 5);
  CHECK(rep.token_error_rate >= 0.0);
  CHECK(rep.token_error_rate <= 1.0);
  CHECK(rep.rare_token_accuracy == 0.0);
  CHECK(rep.n_rare_frames == 0);
  CHECK(rep.latency_fused_us > 0.0);
  CHECK(rep.latency_plain_us > 0.0);
  CHECK(std::isfinite(rep.loss));
  CHECK(rep.fingerprint == weight_fingerprint(model));

  CHECK_THROWS_AS(evaluate_encoder(model, {}, &src.handle), InvalidArgumentError);
}

TEST_CASE("fingerprints track weights and configuration", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  EncoderModel a = init_encoder(cfg);
  EncoderModel b = init_encoder(cfg);
  CHECK(weight_fingerprint(a) == weight_fingerprint(b));
  b.params(3) += 1e-9;
  CHECK(weight_fingerprint(a) != weight_fingerprint(b));
}

TEST_CASE("checkpoints round-trip bit for bit", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  cfg.dropout = 0.25;
  EncoderModel model = init_encoder(cfg);
  testsup::TempDir dir;
  const auto path = dir.file("model.knf");
  save_model(model, path);
  EncoderModel back = load_model(path);

  CHECK(back.params == model.params);
  CHECK(back.cfg.n_layers == cfg.n_layers);
  CHECK(back.cfg.d_model == cfg.d_model);
  CHECK(back.cfg.ffn_dim == cfg.ffn_dim);
  CHECK(back.cfg.vocab == cfg.vocab);
  CHECK(back.cfg.d_value == cfg.d_value);
  CHECK(back.cfg.fusion_m == cfg.fusion_m);
  CHECK(back.cfg.fusion_at == cfg.fusion_at);
  CHECK(back.cfg.dropout == cfg.dropout);
  CHECK(back.cfg.seed == cfg.seed);
  CHECK(weight_fingerprint(back) == weight_fingerprint(model));

  // serialization is itself deterministic
  CHECK(serialize_model(model) == serialize_model(back));
}

TEST_CASE("corrupted checkpoints raise typed errors", "[encoder]") {
  EncoderConfig cfg = micro_cfg();
  EncoderModel model = init_encoder(cfg);
  const std::vector<uint8_t> good = serialize_model(model);

  auto corrupt = [&](size_t pos, uint8_t value) {
    std::vector<uint8_t> bad = good;
    bad.at(pos) = value;
    testsup::reseal(bad);
    return bad;
  };

  CHECK_THROWS_AS(deserialize_model(corrupt(1, 'X')), FormatError);
  CHECK_THROWS_AS(deserialize_model(corrupt(8, 9)), FormatError);

  std::vector<uint8_t> truncated(good.begin(), good.end() - 5);
  CHECK_THROWS_AS(deserialize_model(truncated), CorruptionError);

  std::vector<uint8_t> trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize_model(trailing), CorruptionError);

  // n_layers field poisoned: config no longer validates
  CHECK_THROWS_AS(deserialize_model(corrupt(12, 0xFF)), CorruptionError);

  // a parameter turned into NaN
  std::vector<uint8_t> nan_param = good;
  const double q = std::nan("");
  std::memcpy(nan_param.data() + nan_param.size() - sizeof(uint64_t) - sizeof(double), &q,
              sizeof(double));
  testsup::reseal(nan_param);
  CHECK_THROWS_AS(deserialize_model(nan_param), CorruptionError);
}
