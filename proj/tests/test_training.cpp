#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <limits>
#include <random>

#include "corruptlab/checkpoint.hpp"
#include "corruptlab/projection.hpp"
#include "corruptlab/training.hpp"

using namespace corruptlab;

namespace {

ModelConfig toy_config() {
    ModelConfig c;
    c.name = "toy";
    c.num_layers = 2;
    c.hidden = 16;
    c.heads = 2;
    c.ffn_multiplier = 2;
    c.max_len = 12;
    c.dropout = 0.1;
    return c;
}

SynthSpec toy_task(std::size_t per_class, std::uint64_t seed) {
    SynthSpec s;
    s.num_classes = 3;
    s.keywords_per_class = 6;
    s.noise_vocab = 8;
    s.examples_per_class = per_class;
    s.length = 6;
    s.noise_rate = 0.4;
    s.seed = seed;
    return s;
}

struct Toy {
    Checkpoint ck;
    LabeledDataset train, test;
};

const Toy& toy() {
    static const Toy t = [] {
        auto corpus_ds = synth_generate(toy_task(60, 1));
        std::vector<std::string> corpus;
        for (const auto& e : corpus_ds.examples) corpus.push_back(e.text_a);
        PretrainConfig pc;
        pc.epochs = 2;
        pc.batch_size = 16;
        pc.max_seq_len = 12;
        auto r = pretrain_mlm(fresh_checkpoint(toy_config(), corpus, 64, 5), corpus, pc);
        return Toy{std::move(r.checkpoint), synth_generate(toy_task(12, 2)), synth_generate(toy_task(20, 3))};
    }();
    return t;
}

TrainConfig quick(double lr, TrainMode mode = TrainMode::FullFineTune) {
    TrainConfig c;
    c.learning_rate = lr;
    c.epochs = 3;
    c.batch_size = 8;
    c.max_seq_len = 12;
    c.mode = mode;
    c.pooling = Pooling::MeanNonCls;
    return c;
}

bool encoder_equal(const EncoderModel<float>& a, const EncoderModel<float>& b) {
    for (const auto& p : a.params()) {
        if (is_head_param(p.name)) continue;
        auto x = p.tensor.data(), y = b.param(p.name).data();
        if (std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
    }
    return true;
}

}  // namespace

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.learning_rate = -1e-5;
    EXPECT_THROW(c.validate(), ValidationError);
    c.learning_rate = 1e-5;
    c.epochs = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    EXPECT_EQ(TrainConfig{}.epochs, 10u);
}

TEST(Masking, NeverSelectsSpecialTokens) {
    auto v = build_vocab({"a b c d e f g"}, 12);
    std::vector<EncodedSequence> seqs;
    for (const char* s : {"a b c", "d e f g a b", "g", "zzz a"}) seqs.push_back(encode(s, std::nullopt, v, 10));
    PretrainConfig pc;
    pc.mask_rate = 0.5;
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        auto batch = make_batch(seqs);
        auto mb = mask_tokens(batch, v.size(), pc, rng);
        EXPECT_FALSE(mb.positions.empty());
        for (std::size_t k = 0; k < mb.positions.size(); ++k) {
            const auto id = batch.ids[mb.positions[k]];
            EXPECT_TRUE(batch.mask[mb.positions[k]]);
            EXPECT_NE(id, special::cls);
            EXPECT_NE(id, special::sep);
            EXPECT_NE(id, special::pad);
            EXPECT_EQ(mb.targets[k], id);
        }
    }
}

TEST(Pretrain, BigramCorpusBeatsChanceFivefold) {
    // every sentence is a chain of fixed pairs "p{k} q{k}", so a masked token
    // is determined by its neighbor
    std::vector<std::string> corpus;
    Rng rng(1);
    std::uniform_int_distribution<int> pick(0, 7);
    for (int i = 0; i < 400; ++i) {
        std::string s;
        for (int j = 0; j < 3; ++j) {
            const int k = pick(rng);
            s += "p" + std::to_string(k) + " q" + std::to_string(k) + " ";
        }
        corpus.push_back(s);
    }
    auto cfg = toy_config();
    cfg.dropout = 0.0;
    PretrainConfig pc;
    pc.epochs = 6;
    pc.batch_size = 16;
    pc.learning_rate = 3e-3;
    pc.mask_rate = 0.2;
    pc.max_seq_len = 12;
    auto start = fresh_checkpoint(cfg, corpus, 64, 2);
    const double chance = 1.0 / static_cast<double>(start.vocab.size());
    auto r = pretrain_mlm(std::move(start), corpus, pc);
    EXPECT_GT(r.masked_accuracy, 5.0 * chance) << "vocab " << r.checkpoint.vocab.size();
    EXPECT_LT(r.epoch_loss.back(), r.epoch_loss.front());
}

TEST(Pretrain, SameSeedSameCheckpoint) {
    std::vector<std::string> corpus{"a b c d", "b c d e", "c d e a", "e a b c"};
    PretrainConfig pc;
    pc.epochs = 2;
    pc.batch_size = 2;
    auto a = pretrain_mlm(fresh_checkpoint(toy_config(), corpus, 16, 1), corpus, pc);
    auto b = pretrain_mlm(fresh_checkpoint(toy_config(), corpus, 16, 1), corpus, pc);
    EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));
    // the classification head is not touched by pre-training
    auto fresh = fresh_checkpoint(toy_config(), corpus, 16, 1);
    EXPECT_EQ(a.checkpoint.model.param("cls.weight").values(), fresh.model.param("cls.weight").values());
}

TEST(Finetune, HistoryAndBestEpochLaw) {
    const auto& t = toy();
    auto r = finetune(t.ck, t.train, t.test, quick(5e-3));
    ASSERT_EQ(r.history.size(), 3u);
    ASSERT_EQ(r.test_history.size(), 3u);
    EXPECT_EQ(r.best_f1, *std::max_element(r.history.begin(), r.history.end()));
    EXPECT_EQ(r.history[r.best_epoch - 1], r.best_f1);
    EXPECT_FALSE(r.aborted);
    EXPECT_DOUBLE_EQ(r.majority_baseline, majority_baseline(t.test.labels(), 3));
}

TEST(Finetune, ZeroLearningRateKeepsHistoryConstant) {
    const auto& t = toy();
    auto out = finetune_model(t.ck, t.train, t.test, quick(0.0));
    for (double f : out.result.history) EXPECT_EQ(f, out.result.history.front());
    EXPECT_TRUE(encoder_equal(out.model, t.ck.model));
}

TEST(Finetune, UpdatesEncoderAndIsDeterministic) {
    const auto& t = toy();
    auto a = finetune_model(t.ck, t.train, t.test, quick(5e-3));
    auto b = finetune_model(t.ck, t.train, t.test, quick(5e-3));
    EXPECT_FALSE(encoder_equal(a.model, t.ck.model));
    EXPECT_EQ(a.result.test_history, b.result.test_history);
    EXPECT_EQ(a.result.train_loss, b.result.train_loss);
    EXPECT_TRUE(encoder_equal(a.model, b.model));
    // MLM head is left alone
    EXPECT_EQ(a.model.param("mlm.weight").values(), t.ck.model.param("mlm.weight").values());
}

TEST(Finetune, ValidationCarveOutSelectsOnValidation) {
    const auto& t = toy();
    auto cfg = quick(5e-3);
    cfg.validation_fraction = 0.25;
    auto r = finetune(t.ck, t.train, t.test, cfg);
    EXPECT_EQ(r.history.size(), 3u);
    EXPECT_EQ(r.reported_f1(), r.test_history[r.best_epoch - 1]);
}

TEST(Finetune, DivergentRunIsFlagged) {
    const auto& t = toy();
    auto r = finetune(t.ck, t.train, t.test, quick(10.0));
    EXPECT_TRUE(r.outlier) << "best " << r.best_f1 << " baseline " << r.majority_baseline;
    EXPECT_FALSE(r.outlier_reason.empty());
}

TEST(SingleBatch, LossDecreasesOverFiveSteps) {
    const auto& t = toy();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto model = with_fresh_head(t.ck.model, 3, seed, 0.0);
        auto seqs = encode_dataset(t.train, t.ck.vocab, 12);
        auto labels = t.train.labels();
        auto batch = make_batch(seqs);
        std::vector<NamedTensor<float>*> params;
        for (auto& p : model.params())
            if (!p.name.starts_with("mlm.")) params.push_back(&p);
        AdamState<float> adam;
        double prev = std::numeric_limits<double>::infinity();
        for (int step = 0; step < 5; ++step) {
            model.zero_grad();
            auto loss = cross_entropy(sequence_logits(model, batch, Pooling::MeanNonCls), labels);
            EXPECT_LT(loss.item(), prev) << "seed " << seed << " step " << step;
            prev = loss.item();
            loss.backward();
            adam_step(params, adam, 1e-3);
        }
    }
}

TEST(Probe, EncoderBytesUnchanged) {
    const auto& t = toy();
    const auto before = encoder_checksum(t.ck.model);
    auto out = linear_probe_model(t.ck, t.train, t.test, quick(1e-2, TrainMode::LinearProbe));
    EXPECT_EQ(encoder_checksum(t.ck.model), before);
    EXPECT_EQ(encoder_checksum(out.model), before);
    EXPECT_NE(out.model.param("cls.weight").values(), with_fresh_head(t.ck.model, 3, 0).param("cls.weight").values());
}

TEST(Probe, DiffersFromFinetuneOnlyInHead) {
    const auto& t = toy();
    auto probe = linear_probe_model(t.ck, t.train, t.test, quick(1e-2, TrainMode::LinearProbe));
    auto ft = finetune_model(t.ck, t.train, t.test, quick(0.0));
    EXPECT_TRUE(encoder_equal(probe.model, ft.model));
}

TEST(Probe, WrongModeRejected) {
    const auto& t = toy();
    EXPECT_THROW(linear_probe(t.ck, t.train, t.test, quick(1e-2)), ValidationError);
    EXPECT_THROW(finetune(t.ck, t.train, t.test, quick(1e-2, TrainMode::LinearProbe)), ValidationError);
}

TEST(Probe, SeparableFeaturesReachHighF1) {
    // identity layers over one-hot keyword embeddings: pooled features are a
    // class-indexed one-hot mixture plus a shared noise direction
    auto spec = toy_task(20, 9);
    auto train = synth_generate(spec);
    spec.seed = 10;
    auto test = synth_generate(spec);
    std::vector<std::string> corpus;
    for (const auto& e : train.examples) corpus.push_back(e.text_a);
    auto cfg = toy_config();
    cfg.dropout = 0.0;
    auto ck = fresh_checkpoint(cfg, corpus, 64, 0);
    for (auto& p : ck.model.params()) {
        if (p.name.starts_with("layer.") && (p.name.find("attn_out") != std::string::npos || p.name.find("ffn2") != std::string::npos)) {
            std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0f);
        }
    }
    for (auto name : {"embeddings.position.weight", "embeddings.segment.weight"}) {
        auto d = ck.model.param(name).data();
        std::fill(d.begin(), d.end(), 0.0f);
    }
    auto tok = ck.model.param("embeddings.token.weight").data();
    Rng rng(4);
    std::normal_distribution<double> noise(0.0, 0.05);
    for (std::size_t id = 0; id < ck.vocab.size(); ++id) {
        const auto& w = ck.vocab.token(static_cast<std::int32_t>(id));
        std::size_t hot = cfg.hidden - 1;  // noise words, specials
        if (w.starts_with("kw")) hot = static_cast<std::size_t>(w[2] - '0');
        for (std::size_t j = 0; j < cfg.hidden; ++j) tok[id * cfg.hidden + j] = static_cast<float>((j == hot ? 3.0 : 0.0) + noise(rng));
    }
    auto pc = quick(5e-2, TrainMode::LinearProbe);
    pc.epochs = 10;
    auto r = linear_probe(ck, train, test, pc);
    EXPECT_GE(r.best_f1, 0.95);
}

TEST(Sweep, SelectionLaw) {
    const auto& t = toy();
    const std::vector<double> lrs{1e-3, 5e-3, 2e-2};
    auto s = lr_sweep(t.ck, t.train, t.test, quick(0.0), lrs);
    ASSERT_EQ(s.runs.size(), 3u);
    double best = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(s.runs[i].learning_rate, lrs[i]);
        best = std::max(best, s.runs[i].best_f1);
    }
    EXPECT_EQ(s.best_run().best_f1, best);
}

TEST(Sweep, SingleRateEqualsPlainFinetune) {
    const auto& t = toy();
    auto s = lr_sweep(t.ck, t.train, t.test, quick(0.0), {5e-3});
    auto r = finetune(t.ck, t.train, t.test, quick(5e-3));
    ASSERT_EQ(s.runs.size(), 1u);
    EXPECT_EQ(s.best_run().test_history, r.test_history);
}

TEST(Sweep, TiesGoToLowerRate) {
    const auto& t = toy();
    auto s = lr_sweep(t.ck, t.train, t.test, quick(0.0), {0.0, 0.0});
    EXPECT_EQ(s.best, 0u);
    auto s2 = lr_sweep(t.ck, t.train, t.test, quick(0.0), {1e-12, 0.0});
    ASSERT_EQ(s2.runs[0].best_f1, s2.runs[1].best_f1);
    EXPECT_EQ(s2.best, 1u);
}

TEST(Features, ShapeDeterminismAndDuplicates) {
    const auto& t = toy();
    auto ds = t.test;
    ds.examples.push_back(ds.examples.front());
    auto a = extract_features(t.ck.model, t.ck.vocab, ds, Pooling::Cls, {}, 12);
    auto b = extract_features(t.ck.model, t.ck.vocab, ds, Pooling::Cls, {}, 12);
    EXPECT_EQ(a.rows, ds.size());
    EXPECT_EQ(a.cols, 16u);
    EXPECT_EQ(a.values, b.values);
    for (std::size_t j = 0; j < a.cols; ++j) EXPECT_EQ(a.at(0, j), a.at(a.rows - 1, j));
}
