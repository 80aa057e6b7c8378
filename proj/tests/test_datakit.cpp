#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "mdprune/datakit.hpp"
#include "mdprune/optim.hpp"
#include "mdprune/trainer.hpp"

using namespace mdprune;
namespace fs = std::filesystem;

namespace {
SuiteSpec small_suite() {
  SuiteSpec s;
  s.domains = {{"shapes", "shapes", 0, 400},
               {"stripes", "stripes", 0, 400},
               {"glyphs", "glyphs", 0, 400},
               {"colors", "colors", 0, 400}};
  return s;
}
}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  auto a = generate_synthetic_suite(7, small_suite());
  auto b = generate_synthetic_suite(7, small_suite());
  for (std::size_t d = 0; d < a.size(); ++d) {
    CHECK(a[d].train.images == b[d].train.images);
    CHECK(a[d].train.labels == b[d].train.labels);
    CHECK(a[d].test.images == b[d].test.images);
  }
  auto c = generate_synthetic_suite(8, small_suite());
  CHECK(a[0].train.images != c[0].train.images);
}

TEST_CASE("splits are 70/15/15, disjoint and exhaustive") {
  auto suite = generate_synthetic_suite(7, small_suite());
  for (const auto& ds : suite) {
    CHECK(ds.train.size() == 280);
    CHECK(ds.val.size() == 60);
    CHECK(ds.test.size() == 60);
    // recombining the split images yields the full generated set
    std::vector<std::uint8_t> joined = ds.train.images;
    joined.insert(joined.end(), ds.val.images.begin(), ds.val.images.end());
    joined.insert(joined.end(), ds.test.images.begin(), ds.test.images.end());
    const DomainDataset full = generate_domain(
        {ds.train.domain, ds.train.domain == "colors" ? "colors" : ds.train.domain, 0, 400},
        Rng(7).split("domain." + ds.train.domain));
    CHECK(joined == full.images);
  }
}

TEST_CASE("domains may differ in class count") {
  auto suite = generate_synthetic_suite(7, small_suite());
  CHECK(suite[0].train.classes == 4);
  CHECK(suite[3].train.classes == 3);  // colors: dominant channel
}

TEST_CASE("splits are class balanced") {
  auto suite = generate_synthetic_suite(7, small_suite());
  const auto& tr = suite[0].train;
  std::vector<int> counts(static_cast<std::size_t>(tr.classes), 0);
  for (int l : tr.labels) ++counts[static_cast<std::size_t>(l)];
  for (int c : counts) CHECK(c == 70);
}

TEST_CASE("dataset file round-trip is byte identical") {
  auto suite = generate_synthetic_suite(9, small_suite());
  const fs::path p = fs::temp_directory_path() / "mdprune_ds_roundtrip.bin";
  save_dataset(suite[1].train, p.string());
  const std::string bytes = read_file(p.string());
  DomainDataset back = dataset_from_bytes(bytes, "test");
  CHECK(dataset_to_bytes(back) == bytes);
  CHECK(back.domain == "stripes");
  CHECK(back.split == "train");
  CHECK(back.classes == 4);
  fs::remove(p);
}

TEST_CASE("dataset loader validates magic, length and labels") {
  auto suite = generate_synthetic_suite(9, small_suite());
  std::string bytes = dataset_to_bytes(suite[0].val);

  std::string bad_magic = bytes;
  bad_magic[3] = 'X';
  CHECK_THROWS_WITH(dataset_from_bytes(bad_magic, "f"),
                    Catch::Matchers::ContainsSubstring("magic"));

  std::string truncated = bytes.substr(0, bytes.size() - 7);
  CHECK_THROWS_WITH(dataset_from_bytes(truncated, "f"),
                    Catch::Matchers::ContainsSubstring("expected") &&
                        Catch::Matchers::ContainsSubstring("bytes"));

  // corrupt one label beyond the class count
  std::string bad_label = bytes;
  const std::size_t label_pos = bytes.size() - 4;  // last u32 label
  bad_label[label_pos] = 60;
  CHECK_THROWS_WITH(dataset_from_bytes(bad_label, "f"),
                    Catch::Matchers::ContainsSubstring("out of class range"));
}

TEST_CASE("epoch order reshuffles deterministically from (seed, epoch, domain)") {
  auto suite = generate_synthetic_suite(4, small_suite());
  const auto& ds = suite[0].train;
  CHECK(epoch_order(ds, 1, 3) == epoch_order(ds, 1, 3));
  CHECK(epoch_order(ds, 1, 3) != epoch_order(ds, 1, 4));
  CHECK(epoch_order(ds, 2, 3) != epoch_order(ds, 1, 3));
  CHECK(epoch_order(suite[1].train, 1, 3) != epoch_order(ds, 1, 3));

  auto idx = epoch_order(ds, 1, 3);
  std::set<std::size_t> uniq(idx.begin(), idx.end());
  CHECK(uniq.size() == ds.size());
}

TEST_CASE("batches are normalized to [0,1]") {
  auto suite = generate_synthetic_suite(4, small_suite());
  std::vector<int> labels;
  Tensor b = make_batch(suite[2].train, {0, 1, 2}, labels);
  CHECK(b.shape() == Shape{3, 3, 32, 32});
  for (double v : b.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(labels == std::vector<int>{suite[2].train.labels[0], suite[2].train.labels[1],
                                   suite[2].train.labels[2]});
}

TEST_CASE("unknown generator and bad sample counts are rejected") {
  CHECK_THROWS_AS(generate_domain({"x", "mandelbrot", 0, 10}, Rng(1)), config_error);
  CHECK_THROWS_AS(generate_domain({"x", "shapes", 0, 0}, Rng(1)), config_error);
  CHECK_THROWS_AS(generate_synthetic_suite(1, SuiteSpec{}), config_error);
}

// Directional: the texture domain defeats a linear pixel classifier but not a
// small conv net, i.e. the synthetic tasks need non-trivial features.
TEST_CASE("stripes: linear classifier on raw pixels loses to a small conv net") {
  SuiteSpec spec;
  spec.domains = {{"stripes", "stripes", 0, 320}};
  auto suite = generate_synthetic_suite(12, spec);
  const auto& tr = suite[0].train;
  const auto& val = suite[0].val;

  // linear: flatten -> 4 logits, momentum SGD
  Rng rng(13);
  const int dim = 3 * 32 * 32;
  Tensor w = Tensor::randn({dim, 4}, rng, 0.01, true);
  Tensor bias = Tensor::zeros({4}, true);
  SgdMomentum opt({w, bias}, 0.05, 0.9);
  for (int epoch = 1; epoch <= 30; ++epoch) {
    const auto idx = epoch_order(tr, 13, epoch);
    for (std::size_t s = 0; s < idx.size(); s += 32) {
      std::vector<std::size_t> bidx(idx.begin() + static_cast<std::ptrdiff_t>(s),
                                    idx.begin() + static_cast<std::ptrdiff_t>(
                                                      std::min(idx.size(), s + 32)));
      std::vector<int> labels;
      Tensor batch = make_batch(tr, bidx, labels);
      opt.zero_grad();
      Tensor loss = softmax_cross_entropy(
          linear(reshape(batch, {static_cast<int>(bidx.size()), dim}), w, bias), labels);
      loss.backward();
      opt.step();
    }
  }
  auto eval_linear = [&](const DomainDataset& ds) {
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<int> labels;
    Tensor batch = make_batch(ds, idx, labels);
    Tensor logits = linear(reshape(batch, {static_cast<int>(ds.size()), dim}), w, bias);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const double* row = &logits.values()[i * 4];
      int best = 0;
      for (int j = 1; j < 4; ++j)
        if (row[j] > row[best]) best = j;
      if (best == labels[i]) ++ok;
    }
    return static_cast<double>(ok) / static_cast<double>(ds.size());
  };
  const double linear_acc = eval_linear(val);

  // small conv net: the reference backbone without masking, trained end to
  // end on one domain
  ArchDescriptor plain = ArchDescriptor::parse(micronet_descriptor());
  for (auto& l : plain.layers) l.masked = false;
  MultiDomainModel m = build_from_descriptor(plain, {{"stripes", 4}}, 14, true);
  TrainConfig cfg;
  cfg.beta = 1.0;
  cfg.lambda_ps = 0.0;
  cfg.rounds = 5;
  cfg.batch_size = 16;
  cfg.classifier_lr = 1e-2;
  cfg.lr_decay_rounds = {};
  cfg.seed = 14;
  cfg.train_backbone = true;
  train(m, {suite[0]}, cfg);
  const double conv_acc = evaluate(m, val, 0);

  INFO("linear=" << linear_acc << " conv=" << conv_acc);
  CHECK(conv_acc > linear_acc);
}
