#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "conv_oracle.hpp"
#include "mdprune/model.hpp"
#include "mdprune/serialize.hpp"

using namespace mdprune;
namespace fs = std::filesystem;

namespace {

std::vector<DomainInfo> three_domains() {
  return {{"a", 4}, {"b", 3}, {"c", 5}};
}

MultiDomainModel micronet(std::uint64_t seed = 11) {
  return build_from_descriptor(ArchDescriptor::parse(micronet_descriptor()), three_domains(),
                               seed);
}

Tensor random_batch(Rng& rng, int n = 2, int c = 3, int h = 16, int w = 16) {
  std::vector<double> d(static_cast<std::size_t>(n) * c * h * w);
  for (double& v : d) v = rng.uniform();
  return Tensor::from_data({n, c, h, w}, std::move(d));
}

}  // namespace

TEST_CASE("switch counting and head registry") {
  const std::string two_masked =
      "conv in=8 out=8 k=3 stride=1 pad=1 masked=1\n"
      "relu\n"
      "conv in=8 out=16 k=3 stride=1 pad=1 masked=1\n"
      "gap\nlinear\n";
  ArchDescriptor arch = ArchDescriptor::parse(two_masked);
  // switches are per input channel: 8 for each of the two convs
  MultiDomainModel m = build_from_descriptor(arch, three_domains(), 3);
  CHECK(m.switch_count() == 8 + 8);
  CHECK(m.heads.size() == 3);
  CHECK(m.heads[0].weight.shape() == Shape{16, 4});
  CHECK(m.heads[2].weight.shape() == Shape{16, 5});
  for (auto& cl : m.convs) CHECK(cl.switches.size() == 3);
}

TEST_CASE("micronet switch budget M = 3 + 16 + 32") {
  MultiDomainModel m = micronet();
  CHECK(m.switch_count() == 51);
}

TEST_CASE("switches start at 1e-3 and the backbone is frozen") {
  MultiDomainModel m = micronet();
  for (auto& cl : m.convs) {
    CHECK_FALSE(cl.kernel.requires_grad());
    for (auto& s : cl.switches) {
      CHECK(s.requires_grad());
      for (double v : s.values()) CHECK(v == 1e-3);
    }
  }
}

TEST_CASE("unknown domain is rejected with the registry in the message") {
  MultiDomainModel m = micronet();
  CHECK_THROWS_WITH(m.domain_index("nope"), Catch::Matchers::ContainsSubstring("a, b, c"));
}

TEST_CASE("all-ones switches reproduce the unmasked convolution") {
  MultiDomainModel m = micronet();
  for (auto& cl : m.convs)
    for (auto& s : cl.switches)
      for (double& v : s.values()) v = 1.0;
  Rng rng(2);
  Tensor x = random_batch(rng);

  // unmasked twin: same kernels, masked flags off
  ArchDescriptor plain = m.arch;
  for (auto& l : plain.layers) l.masked = false;
  MultiDomainModel p = build_from_descriptor(plain, three_domains(), 99);
  for (std::size_t c = 0; c < p.convs.size(); ++c)
    p.convs[c].kernel.values() = m.convs[c].kernel.values();
  for (std::size_t b = 0; b < p.bns.size(); ++b)
    for (std::size_t d = 0; d < 3; ++d) {
      p.bns[b].gamma[d].values() = m.bns[b].gamma[d].values();
      p.bns[b].beta[d].values() = m.bns[b].beta[d].values();
      p.bns[b].run_mean[d] = m.bns[b].run_mean[d];
      p.bns[b].run_var[d] = m.bns[b].run_var[d];
    }
  for (std::size_t d = 0; d < 3; ++d) {
    p.heads[d].weight.values() = m.heads[d].weight.values();
    p.heads[d].bias.values() = m.heads[d].bias.values();
  }
  Tensor lm = forward(m, 0, x, Mode::Eval);
  Tensor lp = forward(p, 0, x, Mode::Eval);
  CHECK(lm.values() == lp.values());
}

TEST_CASE("train-mode masked conv equals the scaled nested-loop oracle") {
  const std::string tiny =
      "conv in=3 out=4 k=3 stride=1 pad=0 masked=1\n"
      "gap\nlinear\n";
  MultiDomainModel m =
      build_from_descriptor(ArchDescriptor::parse(tiny), {{"only", 2}}, 5);
  Rng rng(3);
  for (double& v : m.convs[0].switches[0].values()) v = rng.uniform(-1.0, 1.0);
  Tensor x = random_batch(rng, 1, 3, 6, 6);

  conv_oracle::Spec s{1, 3, 6, 6, 4, 3, 3, 1, 0};
  const auto expected = conv_oracle::run(s, x.values(), m.convs[0].kernel.values(),
                                         m.convs[0].switches[0].values().data());
  Tensor out = masked_conv2d(x, m.convs[0].kernel, m.convs[0].switches[0], 1, 0);
  CHECK(out.values() == expected);
}

TEST_CASE("eval mode equals train-mode forward with binarized switches") {
  MultiDomainModel m = micronet(17);
  Rng rng(4);
  for (auto& cl : m.convs)
    for (auto& s : cl.switches)
      for (double& v : s.values()) v = rng.uniform(-0.5, 0.5);
  Tensor x = random_batch(rng);

  Tensor eval_logits = forward(m, 1, x, Mode::Eval);

  // substitute hard-binarized switch values, then run the train-mode conv path
  // with eval batch norm by evaluating a twin whose switches are already 0/1
  MultiDomainModel twin = clone(m);
  for (auto& cl : twin.convs)
    for (auto& s : cl.switches)
      for (double& v : s.values()) v = v > twin.tau ? 1.0 : 0.0;
  Tensor subst_logits = forward(twin, 1, x, Mode::Eval);
  CHECK(eval_logits.values() == subst_logits.values());
}

TEST_CASE("binarize_masks thresholds and reports active fractions") {
  MultiDomainModel m = micronet();
  SECTION("fresh switches at 1e-3 are all active at tau 0") {
    BinaryMasks bm = binarize_masks(m, 0.0);
    CHECK(bm.active_fraction == std::vector<double>{1.0, 1.0, 1.0});
  }
  SECTION("all negative switches are inactive") {
    for (auto& cl : m.convs)
      for (auto& s : cl.switches)
        for (double& v : s.values()) v = -0.5;
    BinaryMasks bm = binarize_masks(m, 0.0);
    CHECK(bm.active_fraction == std::vector<double>{0.0, 0.0, 0.0});
  }
  SECTION("mixed vector thresholds elementwise") {
    const std::string tiny =
        "conv in=4 out=4 k=1 masked=1\n"
        "gap\nlinear\n";
    MultiDomainModel t =
        build_from_descriptor(ArchDescriptor::parse(tiny), {{"only", 2}}, 1);
    t.convs[0].switches[0].values() = {-1.0, 0.0, 0.2, 5.0};
    BinaryMasks bm = binarize_masks(t, 0.0);
    CHECK(bm.masks[0][0] == std::vector<std::uint8_t>{0, 0, 1, 1});
    CHECK(bm.active_fraction[0] == 0.5);
  }
}

TEST_CASE("domain isolation: touching domain a leaves domain b bit-identical") {
  MultiDomainModel m = micronet(23);
  Rng rng(5);
  Tensor x = random_batch(rng);
  Tensor before = forward(m, 2, x, Mode::Eval);

  // mutate domain 0's masks, bn and head
  for (auto& cl : m.convs)
    if (!cl.switches.empty())
      for (double& v : cl.switches[0].values()) v = rng.uniform(-1.0, 1.0);
  for (auto& bn : m.bns) {
    for (double& v : bn.gamma[0].values()) v = rng.uniform(0.1, 2.0);
    for (double& v : bn.run_mean[0]) v = rng.uniform(-1.0, 1.0);
  }
  for (double& v : m.heads[0].weight.values()) v = rng.uniform(-1.0, 1.0);

  Tensor after = forward(m, 2, x, Mode::Eval);
  CHECK(before.values() == after.values());
}

TEST_CASE("checkpoint round-trip: same file twice, same forward") {
  const fs::path dir = fs::temp_directory_path() / "mdprune_test_ckpt";
  fs::remove_all(dir);
  MultiDomainModel m = micronet(31);
  Rng rng(6);
  for (auto& cl : m.convs)
    for (auto& s : cl.switches)
      for (double& v : s.values()) v = rng.uniform(-1.0, 1.0);
  m.beta_budget = 0.5;
  m.lambda = {0.1, 0.2, 0.3};
  m.rounds_completed = 4;
  save_checkpoint(m, dir);

  MultiDomainModel r1 = load_checkpoint(dir);
  MultiDomainModel r2 = load_checkpoint(dir);
  CHECK(r1.beta_budget == 0.5);
  CHECK(r1.lambda == std::vector<double>{0.1, 0.2, 0.3});
  CHECK(r1.rounds_completed == 4);
  for (auto& cl : r1.convs) CHECK_FALSE(cl.kernel.requires_grad());

  Tensor x = random_batch(rng);
  Tensor l1 = forward(r1, 0, x, Mode::Eval);
  Tensor l2 = forward(r2, 0, x, Mode::Eval);
  CHECK(l1.values() == l2.values());

  // saving the reloaded model reproduces the weight file byte for byte
  const fs::path dir2 = fs::temp_directory_path() / "mdprune_test_ckpt2";
  fs::remove_all(dir2);
  save_checkpoint(r1, dir2);
  CHECK(read_file((dir / "weights.bin").string()) ==
        read_file((dir2 / "weights.bin").string()));

  // f32 storage stays within float rounding of the f64 originals
  for (std::size_t c = 0; c < m.convs.size(); ++c)
    for (std::size_t i = 0; i < m.convs[c].kernel.numel(); ++i) {
      const double orig = m.convs[c].kernel.values()[i];
      const double back = r1.convs[c].kernel.values()[i];
      CHECK(back == Catch::Approx(orig).epsilon(1e-6));
    }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("tensor blob truncation and magic errors") {
  std::string bytes;
  append_blob(bytes, {2, 2}, {1, 2, 3, 4});
  std::size_t pos = 0;
  Blob b = read_blob(bytes, pos);
  CHECK(b.shape == Shape{2, 2});
  CHECK(b.data == std::vector<double>{1, 2, 3, 4});

  std::string cut = bytes.substr(0, bytes.size() - 3);
  pos = 0;
  CHECK_THROWS_WITH(read_blob(cut, pos), Catch::Matchers::ContainsSubstring("truncated"));
  std::string garbled = bytes;
  garbled[0] = 'X';
  pos = 0;
  CHECK_THROWS_WITH(read_blob(garbled, pos), Catch::Matchers::ContainsSubstring("magic"));
}
