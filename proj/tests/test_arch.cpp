#include <catch2/catch_amalgamated.hpp>

#include "mdprune/arch.hpp"

using namespace mdprune;

TEST_CASE("micronet descriptor parses and round-trips") {
  ArchDescriptor a = ArchDescriptor::parse(micronet_descriptor());
  REQUIRE(a.layers.size() == 12);
  CHECK(a.layers[0].kind == LayerKind::Conv);
  CHECK(a.layers[0].masked);
  CHECK(a.layers[7].residual_from == 6);
  CHECK(a.feature_channels() == 32);

  ArchDescriptor b = ArchDescriptor::parse(a.to_text());
  CHECK(b.to_text() == a.to_text());
}

TEST_CASE("channel chaining is validated with the layer index") {
  const std::string bad =
      "conv in=3 out=16 k=3 stride=1 pad=1 masked=1\n"
      "relu\n"
      "conv in=8 out=16 k=3 stride=1 pad=1 masked=0\n"
      "gap\nlinear\n";
  CHECK_THROWS_WITH(ArchDescriptor::parse(bad),
                    Catch::Matchers::ContainsSubstring("layer 2"));
}

TEST_CASE("residual with mismatched channels is rejected") {
  const std::string bad =
      "conv in=3 out=16 k=3 stride=1 pad=1 masked=1\n"
      "relu\n"
      "conv in=16 out=32 k=3 stride=1 pad=1 masked=1 residual=1\n"
      "gap\nlinear\n";
  CHECK_THROWS_WITH(ArchDescriptor::parse(bad),
                    Catch::Matchers::ContainsSubstring("residual source channels"));
}

TEST_CASE("residual source must precede the conv") {
  const std::string bad =
      "conv in=3 out=3 k=3 stride=1 pad=1 masked=1 residual=5\n"
      "gap\nlinear\n";
  CHECK_THROWS_AS(ArchDescriptor::parse(bad), config_error);
}

TEST_CASE("descriptor grammar errors carry line numbers") {
  CHECK_THROWS_WITH(ArchDescriptor::parse("conv in=3 out=x k=3\ngap\nlinear\n"),
                    Catch::Matchers::ContainsSubstring("line 1"));
  CHECK_THROWS_WITH(ArchDescriptor::parse("warble\n"),
                    Catch::Matchers::ContainsSubstring("unknown layer"));
  CHECK_THROWS_AS(ArchDescriptor::parse("conv out=2 k=3\n"), config_error);
}

TEST_CASE("head placement rules") {
  CHECK_THROWS_WITH(ArchDescriptor::parse("conv in=3 out=4 k=1\nlinear\n"),
                    Catch::Matchers::ContainsSubstring("gap"));
  CHECK_THROWS_WITH(ArchDescriptor::parse("conv in=3 out=4 k=1\ngap\n"),
                    Catch::Matchers::ContainsSubstring("linear"));
  CHECK_THROWS_AS(ArchDescriptor::parse("conv in=3 out=4 k=1\ngap\nlinear\nrelu\n"),
                  config_error);
}

TEST_CASE("comments and blank lines are ignored") {
  ArchDescriptor a = ArchDescriptor::parse(
      "# tiny\n\nconv in=3 out=4 k=1  # pointwise\n\ngap\nlinear\n");
  CHECK(a.layers.size() == 3);
}
