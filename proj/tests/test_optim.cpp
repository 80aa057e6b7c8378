#include <catch2/catch_amalgamated.hpp>

#include "mdprune/optim.hpp"

using namespace mdprune;

namespace {
Tensor param(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor::from_data({n}, std::move(v), true);
}
}  // namespace

TEST_CASE("sgd momentum first step moves by lr * g") {
  Tensor p = param({1.0});
  SgdMomentum opt({p}, 0.1, 0.9);
  p.grad()[0] = 1.0;
  opt.step();
  CHECK(p.values()[0] == Catch::Approx(0.9));
}

TEST_CASE("sgd momentum accumulates velocity over two steps") {
  Tensor p = param({0.0});
  SgdMomentum opt({p}, 0.1, 0.9);
  p.grad()[0] = 1.0;
  opt.step();  // v=1,   dp=-0.1
  p.zero_grad();
  p.grad()[0] = 1.0;
  opt.step();  // v=1.9, dp=-0.19
  CHECK(p.values()[0] == Catch::Approx(-(0.1 + 0.19)));
}

TEST_CASE("sgd with zero gradient and zero velocity is a fixed point") {
  Tensor p = param({2.5});
  SgdMomentum opt({p}, 0.1, 0.9);
  opt.step();
  CHECK(p.values()[0] == 2.5);
}

TEST_CASE("adam with zero gradients never moves") {
  Tensor p = param({0.7, -0.3});
  Adam opt({p}, 1e-2);
  for (int i = 0; i < 5; ++i) opt.step();
  CHECK(p.values() == std::vector<double>{0.7, -0.3});
}

TEST_CASE("adam first step is about -lr * sign(g)") {
  for (double g : {0.5, -2.0, 1e-3}) {
    Tensor p = param({1.0});
    Adam opt({p}, 1e-3);
    p.grad()[0] = g;
    opt.step();
    const double delta = p.values()[0] - 1.0;
    CHECK(delta == Catch::Approx(-1e-3 * (g > 0 ? 1.0 : -1.0)).epsilon(1e-4));
  }
}

TEST_CASE("adam moment buffers mirror parameter shapes") {
  Tensor a = param({1, 2, 3});
  Tensor b = param({4, 5});
  Adam opt({a, b}, 1e-3);
  a.grad() = {1, 1, 1};
  b.grad() = {1, 1};
  opt.step();  // would throw on any size mismatch
  CHECK(a.numel() == 3);
  CHECK(opt.step_count() == 1);
}
