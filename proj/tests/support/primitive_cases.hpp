#pragma once

// Random-shape adjoint checks for every autodiff primitive, shared by the
// unit tests and the acceptance runner.

#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "unigaze/autodiff.hpp"

namespace unigaze::test_support {

using namespace unigaze::ad;

inline Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = uniform(rng, lo, hi);
  return t;
}

// sum(y * w) for a fixed random w, so every output coordinate gets its own
// upstream gradient.
inline Var<double> probe(Var<double> y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(y * y.graph->constant(random_tensor(y.shape(), rng)));
}

inline Shape random_shape(Rng& rng, std::size_t rank) {
  Shape s;
  for (std::size_t i = 0; i < rank; ++i) s.push_back(1 + uniform_index(rng, 4));
  return s;
}

struct PrimitiveCase {
  std::string name;
  std::function<std::vector<Tensor<double>>(Rng&)> make;
  LossBuilder build;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  using Case = PrimitiveCase;
  std::vector<Case> cases;
  cases.push_back({"matmul",
                   [](Rng& r) {
                     const auto m = 1 + uniform_index(r, 4), k = 1 + uniform_index(r, 4),
                                n = 1 + uniform_index(r, 4);
                     return std::vector{random_tensor({m, k}, r), random_tensor({k, n}, r)};
                   },
                   [](Graph<double>& g, auto p) { return probe(g.matmul(p[0], p[1]), 1); }});
  cases.push_back({"matmul_batched",
                   [](Rng& r) {
                     const auto b = 1 + uniform_index(r, 3), m = 1 + uniform_index(r, 3),
                                k = 1 + uniform_index(r, 3), n = 1 + uniform_index(r, 3);
                     return std::vector{random_tensor({b, m, k}, r), random_tensor({b, k, n}, r)};
                   },
                   [](Graph<double>& g, auto p) { return probe(g.matmul(p[0], p[1]), 2); }});
  cases.push_back({"matmul_shared_rhs",
                   [](Rng& r) {
                     const auto b = 1 + uniform_index(r, 3), m = 1 + uniform_index(r, 3),
                                k = 1 + uniform_index(r, 3), n = 1 + uniform_index(r, 3);
                     return std::vector{random_tensor({b, m, k}, r), random_tensor({k, n}, r)};
                   },
                   [](Graph<double>& g, auto p) { return probe(g.matmul(p[0], p[1]), 3); }});
  cases.push_back({"matmul_bt",
                   [](Rng& r) {
                     const auto m = 1 + uniform_index(r, 4), k = 1 + uniform_index(r, 4),
                                n = 1 + uniform_index(r, 4);
                     return std::vector{random_tensor({m, k}, r), random_tensor({n, k}, r)};
                   },
                   [](Graph<double>& g, auto p) { return probe(g.matmul_bt(p[0], p[1]), 4); }});
  cases.push_back({"matmul_bt_batched",
                   [](Rng& r) {
                     const auto b = 1 + uniform_index(r, 3), m = 1 + uniform_index(r, 3),
                                k = 1 + uniform_index(r, 3), n = 1 + uniform_index(r, 3);
                     return std::vector{random_tensor({b, m, k}, r), random_tensor({b, n, k}, r)};
                   },
                   [](Graph<double>& g, auto p) { return probe(g.matmul_bt(p[0], p[1]), 5); }});
  for (auto op : {Op::add, Op::sub, Op::mul}) {
    cases.push_back({"binary",
                     [](Rng& r) {
                       const Shape s = random_shape(r, 1 + uniform_index(r, 3));
                       Shape tail(s.begin() + static_cast<std::ptrdiff_t>(uniform_index(r, s.size())), s.end());
                       return std::vector{random_tensor(s, r), random_tensor(tail, r)};
                     },
                     [op](Graph<double>& g, auto p) {
                       auto y = op == Op::add ? g.add(p[0], p[1])
                                : op == Op::sub ? g.sub(p[0], p[1])
                                                : g.mul(p[0], p[1]);
                       return probe(y, 4);
                     }});
  }
  auto unary = [&](std::string name, std::function<Var<double>(Graph<double>&, Var<double>)> f) {
    cases.push_back({std::move(name),
                     [](Rng& r) { return std::vector{random_tensor(random_shape(r, 1 + uniform_index(r, 3)), r, -2, 2)}; },
                     [f](Graph<double>& g, auto p) { return probe(f(g, p[0]), 5); }});
  };
  unary("scalar_mul", [](Graph<double>& g, Var<double> x) { return g.scalar_mul(x, -1.7); });
  unary("gelu", [](Graph<double>& g, Var<double> x) { return g.gelu(x); });
  unary("square", [](Graph<double>& g, Var<double> x) { return g.square(x); });
  unary("softmax", [](Graph<double>& g, Var<double> x) {
    return g.softmax(x, static_cast<int>(x.value().rank()) - 1);
  });
  unary("softmax_axis0", [](Graph<double>& g, Var<double> x) { return g.softmax(x, 0); });
  unary("layer_norm", [](Graph<double>& g, Var<double> x) {
    // Pad every lane with fixed spread values so no lane is near-constant
    // (where the map curves on a scale finer than the FD step).
    Rng pad_rng(17);
    auto wide = g.concat({x, g.constant(random_tensor(x.shape(), pad_rng, -2, 2))});
    return g.layer_norm(wide, 0, 1e-6);
  });
  unary("reshape", [](Graph<double>& g, Var<double> x) { return g.reshape(x, {x.value().size()}); });
  unary("transpose", [](Graph<double>& g, Var<double> x) {
    std::vector<std::size_t> perm(x.value().rank());
    std::iota(perm.rbegin(), perm.rend(), std::size_t{0});
    return g.transpose(x, perm);
  });
  unary("slice_rows", [](Graph<double>& g, Var<double> x) {
    return g.slice_rows(x, x.value().rows() / 2, x.value().rows() - x.value().rows() / 2);
  });
  unary("gather_rows", [](Graph<double>& g, Var<double> x) {
    const std::size_t r = x.value().rows();
    return g.gather_rows(x, {r - 1, 0, r - 1, r / 2});
  });
  unary("concat", [](Graph<double>& g, Var<double> x) { return g.concat({x, g.square(x), x}); });
  unary("mean_all", [](Graph<double>& g, Var<double> x) { return g.mean(x); });
  unary("sum_all", [](Graph<double>& g, Var<double> x) { return g.sum(x); });
  unary("mean_axis", [](Graph<double>& g, Var<double> x) { return g.mean(x, 0); });
  unary("sum_axis", [](Graph<double>& g, Var<double> x) {
    return g.sum(x, static_cast<int>(x.value().rank()) - 1);
  });
  // abs has a kink at zero; keep samples a finite-difference step away.
  cases.push_back({"abs",
                   [](Rng& r) {
                     auto t = random_tensor(random_shape(r, 2), r, 0.1, 2.0);
                     for (auto& v : t.data) v = uniform01(r) < 0.5 ? -v : v;
                     return std::vector{t};
                   },
                   [](Graph<double>& g, auto p) { return probe(g.abs(p[0]), 6); }});

  return cases;
}

/// Relative adjoint error of case `c` on the draw for `seed`.
inline double primitive_fd_error(const PrimitiveCase& c, int seed) {
  Rng rng(static_cast<std::uint64_t>(seed) * 7919 + c.name.size());
  return finite_difference_check(c.build, c.make(rng));
}

}  // namespace unigaze::test_support
