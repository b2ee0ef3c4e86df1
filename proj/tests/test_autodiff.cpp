#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "seqrec/autodiff.hpp"
#include "seqrec/rng.hpp"

using namespace seqrec;
namespace ad = seqrec::ad;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Central-difference check of d(scalar_fn)/d(inputs) against the tape.
// scalar_fn rebuilds the graph from the given leaves on every call.
double max_rel_err(std::vector<ad::Var>& leaves,
                   const std::function<ad::Var(const std::vector<ad::Var>&)>& scalar_fn,
                   double h = 1e-6) {
  ad::Var loss = scalar_fn(leaves);
  for (auto& l : leaves) l.node()->zero_grad();
  ad::backward(loss);
  double worst = 0.0;
  for (auto& leaf : leaves) {
    Tensor& val = leaf.mutable_value();
    for (size_t i = 0; i < val.data.size(); ++i) {
      const double orig = val.data[i];
      val.data[i] = orig + h;
      const double fp = scalar_fn(leaves).value().data[0];
      val.data[i] = orig - h;
      const double fm = scalar_fn(leaves).value().data[0];
      val.data[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = leaf.grad().data.empty() ? 0.0 : leaf.grad().data[i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

// Weighted sum to turn any tensor output into a scalar with generic weights.
ad::Var weighted(const ad::Var& x, uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_tensor(x.value().shape, rng, -1.0, 1.0);
  return ad::dot_const(x, w);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(11);
  std::vector<ad::Var> leaves{ad::make_param(random_tensor({3, 4}, rng)),
                              ad::make_param(random_tensor({3, 4}, rng))};
  auto fn = [](const std::vector<ad::Var>& v) {
    auto s = ad::add(v[0], v[1]);
    s = ad::mul(s, v[0]);
    s = ad::sub(s, ad::scale(v[1], 0.7));
    s = ad::add_scalar(s, 0.3);
    return weighted(ad::tanh_op(s), 5);
  };
  CHECK(max_rel_err(leaves, fn) < 1e-6);
}

TEST_CASE("matmul with transpose flags matches finite differences") {
  Rng rng(12);
  std::vector<ad::Var> leaves{ad::make_param(random_tensor({3, 5}, rng)),
                              ad::make_param(random_tensor({5, 2}, rng)),
                              ad::make_param(random_tensor({3, 2}, rng))};
  auto fn = [](const std::vector<ad::Var>& v) {
    auto a = ad::matmul(v[0], v[1]);                 // 3x2
    auto b = ad::matmul(v[0], v[0], true, false);    // 5x5
    auto c = ad::matmul(v[2], v[1], false, true);    // 3x5
    return ad::add(ad::add(weighted(a, 1), weighted(b, 2)), weighted(c, 3));
  };
  CHECK(max_rel_err(leaves, fn) < 1e-6);
}

TEST_CASE("embedding gather scatters gradients to the right rows") {
  Rng rng(13);
  std::vector<ad::Var> leaves{ad::make_param(random_tensor({6, 3}, rng))};
  std::vector<int64_t> ids{0, 2, 2, 5};
  auto fn = [&](const std::vector<ad::Var>& v) {
    return weighted(ad::embed_rows(v[0], ids), 7);
  };
  CHECK(max_rel_err(leaves, fn) < 1e-6);
  // untouched rows keep zero gradient
  auto loss = fn(leaves);
  leaves[0].node()->zero_grad();
  ad::backward(loss);
  for (int64_t j = 0; j < 3; ++j) {
    CHECK(leaves[0].grad().at(1, j) == 0.0);
    CHECK(leaves[0].grad().at(3, j) == 0.0);
  }
}

TEST_CASE("layer norm matches finite differences") {
  Rng rng(14);
  std::vector<ad::Var> leaves{ad::make_param(random_tensor({4, 6}, rng)),
                              ad::make_param(random_tensor({6}, rng, 0.5, 1.5)),
                              ad::make_param(random_tensor({6}, rng))};
  auto fn = [](const std::vector<ad::Var>& v) {
    return weighted(ad::layer_norm(v[0], v[1], v[2]), 9);
  };
  CHECK(max_rel_err(leaves, fn) < 1e-5);
}

TEST_CASE("gelu and row normalize match finite differences") {
  Rng rng(15);
  std::vector<ad::Var> leaves{ad::make_param(random_tensor({4, 5}, rng))};
  auto fn = [](const std::vector<ad::Var>& v) {
    return weighted(ad::row_l2_normalize(ad::gelu(v[0])), 21);
  };
  CHECK(max_rel_err(leaves, fn) < 1e-5);
}

TEST_CASE("row normalize rejects a zero row naming its index") {
  Tensor t = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 0.0});
  auto v = ad::make_param(t);
  CHECK_THROWS_WITH_AS(ad::row_l2_normalize(v),
                       doctest::Contains("view 1"), std::domain_error);
}

TEST_CASE("dropout is deterministic per seed and masks gradients") {
  Rng rng(16);
  Tensor x = random_tensor({8, 8}, rng);
  auto a = ad::dropout(ad::make_param(x), 0.4, 77);
  auto b = ad::dropout(ad::make_param(x), 0.4, 77);
  CHECK(a.value().data == b.value().data);
  auto c = ad::dropout(ad::make_param(x), 0.4, 78);
  CHECK(a.value().data != c.value().data);

  std::vector<ad::Var> leaves{ad::make_param(x)};
  auto fn = [](const std::vector<ad::Var>& v) {
    return weighted(ad::dropout(v[0], 0.4, 123), 3);
  };
  CHECK(max_rel_err(leaves, fn) < 1e-6);
}

TEST_CASE("attention matches finite differences with ragged lengths") {
  Rng rng(17);
  const int64_t B = 2, L = 5, D = 6, H = 2;
  std::vector<int64_t> lengths{5, 3};
  std::vector<ad::Var> leaves{ad::make_param(random_tensor({B * L, D}, rng)),
                              ad::make_param(random_tensor({B * L, D}, rng)),
                              ad::make_param(random_tensor({B * L, D}, rng))};
  auto fn = [&](const std::vector<ad::Var>& v) {
    return weighted(ad::attention(v[0], v[1], v[2], B, L, H, lengths), 31);
  };
  CHECK(max_rel_err(leaves, fn) < 1e-5);
}

TEST_CASE("attention is causal and ignores padding") {
  Rng rng(18);
  const int64_t B = 1, L = 4, D = 4, H = 1;
  std::vector<int64_t> lengths{3};  // first position padded
  Tensor q = random_tensor({L, D}, rng), k = random_tensor({L, D}, rng),
         v = random_tensor({L, D}, rng);
  auto out1 = ad::attention(ad::make_param(q), ad::make_param(k), ad::make_param(v),
                            B, L, H, lengths);
  // perturbing the last position must not change earlier outputs
  Tensor k2 = k, v2 = v, q2 = q;
  for (int64_t j = 0; j < D; ++j) {
    k2.at(L - 1, j) += 0.5;
    v2.at(L - 1, j) -= 0.3;
    q2.at(L - 1, j) += 0.2;
  }
  auto out2 = ad::attention(ad::make_param(q2), ad::make_param(k2), ad::make_param(v2),
                            B, L, H, lengths);
  for (int64_t t = 0; t < L - 1; ++t)
    for (int64_t j = 0; j < D; ++j) CHECK(out1.value().at(t, j) == out2.value().at(t, j));
  // perturbing the padded position must not change real outputs
  Tensor k3 = k, v3 = v;
  for (int64_t j = 0; j < D; ++j) {
    k3.at(0, j) += 1.0;
    v3.at(0, j) += 1.0;
  }
  auto out3 = ad::attention(ad::make_param(q), ad::make_param(k3), ad::make_param(v3),
                            B, L, H, lengths);
  for (int64_t t = 1; t < L; ++t)
    for (int64_t j = 0; j < D; ++j) CHECK(out1.value().at(t, j) == out3.value().at(t, j));
}

TEST_CASE("cross entropy mean matches finite differences and closed form") {
  Rng rng(19);
  std::vector<int64_t> targets{2, 1, 3};
  std::vector<ad::Var> leaves{ad::make_param(random_tensor({3, 4}, rng))};
  auto fn = [&](const std::vector<ad::Var>& v) {
    return ad::cross_entropy_mean(v[0], targets, true);
  };
  CHECK(max_rel_err(leaves, fn) < 1e-6);

  // two scored items with equal logits -> ln 2
  Tensor two = Tensor::matrix(1, 3, {50.0, 0.4, 0.4});  // col 0 masked out
  auto l = ad::cross_entropy_mean(ad::make_param(two), {1}, true);
  CHECK(l.value().data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("contrastive terms match finite differences in both modes") {
  Rng rng(20);
  const int64_t n = 6;
  ad::ContrastCtx ctx;
  ctx.pos = {3, 4, 5, 0, 1, 2};
  ctx.m_minus = {{1, 2}, {2, 5}, {0}, {1, 2, 4}, {0}, {0, 1}};
  ctx.m_plus = {{4}, {0}, {1, 4}, {5}, {2, 3}, {3}};
  ctx.tau = 0.8;

  for (bool ps : {false, true}) {
    ctx.positive_sampling = ps;
    std::vector<ad::Var> leaves{ad::make_param(random_tensor({n, n}, rng))};
    auto fn = [&](const std::vector<ad::Var>& v) {
      return weighted(ad::contrastive_terms(v[0], ctx), 41);
    };
    CHECK(max_rel_err(leaves, fn) < 1e-6);
  }
}

TEST_CASE("contrastive term with empty negatives is exactly zero") {
  Tensor s = Tensor::matrix(2, 2, {1.0, 0.42, 0.42, 1.0});
  ad::ContrastCtx ctx;
  ctx.pos = {1, 0};
  ctx.m_minus = {{}, {}};
  ctx.m_plus = {{}, {}};
  auto terms = ad::contrastive_terms(ad::make_param(s), ctx);
  CHECK(terms.value().at(0) == 0.0);
  CHECK(terms.value().at(1) == 0.0);
}

TEST_CASE("detach blocks gradient flow") {
  Rng rng(22);
  auto x = ad::make_param(random_tensor({2, 2}, rng));
  auto loss = ad::sum_all(ad::mul(ad::detach(x), x));
  x.node()->zero_grad();
  ad::backward(loss);
  for (int64_t i = 0; i < 4; ++i)
    CHECK(x.grad().data[i] == doctest::Approx(x.value().data[i]));  // only the live factor
}

TEST_CASE("shared subexpressions accumulate gradients") {
  auto x = ad::make_param(Tensor::scalar(3.0));
  auto y = ad::mul(x, x);  // x^2, both parents the same node
  ad::backward(ad::sum_all(y));
  CHECK(x.grad().data[0] == doctest::Approx(6.0));
}

TEST_CASE("sq_diff_sum and reductions match finite differences") {
  Rng rng(23);
  std::vector<ad::Var> leaves{ad::make_param(random_tensor({5}, rng))};
  auto fn = [](const std::vector<ad::Var>& v) {
    auto a = ad::sq_diff_sum(v[0], 0.25);
    auto b = ad::mean_all(ad::mul(v[0], v[0]));
    return ad::add(a, b);
  };
  CHECK(max_rel_err(leaves, fn) < 1e-6);
}
