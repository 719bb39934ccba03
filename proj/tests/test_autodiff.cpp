#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "nautilus/autodiff.hpp"
#include "nautilus/errors.hpp"
#include "nautilus/rng.hpp"
#include "test_util.hpp"

using namespace nautilus;
using ad::Var;
using test::gradcheck;
using test::random_mat;

namespace {

constexpr double kTol = 1e-3;

Var sum_sq(const Var& v) { return ad::sum_all(ad::square_v(v)); }

}  // namespace

TEST_CASE("add sub mul") {
  Rng rng(1);
  Mat a = random_mat(rng, 3, 4);
  Mat b = random_mat(rng, 3, 4);
  auto res = gradcheck(
      [](const std::vector<Var>& in) {
        return sum_sq(ad::mul(ad::add(in[0], in[1]), ad::sub(in[0], in[1])));
      },
      {a, b});
  CHECK(res.max_rel_err < kTol);
}

TEST_CASE("matmul") {
  Rng rng(2);
  Mat a = random_mat(rng, 3, 5);
  Mat b = random_mat(rng, 5, 2);
  auto res = gradcheck(
      [](const std::vector<Var>& in) { return sum_sq(ad::matmul(in[0], in[1])); },
      {a, b});
  CHECK(res.max_rel_err < kTol);
}

TEST_CASE("matmul rejects bad shapes") {
  Var a = ad::leaf(Mat::Zero(2, 3));
  Var b = ad::leaf(Mat::Zero(4, 2));
  CHECK_THROWS_AS(ad::matmul(a, b), ModelError);
}

TEST_CASE("pointwise nonlinearities") {
  Rng rng(3);
  Mat a = random_mat(rng, 4, 3);
  for (auto op : {&ad::tanh_v, &ad::sigmoid_v, &ad::exp_v, &ad::square_v}) {
    auto res = gradcheck(
        [op](const std::vector<Var>& in) { return ad::sum_all(op(in[0])); }, {a});
    CHECK(res.max_rel_err < kTol);
  }
}

TEST_CASE("abs away from kink") {
  Rng rng(4);
  Mat a = random_mat(rng, 4, 3);
  a = (a.array().abs() + 0.5).matrix().cwiseProduct(a.array().sign().matrix());
  auto res = gradcheck(
      [](const std::vector<Var>& in) { return ad::sum_all(ad::abs_v(in[0])); }, {a});
  CHECK(res.max_rel_err < kTol);
}

TEST_CASE("affine and mul_const") {
  Rng rng(5);
  Mat a = random_mat(rng, 3, 3);
  Mat m = random_mat(rng, 3, 3);
  auto res = gradcheck(
      [&m](const std::vector<Var>& in) {
        return ad::sum_all(ad::mul_const(ad::affine(in[0], -1.7, 0.3), m));
      },
      {a});
  CHECK(res.max_rel_err < kTol);
}

TEST_CASE("shift_rows forward") {
  Mat a(3, 2);
  a << 1, 2, 3, 4, 5, 6;
  Var delayed = ad::shift_rows(ad::leaf(a, false), 1);
  CHECK(delayed->value(0, 0) == 0.0);
  CHECK(delayed->value(1, 0) == 1.0);
  CHECK(delayed->value(2, 1) == 4.0);
}

TEST_CASE("shift_rows gradients both directions") {
  Rng rng(6);
  Mat a = random_mat(rng, 5, 2);
  Mat w = random_mat(rng, 5, 2);
  for (int offset : {2, -1, 0, 7}) {
    auto res = gradcheck(
        [offset, &w](const std::vector<Var>& in) {
          return ad::sum_all(ad::mul_const(ad::shift_rows(in[0], offset), w));
        },
        {a});
    CHECK(res.max_rel_err < kTol);
  }
}

TEST_CASE("reverse_rows") {
  Rng rng(7);
  Mat a = random_mat(rng, 4, 2);
  Mat w = random_mat(rng, 4, 2);
  Var rev = ad::reverse_rows(ad::leaf(a, false));
  CHECK(rev->value(0, 0) == a(3, 0));
  auto res = gradcheck(
      [&w](const std::vector<Var>& in) {
        return ad::sum_all(ad::mul_const(ad::reverse_rows(in[0]), w));
      },
      {a});
  CHECK(res.max_rel_err < kTol);
}

TEST_CASE("concat_cols and add_row_bias") {
  Rng rng(8);
  Mat a = random_mat(rng, 3, 2);
  Mat b = random_mat(rng, 3, 4);
  Mat bias = random_mat(rng, 1, 6);
  auto res = gradcheck(
      [](const std::vector<Var>& in) {
        return sum_sq(ad::add_row_bias(ad::concat_cols(in[0], in[1]), in[2]));
      },
      {a, b, bias});
  CHECK(res.max_rel_err < kTol);
}

TEST_CASE("gather_rows with repeats and padding") {
  Rng rng(9);
  Mat table = random_mat(rng, 5, 3);
  std::vector<int> ids{0, 2, 2, -1, 4, 2};
  Var g = ad::gather_rows(ad::leaf(table, false), ids);
  CHECK(g->value.rows() == 6);
  CHECK(g->value.row(3).cwiseAbs().maxCoeff() == 0.0);
  CHECK(g->value.row(1) == table.row(2));
  auto res = gradcheck(
      [&ids](const std::vector<Var>& in) {
        return sum_sq(ad::gather_rows(in[0], ids));
      },
      {table});
  CHECK(res.max_rel_err < kTol);
}

TEST_CASE("gather_rows rejects out-of-range") {
  Var t = ad::leaf(Mat::Zero(3, 2));
  CHECK_THROWS_AS(ad::gather_rows(t, {0, 3}), ModelError);
}

TEST_CASE("fo_scan matches manual recurrence") {
  Rng rng(10);
  Mat f = (random_mat(rng, 4, 2).array().tanh() * 0.4 + 0.5).matrix();
  Mat c = random_mat(rng, 4, 2);
  Var h = ad::fo_scan(ad::leaf(f, false), ad::leaf(c, false));
  Eigen::RowVectorXd prev = Eigen::RowVectorXd::Zero(2);
  for (int t = 0; t < 4; ++t) {
    Eigen::RowVectorXd expect =
        f.row(t).cwiseProduct(prev) + (1 - f.row(t).array()).matrix().cwiseProduct(c.row(t));
    CHECK((h->value.row(t) - expect).cwiseAbs().maxCoeff() < 1e-12);
    prev = h->value.row(t);
  }
}

TEST_CASE("fo_scan gradients") {
  Rng rng(11);
  Mat fraw = random_mat(rng, 6, 3);
  Mat c = random_mat(rng, 6, 3);
  Mat w = random_mat(rng, 6, 3);
  auto res = gradcheck(
      [&w](const std::vector<Var>& in) {
        return ad::sum_all(ad::mul_const(ad::fo_scan(ad::sigmoid_v(in[0]), in[1]), w));
      },
      {fraw, c});
  CHECK(res.max_rel_err < kTol);
}

TEST_CASE("softmax_rows sums to one and differentiates") {
  Rng rng(12);
  Mat a = random_mat(rng, 3, 5, 2.0);
  Mat w = random_mat(rng, 3, 5);
  Var y = ad::softmax_rows(ad::leaf(a, false));
  for (int i = 0; i < 3; ++i) CHECK(std::abs(y->value.row(i).sum() - 1.0) < 1e-12);
  auto res = gradcheck(
      [&w](const std::vector<Var>& in) {
        return ad::sum_all(ad::mul_const(ad::softmax_rows(in[0]), w));
      },
      {a});
  CHECK(res.max_rel_err < kTol);
}

TEST_CASE("softmax is shift invariant") {
  Mat a(1, 4);
  a << 100.0, 101.0, 102.0, 103.0;
  Mat b = (a.array() + 500.0).matrix();
  Var ya = ad::softmax_rows(ad::leaf(a, false));
  Var yb = ad::softmax_rows(ad::leaf(b, false));
  CHECK((ya->value - yb->value).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("mean_all sum_all") {
  Rng rng(13);
  Mat a = random_mat(rng, 3, 4);
  auto res1 = gradcheck(
      [](const std::vector<Var>& in) { return ad::mean_all(ad::square_v(in[0])); }, {a});
  CHECK(res1.max_rel_err < kTol);
  Var s = ad::sum_all(ad::leaf(a, false));
  Var m = ad::mean_all(ad::leaf(a, false));
  CHECK(std::abs(ad::scalar(s) / 12.0 - ad::scalar(m)) < 1e-12);
}

TEST_CASE("ce_rows value and gradient") {
  Rng rng(14);
  Mat logits = random_mat(rng, 5, 4, 1.5);
  std::vector<int> labels{0, 3, 1, 1, 2};
  auto res = gradcheck(
      [&labels](const std::vector<Var>& in) {
        return ad::ce_rows(ad::softmax_rows(in[0]), labels);
      },
      {logits});
  CHECK(res.max_rel_err < kTol);

  Var probs = ad::softmax_rows(ad::leaf(logits, false));
  double manual = 0.0;
  for (int t = 0; t < 5; ++t) manual += -std::log(probs->value(t, labels[t]));
  manual /= 5.0;
  Var loss = ad::ce_rows(probs, labels);
  CHECK(std::abs(ad::scalar(loss) - manual) < 1e-12);
}

TEST_CASE("ce_rows validates labels") {
  Var p = ad::leaf(Mat::Constant(2, 3, 1.0 / 3.0));
  CHECK_THROWS_AS(ad::ce_rows(p, {0}), LossError);
  CHECK_THROWS_AS(ad::ce_rows(p, {0, 5}), LossError);
}

TEST_CASE("grad accumulates across shared subgraphs") {
  Mat a(1, 1);
  a << 2.0;
  Var x = ad::leaf(a, true);
  Var y = ad::mul(x, x);          // x^2
  Var z = ad::add(y, ad::mul(y, y));  // x^2 + x^4
  ad::backward(ad::sum_all(z));
  // d/dx = 2x + 4x^3 = 4 + 32
  CHECK(std::abs(x->grad(0, 0) - 36.0) < 1e-10);
}

TEST_CASE("clear_grads resets between passes") {
  Mat a(1, 1);
  a << 3.0;
  Var x = ad::leaf(a, true);
  Var root = ad::sum_all(ad::square_v(x));
  ad::backward(root);
  CHECK(std::abs(x->grad(0, 0) - 6.0) < 1e-12);
  ad::clear_grads({root});
  CHECK(x->grad.size() == 0);
  ad::backward(root);
  CHECK(std::abs(x->grad(0, 0) - 6.0) < 1e-12);
}

TEST_CASE("constants receive no gradient") {
  Mat a(2, 2);
  a.setOnes();
  Var c = ad::constant(a);
  Var x = ad::leaf(a, true);
  Var root = ad::sum_all(ad::mul(c, x));
  ad::backward(root);
  CHECK(c->grad.size() == 0);
  CHECK(x->grad.size() == 4);
}

TEST_CASE("backward requires scalar root") {
  Var x = ad::leaf(Mat::Zero(2, 2), true);
  CHECK_THROWS_AS(ad::backward(x), ModelError);
}

TEST_CASE("ParamGraph binds once and harvests grads") {
  std::map<std::string, Mat> store;
  store["w"] = Mat::Constant(1, 1, 2.0);
  store["frozen"] = Mat::Constant(1, 1, 5.0);
  ad::ParamGraph p(store, [](const std::string& n) { return n != "frozen"; });
  Var w1 = p("w");
  Var w2 = p("w");
  CHECK(w1.get() == w2.get());
  Var root = ad::sum_all(ad::mul(p("w"), p("frozen")));
  ad::backward(root);
  auto grads = p.grads();
  REQUIRE(grads.count("w") == 1);
  CHECK(grads.count("frozen") == 0);
  CHECK(std::abs(grads["w"](0, 0) - 5.0) < 1e-12);
  CHECK_THROWS_AS(p("missing"), ModelError);
}

TEST_CASE("deep chain gradcheck") {
  Rng rng(15);
  Mat x = random_mat(rng, 3, 4);
  Mat w1 = random_mat(rng, 4, 4, 0.5);
  Mat w2 = random_mat(rng, 4, 2, 0.5);
  auto res = gradcheck(
      [](const std::vector<Var>& in) {
        Var h = ad::tanh_v(ad::matmul(in[0], in[1]));
        Var g = ad::sigmoid_v(ad::matmul(h, in[2]));
        return ad::mean_all(ad::square_v(g));
      },
      {x, w1, w2});
  CHECK(res.max_rel_err < kTol);
}
