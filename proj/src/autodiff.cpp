#include "nautilus/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>
#include <utility>

#include "nautilus/errors.hpp"

namespace nautilus::ad {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

Var make_node(Mat value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  for (const auto& p : parents)
    if (p->needs_grad) n->needs_grad = true;
  n->parents = std::move(parents);
  if (n->needs_grad) n->backprop = std::move(backprop);
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw ModelError(std::string(op) + ": shape mismatch");
}

}  // namespace

void Node::accumulate(const Mat& g) {
  if (!needs_grad) return;
  if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
  grad += g;
}

Var constant(Mat v) { return leaf(std::move(v), false); }

Var leaf(Mat v, bool needs_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->needs_grad = needs_grad;
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_node(a->value + b->value, {a, b}, [a, b](Node& n) {
    a->accumulate(n.grad);
    b->accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_node(a->value - b->value, {a, b}, [a, b](Node& n) {
    a->accumulate(n.grad);
    b->accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make_node(a->value.cwiseProduct(b->value), {a, b}, [a, b](Node& n) {
    a->accumulate(n.grad.cwiseProduct(b->value));
    b->accumulate(n.grad.cwiseProduct(a->value));
  });
}

Var mul_const(const Var& a, const Mat& m) {
  if (a->value.rows() != m.rows() || a->value.cols() != m.cols())
    throw ModelError("mul_const: shape mismatch");
  return make_node(a->value.cwiseProduct(m), {a},
                   [a, m](Node& n) { a->accumulate(n.grad.cwiseProduct(m)); });
}

Var affine(const Var& a, double scale, double shift) {
  return make_node((a->value.array() * scale + shift).matrix(), {a},
                   [a, scale](Node& n) { a->accumulate(scale * n.grad); });
}

Var matmul(const Var& a, const Var& b) {
  if (a->value.cols() != b->value.rows()) throw ModelError("matmul: inner dims differ");
  return make_node(a->value * b->value, {a, b}, [a, b](Node& n) {
    a->accumulate(n.grad * b->value.transpose());
    b->accumulate(a->value.transpose() * n.grad);
  });
}

Var tanh_v(const Var& a) {
  Mat y = a->value.array().tanh().matrix();
  return make_node(y, {a}, [a](Node& n) {
    a->accumulate(n.grad.cwiseProduct((1.0 - n.value.array().square()).matrix()));
  });
}

Var sigmoid_v(const Var& a) {
  Mat y = (1.0 / (1.0 + (-a->value.array()).exp())).matrix();
  return make_node(y, {a}, [a](Node& n) {
    a->accumulate(n.grad.cwiseProduct((n.value.array() * (1.0 - n.value.array())).matrix()));
  });
}

Var exp_v(const Var& a) {
  return make_node(a->value.array().exp().matrix(), {a},
                   [a](Node& n) { a->accumulate(n.grad.cwiseProduct(n.value)); });
}

Var square_v(const Var& a) {
  return make_node(a->value.array().square().matrix(), {a},
                   [a](Node& n) { a->accumulate(n.grad.cwiseProduct(2.0 * a->value)); });
}

Var abs_v(const Var& a) {
  return make_node(a->value.array().abs().matrix(), {a}, [a](Node& n) {
    a->accumulate(n.grad.cwiseProduct(a->value.array().sign().matrix()));
  });
}

Var shift_rows(const Var& a, int offset) {
  const Eigen::Index t = a->value.rows();
  Mat y = Mat::Zero(t, a->value.cols());
  const Eigen::Index k = std::abs(offset);
  if (k < t) {
    if (offset >= 0)
      y.bottomRows(t - k) = a->value.topRows(t - k);
    else
      y.topRows(t - k) = a->value.bottomRows(t - k);
  }
  return make_node(std::move(y), {a}, [a, offset](Node& n) {
    const Eigen::Index rows = n.value.rows();
    const Eigen::Index k2 = std::abs(offset);
    if (k2 >= rows) return;
    Mat g = Mat::Zero(rows, n.value.cols());
    if (offset >= 0)
      g.topRows(rows - k2) = n.grad.bottomRows(rows - k2);
    else
      g.bottomRows(rows - k2) = n.grad.topRows(rows - k2);
    a->accumulate(g);
  });
}

Var reverse_rows(const Var& a) {
  return make_node(a->value.colwise().reverse(), {a},
                   [a](Node& n) { a->accumulate(n.grad.colwise().reverse()); });
}

Var concat_cols(const Var& a, const Var& b) {
  if (a->value.rows() != b->value.rows()) throw ModelError("concat_cols: row mismatch");
  Mat y(a->value.rows(), a->value.cols() + b->value.cols());
  y << a->value, b->value;
  const Eigen::Index ca = a->value.cols();
  return make_node(std::move(y), {a, b}, [a, b, ca](Node& n) {
    a->accumulate(n.grad.leftCols(ca));
    b->accumulate(n.grad.rightCols(n.grad.cols() - ca));
  });
}

Var add_row_bias(const Var& x, const Var& bias) {
  if (bias->value.rows() != 1 || bias->value.cols() != x->value.cols())
    throw ModelError("add_row_bias: bias must be 1 x C");
  Mat y = x->value.rowwise() + bias->value.row(0);
  return make_node(std::move(y), {x, bias}, [x, bias](Node& n) {
    x->accumulate(n.grad);
    bias->accumulate(n.grad.colwise().sum());
  });
}

Var gather_rows(const Var& table, std::vector<int> ids) {
  const Eigen::Index rows = table->value.rows();
  Mat y = Mat::Zero(static_cast<Eigen::Index>(ids.size()), table->value.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) throw ModelError("gather_rows: id out of range");
    if (ids[i] >= 0) y.row(static_cast<Eigen::Index>(i)) = table->value.row(ids[i]);
  }
  return make_node(std::move(y), {table}, [table, ids = std::move(ids)](Node& n) {
    Mat g = Mat::Zero(table->value.rows(), table->value.cols());
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] >= 0) g.row(ids[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    table->accumulate(g);
  });
}

Var fo_scan(const Var& f, const Var& c) {
  check_same_shape(f, c, "fo_scan");
  const Eigen::Index t = f->value.rows();
  Mat h(t, f->value.cols());
  for (Eigen::Index i = 0; i < t; ++i) {
    Eigen::RowVectorXd prev = Eigen::RowVectorXd::Zero(f->value.cols());
    if (i > 0) prev = h.row(i - 1);
    h.row(i) = f->value.row(i).cwiseProduct(prev) +
               (1.0 - f->value.row(i).array()).matrix().cwiseProduct(c->value.row(i));
  }
  return make_node(std::move(h), {f, c}, [f, c](Node& n) {
    const Eigen::Index rows = n.value.rows();
    Mat gf(rows, n.value.cols());
    Mat gc(rows, n.value.cols());
    Eigen::RowVectorXd carry = Eigen::RowVectorXd::Zero(n.value.cols());
    for (Eigen::Index i = rows - 1; i >= 0; --i) {
      Eigen::RowVectorXd gh = n.grad.row(i) + carry;
      Eigen::RowVectorXd prev = Eigen::RowVectorXd::Zero(n.value.cols());
      if (i > 0) prev = n.value.row(i - 1);
      gf.row(i) = gh.cwiseProduct(prev - c->value.row(i));
      gc.row(i) = gh.cwiseProduct((1.0 - f->value.row(i).array()).matrix());
      carry = gh.cwiseProduct(f->value.row(i));
    }
    f->accumulate(gf);
    c->accumulate(gc);
  });
}

Var softmax_rows(const Var& a) {
  Mat y = a->value;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    Eigen::RowVectorXd r = y.row(i);
    const double m = r.maxCoeff();
    r = (r.array() - m).exp();
    y.row(i) = r / r.sum();
  }
  return make_node(std::move(y), {a}, [a](Node& n) {
    Mat g(n.value.rows(), n.value.cols());
    for (Eigen::Index i = 0; i < n.value.rows(); ++i) {
      const double dot = n.grad.row(i).dot(n.value.row(i));
      g.row(i) = n.value.row(i).cwiseProduct((n.grad.row(i).array() - dot).matrix());
    }
    a->accumulate(g);
  });
}

Var mean_all(const Var& a) {
  Mat y(1, 1);
  y(0, 0) = a->value.mean();
  const double inv = 1.0 / static_cast<double>(a->value.size());
  return make_node(std::move(y), {a}, [a, inv](Node& n) {
    a->accumulate(Mat::Constant(a->value.rows(), a->value.cols(), n.grad(0, 0) * inv));
  });
}

Var sum_all(const Var& a) {
  Mat y(1, 1);
  y(0, 0) = a->value.sum();
  return make_node(std::move(y), {a}, [a](Node& n) {
    a->accumulate(Mat::Constant(a->value.rows(), a->value.cols(), n.grad(0, 0)));
  });
}

Var ce_rows(const Var& probs, std::vector<int> labels, double clamp) {
  const Eigen::Index t = probs->value.rows();
  if (static_cast<Eigen::Index>(labels.size()) != t) throw LossError("ce_rows: label count != rows");
  double total = 0.0;
  for (Eigen::Index i = 0; i < t; ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l < 0 || l >= probs->value.cols()) throw LossError("ce_rows: label out of range");
    total += -std::log(std::max(probs->value(i, l), clamp));
  }
  Mat y(1, 1);
  y(0, 0) = total / static_cast<double>(t);
  return make_node(std::move(y), {probs}, [probs, labels = std::move(labels), clamp](Node& n) {
    const Eigen::Index rows = probs->value.rows();
    Mat g = Mat::Zero(rows, probs->value.cols());
    const double scale = n.grad(0, 0) / static_cast<double>(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
      const int l = labels[static_cast<std::size_t>(i)];
      const double p = probs->value(i, l);
      if (p > clamp) g(i, l) = -scale / p;
    }
    probs->accumulate(g);
  });
}

namespace {

// All nodes reachable from the roots, deduplicated.
std::vector<Node*> reachable(const std::vector<Var>& roots) {
  std::vector<Node*> stack;
  std::unordered_set<Node*> seen;
  std::vector<Node*> out;
  for (const auto& r : roots)
    if (r && seen.insert(r.get()).second) stack.push_back(r.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    out.push_back(n);
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  return out;
}

}  // namespace

void backward(const Var& root) {
  if (root->value.rows() != 1 || root->value.cols() != 1)
    throw ModelError("backward: root must be scalar");
  if (!root->needs_grad) return;
  auto nodes = reachable({root});
  // Creation ids give a topological order (parents precede children).
  std::sort(nodes.begin(), nodes.end(), [](Node* a, Node* b) { return a->id > b->id; });
  root->accumulate(Mat::Ones(1, 1));
  for (Node* n : nodes) {
    if (!n->needs_grad || n->grad.size() == 0 || !n->backprop) continue;
    n->backprop(*n);
  }
}

void clear_grads(const std::vector<Var>& roots) {
  for (Node* n : reachable(roots)) n->grad.resize(0, 0);
}

double scalar(const Var& v) {
  if (v->value.size() != 1) throw ModelError("scalar: not 1x1");
  return v->value(0, 0);
}

ParamGraph::ParamGraph(const std::map<std::string, Mat>& values,
                       std::function<bool(const std::string&)> trainable)
    : values_(&values), trainable_(std::move(trainable)) {}

Var ParamGraph::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  auto vit = values_->find(name);
  if (vit == values_->end()) throw ModelError("unknown parameter: " + name);
  const bool train = trainable_ ? trainable_(name) : true;
  Var v = leaf(vit->second, train);
  bound_.emplace(name, v);
  return v;
}

std::map<std::string, Mat> ParamGraph::grads() const {
  std::map<std::string, Mat> out;
  for (const auto& [name, var] : bound_) {
    if (!var->needs_grad) continue;
    if (var->grad.size() == 0) continue;
    out.emplace(name, var->grad);
  }
  return out;
}

}  // namespace nautilus::ad
