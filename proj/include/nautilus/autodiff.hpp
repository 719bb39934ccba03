#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nautilus/util.hpp"

namespace nautilus::ad {

// Reverse-mode automatic differentiation over Eigen double matrices.
// Values are T x C (rows = time frames). Graphs are built per forward pass
// and discarded after backward(); nodes hold shared ownership of parents.

class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Mat value;
  Mat grad;  // empty until touched by backward()
  bool needs_grad = false;
  std::uint64_t id = 0;  // creation order; parents always have smaller ids
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;

  void accumulate(const Mat& g);
};

Var constant(Mat v);
Var leaf(Mat v, bool needs_grad = true);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);            // elementwise
Var mul_const(const Var& a, const Mat& m);      // elementwise by fixed matrix
Var affine(const Var& a, double scale, double shift);
Var matmul(const Var& a, const Var& b);
Var tanh_v(const Var& a);
Var sigmoid_v(const Var& a);
Var exp_v(const Var& a);
Var square_v(const Var& a);
Var abs_v(const Var& a);
Var shift_rows(const Var& a, int offset);       // offset > 0 delays (zero fill)
Var reverse_rows(const Var& a);
Var concat_cols(const Var& a, const Var& b);
Var add_row_bias(const Var& x, const Var& bias);  // bias is 1 x C
Var gather_rows(const Var& table, std::vector<int> ids);  // id < 0 yields a zero row
Var fo_scan(const Var& f, const Var& c);        // h_t = f_t*h_{t-1} + (1-f_t)*c_t
Var softmax_rows(const Var& a);
Var mean_all(const Var& a);
Var sum_all(const Var& a);
// Mean over rows of -ln(max(p[t, label[t]], clamp)).
Var ce_rows(const Var& probs, std::vector<int> labels, double clamp = 1e-8);

// Backpropagate from a 1x1 root. Grads accumulate; call clear_grads between
// repeated backward passes over a shared graph.
void backward(const Var& root);
void clear_grads(const std::vector<Var>& roots);
double scalar(const Var& v);

// Binds named parameters from a store to leaf vars, one leaf per name, and
// harvests their gradients after backward().
class ParamGraph {
 public:
  explicit ParamGraph(const std::map<std::string, Mat>& values,
                      std::function<bool(const std::string&)> trainable = nullptr);

  Var operator()(const std::string& name);
  bool bound(const std::string& name) const { return bound_.count(name) > 0; }
  bool have(const std::string& name) const { return values_->count(name) > 0; }

  // name -> accumulated gradient, for every bound trainable param that
  // received one.
  std::map<std::string, Mat> grads() const;

 private:
  const std::map<std::string, Mat>* values_;
  std::function<bool(const std::string&)> trainable_;
  std::map<std::string, Var> bound_;
};

}  // namespace nautilus::ad
