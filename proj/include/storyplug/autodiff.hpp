#pragma once

// Minimal reverse-mode differentiation over dense double matrices. Every
// toy-backend forward pass is written against these ops so the same code path
// serves inference (no tape) and text-encoder fine-tuning (tape + backward).

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace storyplug::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Matrix& g);
};

using Var = std::shared_ptr<Node>;

Var constant(Matrix value);
Var leaf(Matrix value, bool requires_grad);

inline const Matrix& value(const Var& v) { return v->value; }
inline double scalar(const Var& v) { return v->value(0, 0); }

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var add_constant(const Var& a, const Matrix& c);
// Replaces the forward value while passing the gradient straight through.
// Used for additive edits whose constant offsets must land bit-exactly.
Var override_value(const Var& a, Matrix replacement);
// a + row broadcast over every row of a; row is 1 x cols(a).
Var add_row(const Var& a, const Var& row);
Var scale(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var tanh(const Var& a);
Var softmax_rows(const Var& a);
// Entries strictly above the diagonal become -inf (they receive no gradient).
Var causal_mask(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var gather_rows(const Var& table, std::span<const int> ids);
Var gather_rows_const(const Matrix& table, std::span<const int> ids);
Var select_rows(const Var& a, std::span<const int> rows);
// 1x1 results
Var sum_squares(const Var& a);
Var mean_squared_error(const Var& prediction, const Matrix& target);

// Seeds d(root)/d(root) = 1 and propagates into every reachable node that
// requires a gradient. Gradients accumulate; call on a fresh graph.
void backward(const Var& root);

}  // namespace storyplug::ad
