#include "storyplug/autodiff.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace storyplug::ad {

void Node::accumulate(const Matrix& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

namespace {

Var make_node(Matrix value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    n->requires_grad = any;
    if (any) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
    }
    return n;
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string("shape mismatch in ") + op);
    }
}

}  // namespace

Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return n;
}

Var leaf(Matrix value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "add");
    return make_node(a->value + b->value, {a, b}, [](Node& self) {
        for (auto& p : self.parents)
            if (p->requires_grad) p->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "sub");
    return make_node(a->value - b->value, {a, b}, [](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
        if (self.parents[1]->requires_grad) self.parents[1]->accumulate(-self.grad);
    });
}

Var add_constant(const Var& a, const Matrix& c) {
    check_same_shape(a->value, c, "add_constant");
    return make_node(a->value + c, {a}, [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

Var override_value(const Var& a, Matrix replacement) {
    check_same_shape(a->value, replacement, "override_value");
    return make_node(std::move(replacement), {a}, [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

Var add_row(const Var& a, const Var& row) {
    if (row->value.rows() != 1 || row->value.cols() != a->value.cols()) {
        throw std::invalid_argument("shape mismatch in add_row");
    }
    Matrix out = a->value.rowwise() + row->value.row(0);
    return make_node(std::move(out), {a, row}, [](Node& self) {
        if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
        if (self.parents[1]->requires_grad) self.parents[1]->accumulate(self.grad.colwise().sum());
    });
}

Var scale(const Var& a, double s) {
    return make_node(a->value * s, {a}, [s](Node& self) { self.parents[0]->accumulate(self.grad * s); });
}

Var matmul(const Var& a, const Var& b) {
    if (a->value.cols() != b->value.rows()) throw std::invalid_argument("shape mismatch in matmul");
    return make_node(a->value * b->value, {a, b}, [](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) pa->accumulate(self.grad * pb->value.transpose());
        if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self.grad);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a->value.cols() != b->value.cols()) throw std::invalid_argument("shape mismatch in matmul_nt");
    return make_node(a->value * b->value.transpose(), {a, b}, [](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) pa->accumulate(self.grad * pb->value);
        if (pb->requires_grad) pb->accumulate(self.grad.transpose() * pa->value);
    });
}

Var tanh(const Var& a) {
    Matrix y = a->value.array().tanh().matrix();
    return make_node(y, {a}, [](Node& self) {
        Matrix d = self.grad.array() * (1.0 - self.value.array().square());
        self.parents[0]->accumulate(d);
    });
}

Var softmax_rows(const Var& a) {
    Matrix y(a->value.rows(), a->value.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double m = a->value.row(r).maxCoeff();
        y.row(r) = (a->value.row(r).array() - m).exp().matrix();
        y.row(r) /= y.row(r).sum();
    }
    return make_node(std::move(y), {a}, [](Node& self) {
        const Matrix& yv = self.value;
        Eigen::VectorXd dots = (self.grad.array() * yv.array()).rowwise().sum();
        Matrix d = yv.array() * (self.grad.colwise() - dots).array();
        self.parents[0]->accumulate(d);
    });
}

Var causal_mask(const Var& a) {
    Matrix y = a->value;
    const double neg_inf = -std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < y.rows(); ++r)
        for (Eigen::Index c = r + 1; c < y.cols(); ++c) y(r, c) = neg_inf;
    return make_node(std::move(y), {a}, [](Node& self) {
        Matrix d = self.grad;
        for (Eigen::Index r = 0; r < d.rows(); ++r)
            for (Eigen::Index c = r + 1; c < d.cols(); ++c) d(r, c) = 0.0;
        self.parents[0]->accumulate(d);
    });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
    const Eigen::Index n = x->value.cols();
    if (gain->value.rows() != 1 || gain->value.cols() != n || bias->value.rows() != 1 ||
        bias->value.cols() != n) {
        throw std::invalid_argument("shape mismatch in layer_norm_rows");
    }
    Matrix xhat(x->value.rows(), n);
    Eigen::VectorXd inv_std(x->value.rows());
    for (Eigen::Index r = 0; r < x->value.rows(); ++r) {
        const double mu = x->value.row(r).mean();
        const auto centered = (x->value.row(r).array() - mu).eval();
        const double var = centered.square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (centered * inv_std(r)).matrix();
    }
    Matrix y = (xhat.array().rowwise() * gain->value.row(0).array()).matrix();
    y.rowwise() += bias->value.row(0);
    return make_node(std::move(y), {x, gain, bias}, [xhat, inv_std](Node& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        if (pg->requires_grad) pg->accumulate((self.grad.array() * xhat.array()).colwise().sum().matrix());
        if (pb->requires_grad) pb->accumulate(self.grad.colwise().sum());
        if (px->requires_grad) {
            Matrix dxhat = (self.grad.array().rowwise() * pg->value.row(0).array()).matrix();
            Matrix dx(dxhat.rows(), dxhat.cols());
            for (Eigen::Index r = 0; r < dx.rows(); ++r) {
                const double mean_d = dxhat.row(r).mean();
                const double mean_dx = (dxhat.row(r).array() * xhat.row(r).array()).mean();
                dx.row(r) = (inv_std(r) *
                             (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx))
                                .matrix();
            }
            px->accumulate(dx);
        }
    });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
    Matrix out(static_cast<Eigen::Index>(ids.size()), table->value.cols());
    for (size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table->value.row(ids[i]);
    std::vector<int> idv(ids.begin(), ids.end());
    return make_node(std::move(out), {table}, [idv](Node& self) {
        auto& pt = self.parents[0];
        Matrix d = Matrix::Zero(pt->value.rows(), pt->value.cols());
        for (size_t i = 0; i < idv.size(); ++i) d.row(idv[i]) += self.grad.row(static_cast<Eigen::Index>(i));
        pt->accumulate(d);
    });
}

Var gather_rows_const(const Matrix& table, std::span<const int> ids) {
    Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
    return constant(std::move(out));
}

Var select_rows(const Var& a, std::span<const int> rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), a->value.cols());
    for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = a->value.row(rows[i]);
    std::vector<int> rv(rows.begin(), rows.end());
    return make_node(std::move(out), {a}, [rv](Node& self) {
        auto& pa = self.parents[0];
        Matrix d = Matrix::Zero(pa->value.rows(), pa->value.cols());
        for (size_t i = 0; i < rv.size(); ++i) d.row(rv[i]) += self.grad.row(static_cast<Eigen::Index>(i));
        pa->accumulate(d);
    });
}

Var sum_squares(const Var& a) {
    Matrix out(1, 1);
    out(0, 0) = a->value.squaredNorm();
    return make_node(std::move(out), {a}, [](Node& self) {
        self.parents[0]->accumulate(2.0 * self.grad(0, 0) * self.parents[0]->value);
    });
}

Var mean_squared_error(const Var& prediction, const Matrix& target) {
    check_same_shape(prediction->value, target, "mean_squared_error");
    Matrix diff = prediction->value - target;
    Matrix out(1, 1);
    out(0, 0) = diff.squaredNorm() / static_cast<double>(diff.size());
    return make_node(std::move(out), {prediction}, [diff](Node& self) {
        self.parents[0]->accumulate((2.0 * self.grad(0, 0) / static_cast<double>(diff.size())) * diff);
    });
}

void backward(const Var& root) {
    if (!root->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->grad = Matrix::Ones(root->value.rows(), root->value.cols());
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
}

}  // namespace storyplug::ad
