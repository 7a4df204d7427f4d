#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace easydistill {

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major tensor of 64-bit reals. Immutable after creation except
// for gradient accumulation.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily on first accumulation
    bool requires_grad = false;

    std::size_t size() const { return data.size(); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return data.size() == 1; }

    double item() const {
        if (!is_scalar()) throw TensorError("item() on non-scalar tensor");
        return data[0];
    }

    void accumulate_grad(std::size_t i, double g) {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        grad[i] += g;
    }
    void zero_grad() { grad.clear(); }

    static TensorPtr create(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
    static TensorPtr scalar(double v, bool requires_grad = false);
    static TensorPtr vector1d(std::vector<double> v, bool requires_grad = false);
};

std::string shape_str(const std::vector<int>& shape);
std::size_t shape_numel(const std::vector<int>& shape);

// Records ops as they execute; node order is topological by construction.
// Single-threaded; independent tapes may run concurrently.
class Tape {
public:
    // --- linear algebra ---
    TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
    // a [m x k] times b-transpose, b [n x k] -> [m x n]
    TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b);

    // --- elementwise / broadcast over leading dims ---
    TensorPtr add(const TensorPtr& a, const TensorPtr& b);
    TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
    TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
    TensorPtr scale(const TensorPtr& a, double c);
    TensorPtr add_const(const TensorPtr& a, double c);
    TensorPtr exp(const TensorPtr& a);
    TensorPtr gelu(const TensorPtr& a);
    TensorPtr log_sigmoid(const TensorPtr& a);
    TensorPtr clamp(const TensorPtr& a, double lo, double hi);
    TensorPtr minimum(const TensorPtr& a, const TensorPtr& b);

    // --- shape ---
    TensorPtr slice_last(const TensorPtr& a, int start, int len);
    TensorPtr concat_last(const std::vector<TensorPtr>& parts);
    TensorPtr stack_scalars(const std::vector<TensorPtr>& scalars);

    // --- softmax family (last dimension) ---
    TensorPtr softmax(const TensorPtr& a);
    TensorPtr log_softmax(const TensorPtr& a);

    // layernorm over the last dimension, gain/bias shaped [last]
    TensorPtr layernorm(const TensorPtr& x, const TensorPtr& gain,
                        const TensorPtr& bias, double eps = 1e-5);

    // --- indexing ---
    TensorPtr embedding_lookup(const TensorPtr& table, const std::vector<int>& ids);
    // x [N x V], ids[N] -> [N] picking x[i, ids[i]]
    TensorPtr gather(const TensorPtr& x, const std::vector<int>& ids);
    // x [N x V], ids [N][k] -> [N x k]
    TensorPtr select_cols(const TensorPtr& x, const std::vector<std::vector<int>>& ids);

    // --- reductions ---
    TensorPtr sum(const TensorPtr& a);
    TensorPtr mean(const TensorPtr& a);
    TensorPtr sum_last(const TensorPtr& a);  // [... x V] -> [...]
    // mask is 0/1-valued, same shape as x. as_mean divides by the mask sum.
    TensorPtr sum_masked(const TensorPtr& x, const TensorPtr& mask, bool as_mean);

    void backward(const TensorPtr& loss);
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        TensorPtr out;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;

    TensorPtr binary(const TensorPtr& a, const TensorPtr& b, int op);
    TensorPtr unary(const TensorPtr& a, const char* name,
                    double (*f)(double), double (*df)(double));

    TensorPtr make_out(std::vector<int> shape, std::vector<double> data,
                       bool requires_grad, const char* op);
    void record(TensorPtr out, std::function<void()> back);
};

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
double grad_check(const std::function<TensorPtr(Tape&, const TensorPtr&)>& f,
                  const TensorPtr& x, double h = 1e-5);

}  // namespace easydistill
