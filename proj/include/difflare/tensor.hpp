#pragma once

#include <functional>
#include <memory>
#include <vector>

namespace difflare::ag {

// Reverse-mode autograd on dense double tensors. The graph is rebuilt per
// forward pass; nodes without a path to a trainable leaf drop their parent
// links so inference runs don't retain the tape.
struct Node;
using Tensor = std::shared_ptr<Node>;

struct Node {
    std::vector<int> shape;
    std::vector<double> v;
    std::vector<double> g;  // allocated iff rg
    bool rg = false;
    std::vector<Tensor> parents;
    std::function<void(Node&)> back;

    size_t numel() const {
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        return n;
    }
};

Tensor make(std::vector<int> shape, bool requires_grad = false);
Tensor constant(std::vector<int> shape, std::vector<double> values);
Tensor zeros_like(const Tensor& x);

// Runs backward from a scalar loss; accumulates into .g of rg nodes.
void backward(const Tensor& loss);

// elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_mask(const Tensor& a, const std::vector<double>& mask);  // constant weights
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.2);
Tensor sigmoid(const Tensor& x);

// structure
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor detach(const Tensor& x);
Tensor concat_ch(const Tensor& a, const Tensor& b);       // [Ca,H,W]+[Cb,H,W]
Tensor chw_to_nc(const Tensor& x);                        // [C,H,W] -> [H*W, C]
Tensor nc_to_chw(const Tensor& x, int h, int w);          // inverse
Tensor select_row(const Tensor& table, int row);          // embedding lookup -> [d]
Tensor gather_rows(const Tensor& table, const std::vector<int>& rows);  // -> [n, d]

// linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                        // [m,n] -> [n,m]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // [n]; w [out,in]
Tensor softmax_rows(const Tensor& x);                     // [n,m], softmax per row

// conv / spatial, single sample [C,H,W]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample2x(const Tensor& x);
Tensor avg_pool2d(const Tensor& x, int factor);
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps = 1e-5);
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);  // bias [C] onto [C,H,W]

// reductions / losses (scalar outputs, shape {1})
Tensor sum(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mse_loss(const Tensor& a, const Tensor& b);
Tensor l1_loss(const Tensor& a, const Tensor& b);
// mean over all elements of |a-b| * weight (constant per-element weight)
Tensor weighted_l1_loss(const Tensor& a, const Tensor& b, const std::vector<double>& weight);

}  // namespace difflare::ag
