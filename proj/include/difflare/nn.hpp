#pragma once

#include <map>
#include <string>
#include <vector>

#include "difflare/rng.hpp"
#include "difflare/tensor.hpp"

namespace difflare::nn {

struct Param {
    std::string name;
    ag::Tensor t;
    bool trainable = true;
};

// Flat named-parameter store shared by all models; checkpoint and hash
// iterate it in name order so layouts are stable.
class ParamStore {
  public:
    ag::Tensor add(const std::string& name, std::vector<int> shape, bool trainable = true);
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    ag::Tensor find(const std::string& name) const;
    void set_requires_grad();          // marks trainable params rg, others not
    void freeze_all();                 // marks every param non-trainable
    uint64_t content_hash() const;     // over raw bytes, name-sorted
    std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> dump() const;
    void load(const std::map<std::string, std::pair<std::vector<int>, std::vector<double>>>& m);

  private:
    std::vector<Param> params_;
};

// weight init: uniform(-k, k) with k = 1/sqrt(fan_in)
void init_uniform(const ag::Tensor& t, double bound, Rng& rng);
void kaiming_init(const ag::Tensor& w, int fan_in, Rng& rng);

struct Conv2d {
    ag::Tensor w, b;
    int stride = 1, pad = 1;
    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride,
           int pad, Rng& rng, bool zero_init = false);
    ag::Tensor operator()(const ag::Tensor& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

struct Linear {
    ag::Tensor w, b;
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
           bool zero_init = false);
    ag::Tensor operator()(const ag::Tensor& x) const { return ag::linear(x, w, b); }
};

struct GroupNorm {
    ag::Tensor gamma, beta;
    int groups = 8;
    GroupNorm() = default;
    GroupNorm(ParamStore& ps, const std::string& name, int channels, int groups);
    ag::Tensor operator()(const ag::Tensor& x) const {
        return ag::group_norm(x, gamma, beta, groups);
    }
};

class Adam {
  public:
    Adam(ParamStore& ps, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    void step();
    void zero_grad();
    void set_lr(double lr) { lr_ = lr; }

  private:
    ParamStore& ps_;
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// sinusoidal timestep embedding, length dim (even)
std::vector<double> timestep_embedding(int t, int dim);

}  // namespace difflare::nn
