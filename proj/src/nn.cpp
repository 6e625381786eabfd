#include "difflare/nn.hpp"

#include <algorithm>
#include <cmath>

#include "difflare/errors.hpp"

namespace difflare::nn {

ag::Tensor ParamStore::add(const std::string& name, std::vector<int> shape, bool trainable) {
    for (auto& p : params_)
        if (p.name == name) throw ConfigError("duplicate parameter name: " + name);
    auto t = ag::make(std::move(shape), trainable);
    params_.push_back({name, t, trainable});
    return t;
}

ag::Tensor ParamStore::find(const std::string& name) const {
    for (auto& p : params_)
        if (p.name == name) return p.t;
    throw ConfigError("parameter not found: " + name);
}

void ParamStore::set_requires_grad() {
    for (auto& p : params_) {
        p.t->rg = p.trainable;
        if (p.trainable)
            p.t->g.assign(p.t->v.size(), 0.0);
        else
            p.t->g.clear();
    }
}

void ParamStore::freeze_all() {
    for (auto& p : params_) {
        p.trainable = false;
        p.t->rg = false;
        p.t->g.clear();
    }
}

uint64_t ParamStore::content_hash() const {
    std::vector<const Param*> sorted;
    sorted.reserve(params_.size());
    for (auto& p : params_) sorted.push_back(&p);
    std::sort(sorted.begin(), sorted.end(),
              [](const Param* a, const Param* b) { return a->name < b->name; });
    uint64_t h = 0xcbf29ce484222325ull;
    for (auto* p : sorted) {
        h = fnv1a64(p->name, h);
        h = fnv1a64(p->t->v.data(), p->t->v.size() * sizeof(double), h);
    }
    return h;
}

std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> ParamStore::dump() const {
    std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> m;
    for (auto& p : params_) m[p.name] = {p.t->shape, p.t->v};
    return m;
}

void ParamStore::load(
    const std::map<std::string, std::pair<std::vector<int>, std::vector<double>>>& m) {
    for (auto& p : params_) {
        auto it = m.find(p.name);
        if (it == m.end()) throw IoError("checkpoint missing array: " + p.name);
        if (it->second.first != p.t->shape)
            throw IoError("checkpoint shape mismatch for: " + p.name);
        p.t->v = it->second.second;
    }
}

void init_uniform(const ag::Tensor& t, double bound, Rng& rng) {
    for (auto& v : t->v) v = rng.uniform(-bound, bound);
}

void kaiming_init(const ag::Tensor& w, int fan_in, Rng& rng) {
    init_uniform(w, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride,
               int pad, Rng& rng, bool zero_init)
    : stride(stride), pad(pad) {
    w = ps.add(name + ".w", {cout, cin, k, k});
    b = ps.add(name + ".b", {cout});
    if (!zero_init) kaiming_init(w, cin * k * k, rng);
}

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
               bool zero_init) {
    w = ps.add(name + ".w", {out, in});
    b = ps.add(name + ".b", {out});
    if (!zero_init) kaiming_init(w, in, rng);
}

GroupNorm::GroupNorm(ParamStore& ps, const std::string& name, int channels, int groups)
    : groups(groups) {
    gamma = ps.add(name + ".gamma", {channels});
    beta = ps.add(name + ".beta", {channels});
    for (auto& v : gamma->v) v = 1.0;
}

Adam::Adam(ParamStore& ps, double lr, double beta1, double beta2, double eps)
    : ps_(ps), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& p : ps.params()) {
        m_.emplace_back(p.t->v.size(), 0.0);
        v_.emplace_back(p.t->v.size(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    auto& params = ps_.params();
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.trainable || !p.t->rg) continue;
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t j = 0; j < p.t->v.size(); ++j) {
            double g = p.t->g[j];
            m[j] = b1_ * m[j] + (1.0 - b1_) * g;
            v[j] = b2_ * v[j] + (1.0 - b2_) * g * g;
            double mh = m[j] / c1, vh = v[j] / c2;
            p.t->v[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : ps_.params())
        if (p.t->rg) std::fill(p.t->g.begin(), p.t->g.end(), 0.0);
}

std::vector<double> timestep_embedding(int t, int dim) {
    std::vector<double> e(dim);
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        e[i] = std::sin(t * freq);
        e[half + i] = std::cos(t * freq);
    }
    return e;
}

}  // namespace difflare::nn
