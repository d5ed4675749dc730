#pragma once

#include <cmath>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "pnemb/checkpoint.hpp"
#include "pnemb/ops.hpp"
#include "pnemb/random.hpp"
#include "pnemb/tensor.hpp"

namespace pnemb {

class BatchGroup;

/// Per-forward settings threaded through every layer.
struct ForwardContext {
    Graph& graph;
    NormMode norm_mode = NormMode::Train;
    BatchGroup* batch = nullptr;  // set when this forward is one member of a minibatch
    std::size_t member = 0;

    /// feature_norm, with Train-mode statistics pooled over the minibatch.
    Tensor normalize(const Tensor& h, FeatureNorm& norm);
};

/// Runs the forwards of a minibatch so that Train-mode normalisation sees the
/// rows of every member at once. Each member runs on its own thread, but only
/// the member holding the turn runs, and the turn passes in member order, so
/// the shared graph is recorded in a fixed order.
///
/// At each normalisation site a member deposits its rows and hands the turn
/// on; the last member concatenates all of them, normalises once and slices
/// the result back out. Every member must therefore reach the same sites.
class BatchGroup {
public:
    explicit BatchGroup(Graph& g) : graph_(g) {}

    BatchGroup(const BatchGroup&) = delete;
    BatchGroup& operator=(const BatchGroup&) = delete;

    /// Calls body(ctx) for members 0..n-1; rethrows the first failure.
    void run(std::size_t n, const std::function<void(ForwardContext&)>& body) {
        if (n == 0) return;
        members_ = n;
        turn_ = 0;
        deposited_ = 0;
        aborted_ = false;
        error_ = nullptr;
        pending_.assign(n, Tensor{});
        results_.assign(n, Tensor{});
        ready_.assign(n, false);
        site_norm_ = nullptr;
        std::vector<std::thread> threads;
        threads.reserve(n);
        for (std::size_t b = 0; b < n; ++b) threads.emplace_back([this, b, &body] { member_main(b, body); });
        for (auto& t : threads) t.join();
        if (error_) std::rethrow_exception(error_);
    }

    Tensor normalize(std::size_t member, const Tensor& h, FeatureNorm& norm) {
        std::unique_lock lk(mu_);
        if (aborted_) throw Aborted{};
        if (deposited_ == 0) {
            site_norm_ = &norm;
        } else if (!site_norm_->gamma.same_storage(norm.gamma)) {
            fail_locked("batch members reached different normalisation layers");
        }
        pending_[member] = h;
        ++deposited_;
        if (member + 1 < members_) {
            turn_ = member + 1;
        } else {
            if (deposited_ != members_) fail_locked("batch members reached different numbers of normalisation layers");
            pool_locked(norm);
        }
        cv_.notify_all();
        cv_.wait(lk, [&] { return aborted_ || (turn_ == member && ready_[member]); });
        if (aborted_) throw Aborted{};
        ready_[member] = false;
        return std::move(results_[member]);
    }

private:
    struct Aborted {};

    void member_main(std::size_t b, const std::function<void(ForwardContext&)>& body) {
        {
            std::unique_lock lk(mu_);
            cv_.wait(lk, [&] { return aborted_ || turn_ == b; });
            if (aborted_) return;
        }
        try {
            ForwardContext ctx{graph_, NormMode::Train, this, b};
            body(ctx);
            std::lock_guard lk(mu_);
            if (deposited_ != 0) fail_locked("batch members reached different numbers of normalisation layers");
            turn_ = b + 1;
            cv_.notify_all();
        } catch (const Aborted&) {
        } catch (...) {
            std::lock_guard lk(mu_);
            if (!error_) error_ = std::current_exception();
            aborted_ = true;
            cv_.notify_all();
        }
    }

    [[noreturn]] void fail_locked(const std::string& what) {
        aborted_ = true;
        cv_.notify_all();
        throw InvalidInput(what);
    }

    void pool_locked(FeatureNorm& norm) {
        std::vector<std::size_t> rows(members_);
        for (std::size_t b = 0; b < members_; ++b) rows[b] = pending_[b].dim(0);
        Tensor all = members_ == 1 ? pending_[0] : concat(graph_, pending_, 0);
        Tensor y = feature_norm(graph_, all, norm, NormMode::Train);
        std::size_t offset = 0;
        for (std::size_t b = 0; b < members_; ++b) {
            results_[b] = members_ == 1 ? y : slice(graph_, y, 0, offset, offset + rows[b]);
            offset += rows[b];
            ready_[b] = true;
            pending_[b] = Tensor{};
        }
        deposited_ = 0;
        turn_ = 0;
    }

    Graph& graph_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::size_t members_ = 0;
    std::size_t turn_ = 0;
    std::size_t deposited_ = 0;
    bool aborted_ = false;
    std::exception_ptr error_;
    std::vector<Tensor> pending_, results_;
    std::vector<bool> ready_;
    const FeatureNorm* site_norm_ = nullptr;
};

inline Tensor ForwardContext::normalize(const Tensor& h, FeatureNorm& norm) {
    if (batch && norm_mode == NormMode::Train) return batch->normalize(member, h, norm);
    return feature_norm(graph, h, norm, norm_mode);
}

/// Fully connected layer; weight [in, out], bias [out].
struct Dense {
    Tensor w;
    Tensor b;

    /// He-uniform weights and zero bias, or all zeros with `zero_init`.
    static Dense create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                        bool zero_init = false) {
        std::vector<double> wv(in * out, 0.0);
        if (!zero_init) {
            const double bound = std::sqrt(6.0 / static_cast<double>(in));
            for (double& v : wv) v = rng.uniform(-bound, bound);
        }
        Dense d;
        d.w = store.add(prefix + ".w", Tensor({in, out}, std::move(wv)));
        d.b = store.add(prefix + ".b", Tensor::zeros({out}));
        return d;
    }

    std::size_t in() const { return w.dim(0); }
    std::size_t out() const { return w.dim(1); }

    Tensor operator()(Graph& g, const Tensor& x) const { return linear(g, x, w, b); }
};

inline FeatureNorm register_norm(ParamStore& store, const std::string& prefix, std::size_t channels) {
    FeatureNorm n = FeatureNorm::create(channels);
    n.gamma = store.add(prefix + ".gamma", n.gamma);
    n.beta = store.add(prefix + ".beta", n.beta);
    n.running_mean = store.add(prefix + ".running_mean", n.running_mean, false);
    n.running_var = store.add(prefix + ".running_var", n.running_var, false);
    return n;
}

/// relu(norm(linear(x))) applied row-wise; the hidden-layer unit everywhere.
struct PointLayer {
    Dense fc;
    FeatureNorm norm;
    bool use_norm = true;

    static PointLayer create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                             bool use_norm = true) {
        PointLayer l;
        l.fc = Dense::create(store, prefix, in, out, rng);
        l.use_norm = use_norm;
        if (use_norm) l.norm = register_norm(store, prefix + ".norm", out);
        return l;
    }

    Tensor operator()(ForwardContext& ctx, const Tensor& x) {
        Tensor h = fc(ctx.graph, x);
        if (use_norm) h = ctx.normalize(h, norm);
        return relu(ctx.graph, h);
    }
};

} // namespace pnemb
