#pragma once

#include <atomic>
#include <thread>
#include <utility>

#include "ropecast/flow.hpp"
#include "ropecast/model.hpp"

namespace ropecast {

template <typename T>
std::vector<std::vector<T>*> tensor_list(Parameters<T>& p) {
    std::vector<std::vector<T>*> out;
    for_each_tensor(p, [&](const std::string&, std::vector<T>& v, bool) { out.push_back(&v); });
    return out;
}

// d(mean masked squared error)/d(pred): zero outside the supervised rows.
template <typename T>
Matrix<T> masked_loss_grad(const Matrix<T>& pred, const Matrix<T>& target,
                           const std::vector<uint8_t>& mask, double scale) {
    long n = 0;
    for (uint8_t m : mask) n += m ? 1 : 0;
    Matrix<T> d(pred.rows, pred.cols);
    const double inv = scale * 2.0 / (static_cast<double>(n) * pred.cols);
    for (int i = 0; i < pred.rows; ++i) {
        if (!mask[i]) continue;
        const T* p = pred.row(i);
        const T* u = target.row(i);
        T* o = d.row(i);
        for (int j = 0; j < pred.cols; ++j) o[j] = static_cast<T>(inv * (p[j] - u[j]));
    }
    return d;
}

template <typename T>
void accumulate_gradients(Parameters<T>& into, const Parameters<T>& from) {
    auto dst = tensor_list(into);
    auto src = tensor_list(const_cast<Parameters<T>&>(from));
    for (size_t k = 0; k < dst.size(); ++k)
        for (size_t i = 0; i < dst[k]->size(); ++i) (*dst[k])[i] += (*src[k])[i];
}

// Batch loss and exact parameter gradients. Elements may be evaluated on
// worker threads; per-element gradients land in separate buffers and are
// reduced in element order, so the result does not depend on thread count.
template <typename T>
std::pair<double, Parameters<T>> loss_and_gradients(const Parameters<T>& params,
                                                    const TrainingBatch<T>& batch,
                                                    const ModelConfig& cfg,
                                                    const RopeFrequencies<T>& freqs,
                                                    int threads = 1) {
    const int B = static_cast<int>(batch.elements.size());
    if (B == 0) throw std::invalid_argument("loss_and_gradients: empty batch");
    std::vector<double> losses(B, 0.0);
    std::vector<Parameters<T>> grads(B);
    std::vector<std::string> errors(B);

    auto run_element = [&](int e, ForwardCache<T>& cache) {
        try {
            const BatchElement<T>& el = batch.elements[e];
            grads[e] = zero_parameters<T>(cfg);
            forward(params, el.seq, el.flow.t, cfg, freqs, cache);
            losses[e] = masked_cfm_loss(cache.out, el.u, el.supervised);
            Matrix<T> dout = masked_loss_grad(cache.out, el.u, el.supervised, 1.0 / B);
            backward(params, el.seq, cfg, freqs, cache, dout, grads[e]);
        } catch (const std::exception& ex) {
            errors[e] = ex.what();
        }
    };

    threads = std::max(1, std::min(threads, B));
    if (threads == 1) {
        ForwardCache<T> cache;
        for (int e = 0; e < B; ++e) run_element(e, cache);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        for (int w = 0; w < threads; ++w)
            pool.emplace_back([&] {
                ForwardCache<T> cache;  // reused across this worker's elements
                for (int e = next.fetch_add(1); e < B; e = next.fetch_add(1))
                    run_element(e, cache);
            });
        for (auto& th : pool) th.join();
    }
    for (int e = 0; e < B; ++e)
        if (!errors[e].empty()) throw std::runtime_error(errors[e]);

    double loss = 0.0;
    for (int e = 0; e < B; ++e) loss += losses[e];
    loss /= B;
    if (!std::isfinite(loss)) throw std::runtime_error("loss_and_gradients: non-finite loss");

    Parameters<T> total = std::move(grads[0]);
    for (int e = 1; e < B; ++e) accumulate_gradients(total, grads[e]);
    return {loss, std::move(total)};
}

// Velocity field backed by the model: forward, then read the target segment.
template <typename T>
VelocityFn<T> model_velocity(const Parameters<T>& params, const ModelConfig& cfg,
                             const RopeFrequencies<T>& freqs) {
    return [&params, cfg, freqs](const TokenSequence<T>& seq, double t) {
        ForwardCache<T> cache;
        forward(params, seq, t, cfg, freqs, cache);
        LatentGrid<T> v(seq.target_rows, seq.target_cols, seq.channels());
        int idx = 0;
        for (int i = 0; i < seq.length(); ++i) {
            if (!seq.loss_mask[i]) continue;
            const T* src = cache.out.row(i);
            T* dst = v.data.data() + static_cast<size_t>(idx++) * seq.channels();
            for (int c = 0; c < seq.channels(); ++c) dst[c] = src[c];
        }
        return v;
    };
}

}  // namespace ropecast
