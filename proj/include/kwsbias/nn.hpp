// nn.hpp -- small CNN classifiers over feature matrices: model construction,
// forward/backward passes, Adam, and the training loop with a learning-rate
// grid. Everything runs in double precision on the CPU.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kwsbias/common.hpp"
#include "kwsbias/dataset.hpp"
#include "kwsbias/dsp.hpp"
#include "kwsbias/metrics.hpp"
#include "kwsbias/tensor.hpp"

namespace kwsbias {

enum class Architecture { cnn, llcnn };

inline const char* to_string(Architecture a) { return a == Architecture::cnn ? "cnn" : "llcnn"; }

inline Architecture architecture_from_string(const std::string& s) {
    if (s == "cnn") return Architecture::cnn;
    if (s == "llcnn") return Architecture::llcnn;
    fail(ErrorCode::invalid_config, "unknown architecture '" + s + "'");
}

struct ConvSpec {
    int filters = 0;
    int kernel_h = 0;  // along frames (time)
    int kernel_w = 0;  // along coefficients
    int stride_h = 1;
    int stride_w = 1;
};

// Model description. `cnn` is conv-pool-conv-dense-softmax; `llcnn` is a
// low-latency variant with one strided conv and two dense hidden layers.
struct ModelSpec {
    Architecture architecture = Architecture::cnn;
    int input_frames = 0;
    int input_coeffs = 0;
    int num_classes = 0;
    std::vector<ConvSpec> conv_layers;
    int pool_size = 2;               // cnn only, square non-overlapping max pool
    std::vector<int> dense_widths;   // hidden layers before the softmax layer

    // Default kernels are sized so every supported feature shape fits: the
    // narrowest input has 10 MFCC coefficients, which conv 8x4 -> pool 2x2 ->
    // conv 4x2 still accommodates.
    static ModelSpec default_cnn(int input_frames, int input_coeffs, int num_classes) {
        ModelSpec spec;
        spec.architecture = Architecture::cnn;
        spec.input_frames = input_frames;
        spec.input_coeffs = input_coeffs;
        spec.num_classes = num_classes;
        spec.conv_layers = {{16, 8, 4, 1, 1}, {32, 4, 2, 1, 1}};
        spec.pool_size = 2;
        spec.dense_widths = {64};
        return spec;
    }

    static ModelSpec default_llcnn(int input_frames, int input_coeffs, int num_classes) {
        ModelSpec spec;
        spec.architecture = Architecture::llcnn;
        spec.input_frames = input_frames;
        spec.input_coeffs = input_coeffs;
        spec.num_classes = num_classes;
        spec.conv_layers = {{16, 8, 8, 2, 2}};
        spec.dense_widths = {64, 32};
        return spec;
    }

    static ModelSpec defaults(Architecture arch, int input_frames, int input_coeffs,
                              int num_classes) {
        return arch == Architecture::cnn ? default_cnn(input_frames, input_coeffs, num_classes)
                                         : default_llcnn(input_frames, input_coeffs, num_classes);
    }
};

namespace detail {

enum class LayerKind { conv, pool, dense };

struct LayerPlan {
    LayerKind kind = LayerKind::dense;
    bool relu = true;
    ConvSpec conv;
    int pool = 2;
    int in_h = 0, in_w = 0, in_c = 0;
    int out_h = 0, out_w = 0, out_c = 0;
    int in_dim = 0, out_dim = 0;  // dense layers
    int param_index = -1;         // weight tensor index; bias follows at +1
};

// Computes the layer sequence and every intermediate shape, validating that
// kernels and pools fit. This is the single source of truth for shapes.
inline std::vector<LayerPlan> plan_layers(const ModelSpec& spec) {
    require(spec.input_frames >= 1 && spec.input_coeffs >= 1, ErrorCode::shape_mismatch,
            "input shape must be positive");
    require(spec.num_classes >= 2, ErrorCode::shape_mismatch, "need at least 2 classes");
    if (spec.architecture == Architecture::cnn) {
        require(spec.conv_layers.size() == 2, ErrorCode::shape_mismatch,
                "cnn takes exactly 2 conv layers");
        require(spec.dense_widths.size() == 1, ErrorCode::shape_mismatch,
                "cnn takes exactly 1 hidden dense layer");
        require(spec.pool_size >= 1, ErrorCode::shape_mismatch, "pool size must be >= 1");
    } else {
        require(spec.conv_layers.size() == 1, ErrorCode::shape_mismatch,
                "llcnn takes exactly 1 conv layer");
        require(spec.dense_widths.size() == 2, ErrorCode::shape_mismatch,
                "llcnn takes exactly 2 hidden dense layers");
    }

    std::vector<LayerPlan> plan;
    int h = spec.input_frames;
    int w = spec.input_coeffs;
    int c = 1;
    int param_index = 0;
    auto add_conv = [&](const ConvSpec& conv) {
        require(conv.filters >= 1 && conv.kernel_h >= 1 && conv.kernel_w >= 1 &&
                    conv.stride_h >= 1 && conv.stride_w >= 1,
                ErrorCode::shape_mismatch, "conv parameters must be positive");
        require(conv.kernel_h <= h && conv.kernel_w <= w, ErrorCode::shape_mismatch,
                "conv kernel " + std::to_string(conv.kernel_h) + "x" +
                    std::to_string(conv.kernel_w) + " does not fit input " + std::to_string(h) +
                    "x" + std::to_string(w));
        LayerPlan layer;
        layer.kind = LayerKind::conv;
        layer.conv = conv;
        layer.in_h = h;
        layer.in_w = w;
        layer.in_c = c;
        layer.out_h = (h - conv.kernel_h) / conv.stride_h + 1;
        layer.out_w = (w - conv.kernel_w) / conv.stride_w + 1;
        layer.out_c = conv.filters;
        layer.param_index = param_index;
        param_index += 2;
        plan.push_back(layer);
        h = layer.out_h;
        w = layer.out_w;
        c = layer.out_c;
    };
    auto add_pool = [&](int size) {
        LayerPlan layer;
        layer.kind = LayerKind::pool;
        layer.relu = false;
        layer.pool = size;
        layer.in_h = h;
        layer.in_w = w;
        layer.in_c = c;
        layer.out_h = h / size;
        layer.out_w = w / size;
        layer.out_c = c;
        require(layer.out_h >= 1 && layer.out_w >= 1, ErrorCode::shape_mismatch,
                "pool output collapses to zero size");
        plan.push_back(layer);
        h = layer.out_h;
        w = layer.out_w;
    };
    auto add_dense = [&](int out_dim, bool relu) {
        LayerPlan layer;
        layer.kind = LayerKind::dense;
        layer.relu = relu;
        layer.in_dim = h * w * c;
        layer.out_dim = out_dim;
        layer.param_index = param_index;
        param_index += 2;
        plan.push_back(layer);
        h = 1;
        w = 1;
        c = out_dim;
    };

    if (spec.architecture == Architecture::cnn) {
        add_conv(spec.conv_layers[0]);
        add_pool(spec.pool_size);
        add_conv(spec.conv_layers[1]);
        add_dense(spec.dense_widths[0], true);
    } else {
        add_conv(spec.conv_layers[0]);
        add_dense(spec.dense_widths[0], true);
        add_dense(spec.dense_widths[1], true);
    }
    add_dense(spec.num_classes, false);
    return plan;
}

}  // namespace detail

struct ModelParams {
    ModelSpec spec;
    std::uint64_t seed = 0;
    std::vector<Tensor> tensors;       // weight, bias, weight, bias, ...
    std::vector<std::string> names;    // e.g. conv1_w, conv1_b, dense1_w, ...
};

inline std::size_t param_count(const ModelParams& params) {
    std::size_t n = 0;
    for (const auto& t : params.tensors) {
        n += t.size();
    }
    return n;
}

inline bool all_finite(const ModelParams& params) {
    for (const auto& t : params.tensors) {
        for (double v : t.data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
    }
    return true;
}

// Initializes weights uniformly in [-sqrt(1/fan_in), sqrt(1/fan_in)] and
// biases to zero. Each tensor draws from its own seeded stream, so the
// initialization of one layer does not depend on the sizes of the others.
inline ModelParams build_model(const ModelSpec& spec, std::uint64_t seed) {
    const auto plan = detail::plan_layers(spec);
    ModelParams params;
    params.spec = spec;
    params.seed = seed;
    int conv_id = 0;
    int dense_id = 0;
    for (const auto& layer : plan) {
        if (layer.kind == detail::LayerKind::pool) {
            continue;
        }
        std::string base;
        Tensor weight;
        Tensor bias;
        double fan_in = 0.0;
        if (layer.kind == detail::LayerKind::conv) {
            base = "conv" + std::to_string(++conv_id);
            weight = Tensor::zeros({layer.conv.kernel_h, layer.conv.kernel_w, layer.in_c,
                                    layer.conv.filters});
            bias = Tensor::zeros({layer.conv.filters});
            fan_in = static_cast<double>(layer.conv.kernel_h) * layer.conv.kernel_w * layer.in_c;
        } else {
            base = "dense" + std::to_string(++dense_id);
            weight = Tensor::zeros({layer.in_dim, layer.out_dim});
            bias = Tensor::zeros({layer.out_dim});
            fan_in = static_cast<double>(layer.in_dim);
        }
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(params.tensors.size())));
        const double bound = std::sqrt(1.0 / fan_in);
        for (auto& v : weight.data) {
            v = rng.uniform(-bound, bound);
        }
        params.tensors.push_back(std::move(weight));
        params.names.push_back(base + "_w");
        params.tensors.push_back(std::move(bias));
        params.names.push_back(base + "_b");
    }
    return params;
}

// Activations after every layer (index 0 is the input batch) plus pool argmax
// caches, kept for the backward pass.
struct ForwardCache {
    std::vector<Tensor> activations;
    std::vector<std::vector<int>> pool_argmax;  // flat input index per pooled cell
};

namespace detail {

inline void conv_forward(const LayerPlan& layer, const Tensor& weight, const Tensor& bias,
                         const Tensor& in, Tensor& out, bool relu) {
    const int batch = in.shape[0];
    const auto& cs = layer.conv;
    for (int b = 0; b < batch; ++b) {
        const double* in_base =
            in.data.data() + static_cast<std::size_t>(b) * layer.in_h * layer.in_w * layer.in_c;
        double* out_base =
            out.data.data() + static_cast<std::size_t>(b) * layer.out_h * layer.out_w * layer.out_c;
        for (int oh = 0; oh < layer.out_h; ++oh) {
            for (int ow = 0; ow < layer.out_w; ++ow) {
                double* cell = out_base + (static_cast<std::size_t>(oh) * layer.out_w + ow) *
                                              layer.out_c;
                for (int oc = 0; oc < cs.filters; ++oc) {
                    cell[oc] = bias.data[static_cast<std::size_t>(oc)];
                }
                for (int kh = 0; kh < cs.kernel_h; ++kh) {
                    const int ih = oh * cs.stride_h + kh;
                    for (int kw = 0; kw < cs.kernel_w; ++kw) {
                        const int iw = ow * cs.stride_w + kw;
                        const double* px = in_base + (static_cast<std::size_t>(ih) * layer.in_w +
                                                      iw) * layer.in_c;
                        const double* wk =
                            weight.data.data() + (static_cast<std::size_t>(kh) * cs.kernel_w + kw) *
                                                     layer.in_c * cs.filters;
                        for (int ic = 0; ic < layer.in_c; ++ic) {
                            const double x = px[ic];
                            const double* wrow = wk + static_cast<std::size_t>(ic) * cs.filters;
                            for (int oc = 0; oc < cs.filters; ++oc) {
                                cell[oc] += x * wrow[oc];
                            }
                        }
                    }
                }
                if (relu) {
                    for (int oc = 0; oc < cs.filters; ++oc) {
                        if (cell[oc] < 0.0) {
                            cell[oc] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

inline void conv_backward(const LayerPlan& layer, const Tensor& weight, const Tensor& in,
                          const Tensor& out, const Tensor& grad_out, Tensor& grad_in,
                          Tensor& grad_weight, Tensor& grad_bias, bool relu) {
    const int batch = in.shape[0];
    const auto& cs = layer.conv;
    for (int b = 0; b < batch; ++b) {
        const std::size_t in_off = static_cast<std::size_t>(b) * layer.in_h * layer.in_w * layer.in_c;
        const std::size_t out_off =
            static_cast<std::size_t>(b) * layer.out_h * layer.out_w * layer.out_c;
        for (int oh = 0; oh < layer.out_h; ++oh) {
            for (int ow = 0; ow < layer.out_w; ++ow) {
                const std::size_t cell =
                    out_off + (static_cast<std::size_t>(oh) * layer.out_w + ow) * layer.out_c;
                for (int oc = 0; oc < cs.filters; ++oc) {
                    double g = grad_out.data[cell + static_cast<std::size_t>(oc)];
                    if (relu && out.data[cell + static_cast<std::size_t>(oc)] <= 0.0) {
                        g = 0.0;
                    }
                    if (g == 0.0) {
                        continue;
                    }
                    grad_bias.data[static_cast<std::size_t>(oc)] += g;
                    for (int kh = 0; kh < cs.kernel_h; ++kh) {
                        const int ih = oh * cs.stride_h + kh;
                        for (int kw = 0; kw < cs.kernel_w; ++kw) {
                            const int iw = ow * cs.stride_w + kw;
                            const std::size_t px =
                                in_off + (static_cast<std::size_t>(ih) * layer.in_w + iw) *
                                             layer.in_c;
                            const std::size_t wk =
                                (static_cast<std::size_t>(kh) * cs.kernel_w + kw) * layer.in_c *
                                cs.filters;
                            for (int ic = 0; ic < layer.in_c; ++ic) {
                                const std::size_t wi =
                                    wk + static_cast<std::size_t>(ic) * cs.filters +
                                    static_cast<std::size_t>(oc);
                                grad_weight.data[wi] += in.data[px + static_cast<std::size_t>(ic)] * g;
                                grad_in.data[px + static_cast<std::size_t>(ic)] +=
                                    weight.data[wi] * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

inline void pool_forward(const LayerPlan& layer, const Tensor& in, Tensor& out,
                         std::vector<int>& argmax) {
    const int batch = in.shape[0];
    argmax.assign(out.size(), -1);
    for (int b = 0; b < batch; ++b) {
        const std::size_t in_off = static_cast<std::size_t>(b) * layer.in_h * layer.in_w * layer.in_c;
        const std::size_t out_off =
            static_cast<std::size_t>(b) * layer.out_h * layer.out_w * layer.out_c;
        for (int oh = 0; oh < layer.out_h; ++oh) {
            for (int ow = 0; ow < layer.out_w; ++ow) {
                for (int c = 0; c < layer.in_c; ++c) {
                    double best = -std::numeric_limits<double>::infinity();
                    int best_index = -1;
                    for (int ph = 0; ph < layer.pool; ++ph) {
                        for (int pw = 0; pw < layer.pool; ++pw) {
                            const int ih = oh * layer.pool + ph;
                            const int iw = ow * layer.pool + pw;
                            const auto idx = static_cast<int>(
                                in_off + (static_cast<std::size_t>(ih) * layer.in_w + iw) *
                                             layer.in_c + static_cast<std::size_t>(c));
                            // Strict > keeps the first (lowest-index) maximum on ties.
                            if (in.data[static_cast<std::size_t>(idx)] > best) {
                                best = in.data[static_cast<std::size_t>(idx)];
                                best_index = idx;
                            }
                        }
                    }
                    const std::size_t out_idx =
                        out_off + (static_cast<std::size_t>(oh) * layer.out_w + ow) * layer.in_c +
                        static_cast<std::size_t>(c);
                    out.data[out_idx] = best;
                    argmax[out_idx] = best_index;
                }
            }
        }
    }
}

inline void pool_backward(const std::vector<int>& argmax, const Tensor& grad_out,
                          Tensor& grad_in) {
    for (std::size_t i = 0; i < grad_out.size(); ++i) {
        grad_in.data[static_cast<std::size_t>(argmax[i])] += grad_out.data[i];
    }
}

inline void dense_forward(const LayerPlan& layer, const Tensor& weight, const Tensor& bias,
                          const Tensor& in, Tensor& out, bool relu) {
    const int batch = in.shape[0];
    for (int b = 0; b < batch; ++b) {
        const double* x = in.data.data() + static_cast<std::size_t>(b) * layer.in_dim;
        double* y = out.data.data() + static_cast<std::size_t>(b) * layer.out_dim;
        for (int o = 0; o < layer.out_dim; ++o) {
            y[o] = bias.data[static_cast<std::size_t>(o)];
        }
        for (int i = 0; i < layer.in_dim; ++i) {
            const double xi = x[i];
            if (xi == 0.0) {
                continue;
            }
            const double* wrow = weight.data.data() + static_cast<std::size_t>(i) * layer.out_dim;
            for (int o = 0; o < layer.out_dim; ++o) {
                y[o] += xi * wrow[o];
            }
        }
        if (relu) {
            for (int o = 0; o < layer.out_dim; ++o) {
                if (y[o] < 0.0) {
                    y[o] = 0.0;
                }
            }
        }
    }
}

inline void dense_backward(const LayerPlan& layer, const Tensor& weight, const Tensor& in,
                           const Tensor& out, const Tensor& grad_out, Tensor& grad_in,
                           Tensor& grad_weight, Tensor& grad_bias, bool relu) {
    const int batch = in.shape[0];
    for (int b = 0; b < batch; ++b) {
        const std::size_t in_off = static_cast<std::size_t>(b) * layer.in_dim;
        const std::size_t out_off = static_cast<std::size_t>(b) * layer.out_dim;
        for (int o = 0; o < layer.out_dim; ++o) {
            double g = grad_out.data[out_off + static_cast<std::size_t>(o)];
            if (relu && out.data[out_off + static_cast<std::size_t>(o)] <= 0.0) {
                g = 0.0;
            }
            if (g == 0.0) {
                continue;
            }
            grad_bias.data[static_cast<std::size_t>(o)] += g;
            for (int i = 0; i < layer.in_dim; ++i) {
                const double xi = in.data[in_off + static_cast<std::size_t>(i)];
                const std::size_t wi = static_cast<std::size_t>(i) * layer.out_dim +
                                       static_cast<std::size_t>(o);
                grad_weight.data[wi] += xi * g;
                grad_in.data[in_off + static_cast<std::size_t>(i)] += weight.data[wi] * g;
            }
        }
    }
}

inline Tensor output_tensor(const LayerPlan& layer, int batch) {
    if (layer.kind == LayerKind::dense) {
        return Tensor::zeros({batch, layer.out_dim});
    }
    return Tensor::zeros({batch, layer.out_h, layer.out_w, layer.out_c});
}

}  // namespace detail

// Packs feature matrices into a {batch, frames, coeffs, 1} input tensor.
inline Tensor batch_to_tensor(const std::vector<FeatureMatrix>& features,
                              const std::vector<int>& indices, const ModelSpec& spec) {
    require(!indices.empty(), ErrorCode::invalid_argument, "empty batch");
    Tensor batch = Tensor::zeros({static_cast<int>(indices.size()), spec.input_frames,
                                  spec.input_coeffs, 1});
    const std::size_t per = static_cast<std::size_t>(spec.input_frames) * spec.input_coeffs;
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto& f = features[static_cast<std::size_t>(indices[b])];
        require(f.num_frames == spec.input_frames && f.num_coeffs == spec.input_coeffs,
                ErrorCode::shape_mismatch,
                "feature matrix " + std::to_string(f.num_frames) + "x" +
                    std::to_string(f.num_coeffs) + " does not match model input " +
                    std::to_string(spec.input_frames) + "x" + std::to_string(spec.input_coeffs));
        std::copy(f.values.begin(), f.values.end(), batch.data.begin() + b * per);
    }
    return batch;
}

inline Tensor forward(const ModelParams& params, const Tensor& input, ForwardCache* cache = nullptr) {
    const auto plan = detail::plan_layers(params.spec);
    require(input.shape.size() == 4 && input.shape[1] == params.spec.input_frames &&
                input.shape[2] == params.spec.input_coeffs && input.shape[3] == 1,
            ErrorCode::shape_mismatch,
            "input tensor " + shape_string(input.shape) + " does not match model input");
    const int batch = input.shape[0];
    if (cache != nullptr) {
        cache->activations.clear();
        cache->pool_argmax.assign(plan.size(), {});
        cache->activations.push_back(input);
    }
    Tensor current = input;
    for (std::size_t li = 0; li < plan.size(); ++li) {
        const auto& layer = plan[li];
        Tensor out = detail::output_tensor(layer, batch);
        switch (layer.kind) {
            case detail::LayerKind::conv:
                detail::conv_forward(layer, params.tensors[static_cast<std::size_t>(layer.param_index)],
                                     params.tensors[static_cast<std::size_t>(layer.param_index) + 1],
                                     current, out, layer.relu);
                break;
            case detail::LayerKind::pool: {
                std::vector<int> argmax;
                detail::pool_forward(layer, current, out, argmax);
                if (cache != nullptr) {
                    cache->pool_argmax[li] = std::move(argmax);
                }
                break;
            }
            case detail::LayerKind::dense: {
                // Flatten is implicit: dense layers read the activation buffer flat.
                Tensor flat = current;
                flat.shape = {batch, layer.in_dim};
                detail::dense_forward(layer, params.tensors[static_cast<std::size_t>(layer.param_index)],
                                      params.tensors[static_cast<std::size_t>(layer.param_index) + 1],
                                      flat, out, layer.relu);
                break;
            }
        }
        current = std::move(out);
        if (cache != nullptr) {
            cache->activations.push_back(current);
        }
    }
    return current;
}

// Row-wise stable softmax.
inline Tensor softmax(const Tensor& logits) {
    Tensor probs = logits;
    const int batch = logits.shape[0];
    const int k = logits.shape[1];
    for (int b = 0; b < batch; ++b) {
        double* row = probs.data.data() + static_cast<std::size_t>(b) * k;
        double maxv = row[0];
        for (int i = 1; i < k; ++i) {
            maxv = std::max(maxv, row[i]);
        }
        double sum = 0.0;
        for (int i = 0; i < k; ++i) {
            row[i] = std::exp(row[i] - maxv);
            sum += row[i];
        }
        for (int i = 0; i < k; ++i) {
            row[i] /= sum;
        }
    }
    return probs;
}

struct LossAndGrad {
    double loss = 0.0;
    std::vector<Tensor> grads;  // aligned with params.tensors
};

// Mean softmax cross-entropy over the batch plus gradients for every
// parameter tensor.
inline LossAndGrad loss_and_grad(const ModelParams& params, const Tensor& input,
                                 const std::vector<int>& labels) {
    const int batch = input.shape[0];
    require(static_cast<int>(labels.size()) == batch, ErrorCode::invalid_argument,
            "labels and batch differ in length");
    for (int label : labels) {
        require(label >= 0 && label < params.spec.num_classes, ErrorCode::label_out_of_range,
                "label " + std::to_string(label) + " outside [0, " +
                    std::to_string(params.spec.num_classes) + ")");
    }
    ForwardCache cache;
    const Tensor logits = forward(params, input, &cache);
    const Tensor probs = softmax(logits);
    const int k = params.spec.num_classes;

    LossAndGrad result;
    double loss = 0.0;
    Tensor grad_logits = Tensor::zeros(logits.shape);
    const double inv_batch = 1.0 / static_cast<double>(batch);
    for (int b = 0; b < batch; ++b) {
        const std::size_t off = static_cast<std::size_t>(b) * k;
        loss -= std::log(std::max(probs.data[off + static_cast<std::size_t>(labels[b])], 1e-300));
        for (int i = 0; i < k; ++i) {
            const double target = i == labels[static_cast<std::size_t>(b)] ? 1.0 : 0.0;
            grad_logits.data[off + static_cast<std::size_t>(i)] =
                (probs.data[off + static_cast<std::size_t>(i)] - target) * inv_batch;
        }
    }
    result.loss = loss * inv_batch;
    require(std::isfinite(result.loss), ErrorCode::numerical_failure,
            "loss is not finite (batch of " + std::to_string(batch) + ")");

    result.grads.reserve(params.tensors.size());
    for (const auto& t : params.tensors) {
        result.grads.push_back(Tensor::zeros(t.shape));
    }
    const auto plan = detail::plan_layers(params.spec);
    Tensor grad_out = std::move(grad_logits);
    for (auto li = static_cast<int>(plan.size()) - 1; li >= 0; --li) {
        const auto& layer = plan[static_cast<std::size_t>(li)];
        const Tensor& in = cache.activations[static_cast<std::size_t>(li)];
        const Tensor& out = cache.activations[static_cast<std::size_t>(li) + 1];
        Tensor grad_in = Tensor::zeros(in.shape);
        switch (layer.kind) {
            case detail::LayerKind::conv:
                detail::conv_backward(layer,
                                      params.tensors[static_cast<std::size_t>(layer.param_index)],
                                      in, out, grad_out, grad_in,
                                      result.grads[static_cast<std::size_t>(layer.param_index)],
                                      result.grads[static_cast<std::size_t>(layer.param_index) + 1],
                                      layer.relu);
                break;
            case detail::LayerKind::pool:
                detail::pool_backward(cache.pool_argmax[static_cast<std::size_t>(li)], grad_out,
                                      grad_in);
                break;
            case detail::LayerKind::dense: {
                Tensor flat_in = in;
                flat_in.shape = {batch, layer.in_dim};
                Tensor flat_grad_in = Tensor::zeros(flat_in.shape);
                detail::dense_backward(layer,
                                       params.tensors[static_cast<std::size_t>(layer.param_index)],
                                       flat_in, out, grad_out, flat_grad_in,
                                       result.grads[static_cast<std::size_t>(layer.param_index)],
                                       result.grads[static_cast<std::size_t>(layer.param_index) + 1],
                                       layer.relu);
                flat_grad_in.shape = in.shape;
                grad_in = std::move(flat_grad_in);
                break;
            }
        }
        grad_out = std::move(grad_in);
    }
    return result;
}

// --- Adam -------------------------------------------------------------------

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    long step = 0;

    static AdamState init(const ModelParams& params) {
        AdamState state;
        state.m.reserve(params.tensors.size());
        state.v.reserve(params.tensors.size());
        for (const auto& t : params.tensors) {
            state.m.push_back(Tensor::zeros(t.shape));
            state.v.push_back(Tensor::zeros(t.shape));
        }
        return state;
    }
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

inline void adam_step(AdamState& state, ModelParams& params, const std::vector<Tensor>& grads,
                      double learning_rate) {
    require(grads.size() == params.tensors.size(), ErrorCode::shape_mismatch,
            "gradient list does not match parameter list");
    require(learning_rate > 0.0, ErrorCode::invalid_argument, "learning rate must be positive");
    ++state.step;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
    for (std::size_t ti = 0; ti < params.tensors.size(); ++ti) {
        require(grads[ti].same_shape(params.tensors[ti]), ErrorCode::shape_mismatch,
                "gradient shape mismatch for tensor " + std::to_string(ti));
        auto& w = params.tensors[ti].data;
        const auto& g = grads[ti].data;
        auto& m = state.m[ti].data;
        auto& v = state.v[ti].data;
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g[i];
            v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            w[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + kAdamEpsilon);
        }
    }
}

// Argmax predictions (ties resolve to the lowest class index). Batched so the
// activation memory stays bounded.
inline std::vector<int> predict(const ModelParams& params,
                                const std::vector<FeatureMatrix>& features,
                                const std::vector<int>& indices, int max_batch = 64) {
    std::vector<int> predictions;
    predictions.reserve(indices.size());
    for (std::size_t start = 0; start < indices.size();
         start += static_cast<std::size_t>(max_batch)) {
        const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(max_batch));
        std::vector<int> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                               indices.begin() + static_cast<std::ptrdiff_t>(end));
        const Tensor logits = forward(params, batch_to_tensor(features, chunk, params.spec));
        const int k = params.spec.num_classes;
        for (int b = 0; b < logits.shape[0]; ++b) {
            const double* row = logits.data.data() + static_cast<std::size_t>(b) * k;
            int best = 0;
            for (int i = 1; i < k; ++i) {
                if (row[i] > row[best]) {
                    best = i;
                }
            }
            predictions.push_back(best);
        }
    }
    return predictions;
}

// --- training ---------------------------------------------------------------

struct TrainConfig {
    int epochs = 10;
    int batch_size = 128;
    std::vector<double> learning_rate_grid = {1e-2, 1e-3, 1e-4};
    std::uint64_t seed = 0;

    void validate() const {
        require(epochs >= 1, ErrorCode::invalid_config, "epochs must be >= 1");
        require(batch_size >= 2 && batch_size % 2 == 0, ErrorCode::invalid_config,
                "batch_size must be even and >= 2");
        require(!learning_rate_grid.empty(), ErrorCode::invalid_config,
                "learning_rate_grid must not be empty");
        for (double lr : learning_rate_grid) {
            require(lr > 0.0 && std::isfinite(lr), ErrorCode::invalid_config,
                    "learning rates must be positive");
        }
    }
};

struct EpochStats {
    double train_loss = 0.0;
    double val_mcc = 0.0;
};

struct TrainRun {
    double learning_rate = 0.0;
    std::vector<EpochStats> epochs;
    bool diverged = false;
    double final_val_mcc = -2.0;  // below any real MCC
};

struct TrainResult {
    ModelParams params;
    double learning_rate = 0.0;
    double val_mcc = -2.0;
    std::vector<TrainRun> runs;
    int steps_per_epoch = 0;
};

// Trains one model per learning rate in the grid (identical initialization
// and batch order across rates) and keeps the one with the best final
// validation MCC. A run whose loss goes non-finite is marked diverged and
// skipped; if every run diverges this raises training-failure.
inline TrainResult train(const ModelSpec& spec, const Dataset& dataset,
                         const std::vector<FeatureMatrix>& features, const TrainConfig& config) {
    config.validate();
    require(features.size() == dataset.utterances.size(), ErrorCode::invalid_argument,
            "need one feature matrix per utterance");
    const auto val_indices = dataset.split_indices(Split::validation);
    require(!dataset.split_indices(Split::train).empty(), ErrorCode::insufficient_data,
            "train split is empty");
    require(!val_indices.empty(), ErrorCode::insufficient_data, "validation split is empty");
    std::vector<int> val_labels;
    val_labels.reserve(val_indices.size());
    for (int idx : val_indices) {
        val_labels.push_back(dataset.utterances[static_cast<std::size_t>(idx)].class_index);
    }

    TrainResult result;
    for (double lr : config.learning_rate_grid) {
        TrainRun run;
        run.learning_rate = lr;
        ModelParams params = build_model(spec, config.seed);
        AdamState adam = AdamState::init(params);
        int steps_per_epoch = 0;
        try {
            for (int epoch = 0; epoch < config.epochs; ++epoch) {
                const auto batches = balanced_batches(dataset, Split::train, config.batch_size,
                                                      config.seed, epoch);
                steps_per_epoch = static_cast<int>(batches.size());
                double loss_sum = 0.0;
                for (const auto& batch : batches) {
                    std::vector<int> labels;
                    labels.reserve(batch.size());
                    for (int idx : batch) {
                        labels.push_back(dataset.utterances[static_cast<std::size_t>(idx)].class_index);
                    }
                    const Tensor input = batch_to_tensor(features, batch, spec);
                    auto lg = loss_and_grad(params, input, labels);
                    adam_step(adam, params, lg.grads, lr);
                    loss_sum += lg.loss;
                }
                require(all_finite(params), ErrorCode::numerical_failure,
                        "non-finite weights after epoch " + std::to_string(epoch));
                EpochStats stats;
                stats.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
                const auto val_preds = predict(params, features, val_indices);
                stats.val_mcc = mcc(confusion_matrix(val_labels, val_preds, spec.num_classes));
                run.epochs.push_back(stats);
            }
            run.final_val_mcc = run.epochs.back().val_mcc;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::numerical_failure) {
                throw;
            }
            run.diverged = true;
        }
        if (!run.diverged && run.final_val_mcc > result.val_mcc) {
            result.params = params;
            result.learning_rate = lr;
            result.val_mcc = run.final_val_mcc;
            result.steps_per_epoch = steps_per_epoch;
        }
        result.runs.push_back(std::move(run));
    }
    bool any_converged = false;
    for (const auto& run : result.runs) {
        any_converged = any_converged || !run.diverged;
    }
    require(any_converged, ErrorCode::training_failure,
            "every learning rate in the grid diverged");
    return result;
}

}  // namespace kwsbias
