// checkpoint.hpp -- model checkpoints: one JSON header line (architecture,
// seed, tensor shapes, optional feature configuration) followed by raw
// little-endian float32 tensor payloads and, for pruned models, uint8 masks.
// Also home of the JSON (de)serialization for the config structs.
#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kwsbias/common.hpp"
#include "kwsbias/dsp.hpp"
#include "kwsbias/nn.hpp"

namespace kwsbias {

inline constexpr const char* kCheckpointFormat = "kws-checkpoint";
inline constexpr int kCheckpointVersion = 1;

// --- config structs <-> JSON ------------------------------------------------

inline nlohmann::json to_json(const FeatureConfig& config) {
    nlohmann::json j;
    j["sample_rate"] = config.sample_rate;
    j["feature_type"] = to_string(config.feature_type);
    j["num_mel_banks"] = config.num_mel_banks;
    if (config.num_mfcc.has_value()) {
        j["num_mfcc"] = *config.num_mfcc;
    } else {
        j["num_mfcc"] = nullptr;
    }
    j["frame_length_ms"] = config.frame_length_ms;
    j["frame_step_pct"] = config.frame_step_pct;
    j["window"] = to_string(config.window_fn);
    j["clip_duration_ms"] = config.clip_duration_ms;
    return j;
}

inline FeatureConfig feature_config_from_json(const nlohmann::json& j) {
    FeatureConfig config;
    config.sample_rate = j.at("sample_rate").get<int>();
    config.feature_type = feature_type_from_string(j.at("feature_type").get<std::string>());
    config.num_mel_banks = j.at("num_mel_banks").get<int>();
    if (j.contains("num_mfcc") && !j.at("num_mfcc").is_null()) {
        config.num_mfcc = j.at("num_mfcc").get<int>();
    } else {
        config.num_mfcc.reset();
    }
    config.frame_length_ms = j.at("frame_length_ms").get<int>();
    config.frame_step_pct = j.at("frame_step_pct").get<int>();
    config.window_fn = window_fn_from_string(j.at("window").get<std::string>());
    config.clip_duration_ms = j.at("clip_duration_ms").get<int>();
    return config;
}

inline nlohmann::json to_json(const ModelSpec& spec) {
    nlohmann::json j;
    j["architecture"] = to_string(spec.architecture);
    j["input_frames"] = spec.input_frames;
    j["input_coeffs"] = spec.input_coeffs;
    j["num_classes"] = spec.num_classes;
    nlohmann::json convs = nlohmann::json::array();
    for (const auto& c : spec.conv_layers) {
        convs.push_back({{"filters", c.filters},
                         {"kernel_h", c.kernel_h},
                         {"kernel_w", c.kernel_w},
                         {"stride_h", c.stride_h},
                         {"stride_w", c.stride_w}});
    }
    j["conv_layers"] = std::move(convs);
    j["pool_size"] = spec.pool_size;
    j["dense_widths"] = spec.dense_widths;
    return j;
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec spec;
    spec.architecture = architecture_from_string(j.at("architecture").get<std::string>());
    spec.input_frames = j.at("input_frames").get<int>();
    spec.input_coeffs = j.at("input_coeffs").get<int>();
    spec.num_classes = j.at("num_classes").get<int>();
    for (const auto& c : j.at("conv_layers")) {
        ConvSpec conv;
        conv.filters = c.at("filters").get<int>();
        conv.kernel_h = c.at("kernel_h").get<int>();
        conv.kernel_w = c.at("kernel_w").get<int>();
        conv.stride_h = c.at("stride_h").get<int>();
        conv.stride_w = c.at("stride_w").get<int>();
        spec.conv_layers.push_back(conv);
    }
    spec.pool_size = j.at("pool_size").get<int>();
    spec.dense_widths = j.at("dense_widths").get<std::vector<int>>();
    return spec;
}

// --- checkpoint I/O ---------------------------------------------------------

using MaskSet = std::vector<std::vector<std::uint8_t>>;  // aligned with params.tensors

struct Checkpoint {
    ModelParams params;
    std::optional<MaskSet> masks;
    std::optional<FeatureConfig> features;
};

namespace detail {

inline void append_f32(std::string& out, double value) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
    out.push_back(static_cast<char>(bits & 0xff));
    out.push_back(static_cast<char>((bits >> 8) & 0xff));
    out.push_back(static_cast<char>((bits >> 16) & 0xff));
    out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline double read_f32(const std::string& data, std::size_t offset) {
    const std::uint32_t bits =
        static_cast<std::uint32_t>(static_cast<unsigned char>(data[offset])) |
        (static_cast<std::uint32_t>(static_cast<unsigned char>(data[offset + 1])) << 8) |
        (static_cast<std::uint32_t>(static_cast<unsigned char>(data[offset + 2])) << 16) |
        (static_cast<std::uint32_t>(static_cast<unsigned char>(data[offset + 3])) << 24);
    return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const MaskSet* masks = nullptr,
                            const FeatureConfig* features = nullptr) {
    if (masks != nullptr) {
        require(masks->size() == params.tensors.size(), ErrorCode::shape_mismatch,
                "mask set does not match parameter list");
    }
    nlohmann::json header;
    header["format"] = kCheckpointFormat;
    header["version"] = kCheckpointVersion;
    header["seed"] = params.seed;
    header["spec"] = to_json(params.spec);
    nlohmann::json tensors = nlohmann::json::array();
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        nlohmann::json t;
        t["name"] = params.names[i];
        t["shape"] = params.tensors[i].shape;
        if (masks != nullptr) {
            t["masked"] = !(*masks)[i].empty();
        }
        tensors.push_back(std::move(t));
    }
    header["tensors"] = std::move(tensors);
    header["has_masks"] = masks != nullptr;
    header["features"] = features != nullptr ? to_json(*features) : nlohmann::json(nullptr);

    std::string out = header.dump();
    out.push_back('\n');
    for (const auto& tensor : params.tensors) {
        for (double v : tensor.data) {
            detail::append_f32(out, v);
        }
    }
    if (masks != nullptr) {
        for (std::size_t i = 0; i < masks->size(); ++i) {
            const auto& mask = (*masks)[i];
            if (mask.empty()) {
                continue;
            }
            require(mask.size() == params.tensors[i].size(), ErrorCode::shape_mismatch,
                    "mask size does not match tensor " + params.names[i]);
            out.append(reinterpret_cast<const char*>(mask.data()), mask.size());
        }
    }
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    require(file.good(), ErrorCode::io_failure, "cannot write checkpoint '" + path + "'");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    require(file.good(), ErrorCode::io_failure, "failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::io_failure, "cannot open checkpoint '" + path + "'");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t newline = data.find('\n');
    require(newline != std::string::npos, ErrorCode::io_failure,
            "checkpoint '" + path + "' has no header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(data.substr(0, newline));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::io_failure, "checkpoint '" + path + "' header is not JSON: " + e.what());
    }
    require(header.value("format", "") == kCheckpointFormat, ErrorCode::io_failure,
            "'" + path + "' is not a checkpoint file");
    require(header.value("version", 0) == kCheckpointVersion, ErrorCode::io_failure,
            "unsupported checkpoint version in '" + path + "'");

    Checkpoint checkpoint;
    checkpoint.params.seed = header.at("seed").get<std::uint64_t>();
    checkpoint.params.spec = model_spec_from_json(header.at("spec"));
    if (!header.at("features").is_null()) {
        checkpoint.features = feature_config_from_json(header.at("features"));
    }

    const bool has_masks = header.at("has_masks").get<bool>();
    std::vector<bool> masked;
    std::size_t offset = newline + 1;
    for (const auto& t : header.at("tensors")) {
        Tensor tensor = Tensor::zeros(t.at("shape").get<std::vector<int>>());
        require(offset + tensor.size() * 4 <= data.size(), ErrorCode::io_failure,
                "checkpoint '" + path + "' payload is truncated");
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            tensor.data[i] = detail::read_f32(data, offset + i * 4);
        }
        offset += tensor.size() * 4;
        checkpoint.params.tensors.push_back(std::move(tensor));
        checkpoint.params.names.push_back(t.at("name").get<std::string>());
        masked.push_back(has_masks && t.value("masked", false));
    }
    if (has_masks) {
        MaskSet masks(checkpoint.params.tensors.size());
        for (std::size_t i = 0; i < masks.size(); ++i) {
            if (!masked[i]) {
                continue;
            }
            const std::size_t n = checkpoint.params.tensors[i].size();
            require(offset + n <= data.size(), ErrorCode::io_failure,
                    "checkpoint '" + path + "' mask payload is truncated");
            masks[i].assign(data.begin() + static_cast<std::ptrdiff_t>(offset),
                            data.begin() + static_cast<std::ptrdiff_t>(offset + n));
            offset += n;
        }
        checkpoint.masks = std::move(masks);
    }
    require(offset == data.size(), ErrorCode::io_failure,
            "checkpoint '" + path + "' has trailing bytes");

    // Shape sanity: the declared spec must reproduce the stored tensor shapes.
    const ModelParams reference = build_model(checkpoint.params.spec, checkpoint.params.seed);
    require(reference.tensors.size() == checkpoint.params.tensors.size(),
            ErrorCode::shape_mismatch, "checkpoint tensor count does not match its spec");
    for (std::size_t i = 0; i < reference.tensors.size(); ++i) {
        require(reference.tensors[i].same_shape(checkpoint.params.tensors[i]),
                ErrorCode::shape_mismatch,
                "checkpoint tensor " + checkpoint.params.names[i] + " has shape " +
                    shape_string(checkpoint.params.tensors[i].shape) + ", spec implies " +
                    shape_string(reference.tensors[i].shape));
    }
    return checkpoint;
}

}  // namespace kwsbias
