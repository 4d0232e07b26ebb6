// wav.hpp -- minimal RIFF/WAVE reader and writer for 16-bit PCM mono files.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "kwsbias/common.hpp"
#include "kwsbias/dsp.hpp"

namespace kwsbias {

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline std::uint32_t get_u32(const std::string& data, std::size_t offset) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(data[offset])) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(data[offset + 1])) << 8) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(data[offset + 2])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(data[offset + 3])) << 24);
}

inline std::uint16_t get_u16(const std::string& data, std::size_t offset) {
    return static_cast<std::uint16_t>(static_cast<unsigned char>(data[offset]) |
                                      (static_cast<unsigned char>(data[offset + 1]) << 8));
}

}  // namespace detail

// Reads a 16-bit PCM mono WAV file. Anything else (other codecs, stereo,
// other bit depths) is rejected rather than silently converted. Sample rates
// are restricted to the ones the pipeline supports.
inline AudioClip read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorCode::io_failure, "cannot open '" + path + "'");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require(data.size() >= 44, ErrorCode::io_failure, "'" + path + "' is not a WAV file");
    require(data.compare(0, 4, "RIFF") == 0 && data.compare(8, 4, "WAVE") == 0,
            ErrorCode::io_failure, "'" + path + "' is not a WAV file");

    int sample_rate = 0;
    std::size_t offset = 12;
    std::vector<double> samples;
    bool have_fmt = false;
    bool have_data = false;
    while (offset + 8 <= data.size()) {
        const std::string id = data.substr(offset, 4);
        const std::uint32_t size = detail::get_u32(data, offset + 4);
        const std::size_t body = offset + 8;
        if (body + size > data.size()) {
            break;
        }
        if (id == "fmt ") {
            require(size >= 16, ErrorCode::io_failure, "malformed fmt chunk in '" + path + "'");
            const std::uint16_t format = detail::get_u16(data, body);
            const std::uint16_t channels = detail::get_u16(data, body + 2);
            sample_rate = static_cast<int>(detail::get_u32(data, body + 4));
            const std::uint16_t bits = detail::get_u16(data, body + 14);
            require(format == 1, ErrorCode::io_failure, "'" + path + "' is not PCM");
            require(channels == 1, ErrorCode::io_failure, "'" + path + "' is not mono");
            require(bits == 16, ErrorCode::io_failure, "'" + path + "' is not 16-bit");
            have_fmt = true;
        } else if (id == "data") {
            require(have_fmt, ErrorCode::io_failure, "data chunk before fmt in '" + path + "'");
            const std::size_t count = size / 2;
            samples.resize(count);
            for (std::size_t i = 0; i < count; ++i) {
                const auto u = detail::get_u16(data, body + 2 * i);
                const auto s = static_cast<std::int16_t>(u);
                samples[i] = static_cast<double>(s) / 32768.0;
            }
            have_data = true;
        }
        offset = body + size + (size % 2);  // chunks are word aligned
    }
    require(have_fmt && have_data, ErrorCode::io_failure,
            "missing fmt or data chunk in '" + path + "'");
    require(sample_rate == 8000 || sample_rate == 16000, ErrorCode::unsupported_rate,
            "'" + path + "' has unsupported sample rate " + std::to_string(sample_rate));
    return make_clip(std::move(samples), sample_rate);
}

// Writes a 16-bit PCM mono WAV file. Samples are clamped to [-1, 1].
inline void write_wav(const std::string& path, const AudioClip& clip) {
    std::string out;
    out.reserve(44 + clip.samples.size() * 2);
    const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
    out.append("RIFF");
    detail::put_u32(out, 36 + data_bytes);
    out.append("WAVE");
    out.append("fmt ");
    detail::put_u32(out, 16);
    detail::put_u16(out, 1);  // PCM
    detail::put_u16(out, 1);  // mono
    detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
    detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);  // byte rate
    detail::put_u16(out, 2);   // block align
    detail::put_u16(out, 16);  // bits per sample
    out.append("data");
    detail::put_u32(out, data_bytes);
    for (double v : clip.samples) {
        const double clamped = std::max(-1.0, std::min(1.0, v));
        const auto s = static_cast<std::int16_t>(std::lround(clamped * 32767.0));
        detail::put_u16(out, static_cast<std::uint16_t>(s));
    }
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    require(file.good(), ErrorCode::io_failure, "cannot write '" + path + "'");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    require(file.good(), ErrorCode::io_failure, "failed writing '" + path + "'");
}

}  // namespace kwsbias
