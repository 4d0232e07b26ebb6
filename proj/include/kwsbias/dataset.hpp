// dataset.hpp -- corpus handling: manifest I/O, keyword selection, gender
// balancing, speaker-disjoint splits, gender-balanced batches and a synthetic
// tone corpus for end-to-end tests.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kwsbias/common.hpp"
#include "kwsbias/dsp.hpp"
#include "kwsbias/wav.hpp"

namespace kwsbias {

enum class Group { male, female };
enum class Split { train, validation, test, unassigned };

inline const char* to_string(Group g) { return g == Group::male ? "male" : "female"; }

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::test: return "test";
        case Split::unassigned: return "unassigned";
    }
    return "unassigned";
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "validation") return Split::validation;
    if (s == "test") return Split::test;
    if (s.empty() || s == "unassigned") return Split::unassigned;
    fail(ErrorCode::manifest_format, "unknown split value '" + s + "'");
}

struct Utterance {
    std::string audio_path;
    std::string keyword;
    int class_index = -1;
    std::string speaker_id;
    Group group = Group::male;
    Split split = Split::unassigned;
};

// A corpus plus its keyword -> class index mapping. Class indices follow the
// lexicographically sorted keyword list so that the mapping is independent of
// manifest row order.
struct Dataset {
    std::string name;
    std::vector<Utterance> utterances;
    std::vector<std::string> keywords;  // class index -> keyword
    long long dropped_rows = 0;         // manifest rows with unusable gender
    int dropped_keywords = 0;           // keywords removed by gender balancing

    int keyword_index(const std::string& keyword) const {
        const auto it = std::lower_bound(keywords.begin(), keywords.end(), keyword);
        if (it == keywords.end() || *it != keyword) {
            return -1;
        }
        return static_cast<int>(it - keywords.begin());
    }

    std::vector<int> split_indices(Split split) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < utterances.size(); ++i) {
            if (utterances[i].split == split) {
                out.push_back(static_cast<int>(i));
            }
        }
        return out;
    }

    int num_classes() const { return static_cast<int>(keywords.size()); }
};

inline constexpr int kMaxKeywords = 35;

namespace detail {

// Rebuilds the sorted keyword list and reassigns class indices.
inline void reindex(Dataset& dataset) {
    std::set<std::string> names;
    for (const auto& u : dataset.utterances) {
        names.insert(u.keyword);
    }
    dataset.keywords.assign(names.begin(), names.end());
    for (auto& u : dataset.utterances) {
        u.class_index = dataset.keyword_index(u.keyword);
    }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) {
        fields.push_back(field);
    }
    if (!line.empty() && line.back() == ',') {
        fields.emplace_back();
    }
    return fields;
}

// Stable 64-bit string hash (FNV-1a) used to seed per-keyword shuffles so the
// draw does not depend on class index assignment.
inline std::uint64_t hash_string(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

// Loads a manifest CSV with header `path,keyword,speaker_id,gender[,split]`.
// Columns are located by name. Rows whose gender is not male/female are
// dropped and counted in dropped_rows. Relative audio paths are resolved
// against the manifest's directory.
inline Dataset load_manifest(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorCode::io_failure, "cannot open manifest '" + path + "'");
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::manifest_format,
            "empty manifest '" + path + "'");
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    const auto header = detail::split_csv_line(line);
    const auto column = [&](const std::string& name) {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) {
                return static_cast<int>(i);
            }
        }
        return -1;
    };
    const int col_path = column("path");
    const int col_keyword = column("keyword");
    const int col_speaker = column("speaker_id");
    const int col_gender = column("gender");
    const int col_split = column("split");
    require(col_path >= 0 && col_keyword >= 0 && col_speaker >= 0 && col_gender >= 0,
            ErrorCode::manifest_format,
            "manifest header must contain path,keyword,speaker_id,gender");

    const auto base_dir = std::filesystem::path(path).parent_path();
    Dataset dataset;
    dataset.name = std::filesystem::path(path).stem().string();
    long long row_number = 1;
    while (std::getline(in, line)) {
        ++row_number;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto fields = detail::split_csv_line(line);
        require(fields.size() >= header.size(), ErrorCode::manifest_format,
                "row " + std::to_string(row_number) + " has " + std::to_string(fields.size()) +
                    " fields, expected " + std::to_string(header.size()));
        Utterance u;
        const std::string& gender = fields[static_cast<std::size_t>(col_gender)];
        if (gender == "male") {
            u.group = Group::male;
        } else if (gender == "female") {
            u.group = Group::female;
        } else {
            ++dataset.dropped_rows;
            continue;
        }
        const std::filesystem::path audio(fields[static_cast<std::size_t>(col_path)]);
        u.audio_path = audio.is_absolute() ? audio.string() : (base_dir / audio).string();
        u.keyword = fields[static_cast<std::size_t>(col_keyword)];
        u.speaker_id = fields[static_cast<std::size_t>(col_speaker)];
        require(!u.keyword.empty() && !u.speaker_id.empty(), ErrorCode::manifest_format,
                "row " + std::to_string(row_number) + " has empty keyword or speaker_id");
        if (col_split >= 0) {
            u.split = split_from_string(fields[static_cast<std::size_t>(col_split)]);
        }
        dataset.utterances.push_back(std::move(u));
    }
    require(!dataset.utterances.empty(), ErrorCode::insufficient_data,
            "manifest '" + path + "' has no usable rows");
    detail::reindex(dataset);
    require(dataset.num_classes() <= kMaxKeywords, ErrorCode::manifest_format,
            "manifest has " + std::to_string(dataset.num_classes()) +
                " keywords; at most " + std::to_string(kMaxKeywords) + " are supported");
    return dataset;
}

// Writes a manifest including the split column. Paths are written as given.
inline void save_manifest(const Dataset& dataset, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), ErrorCode::io_failure, "cannot write manifest '" + path + "'");
    out << "path,keyword,speaker_id,gender,split\n";
    for (const auto& u : dataset.utterances) {
        out << u.audio_path << ',' << u.keyword << ',' << u.speaker_id << ','
            << to_string(u.group) << ',' << to_string(u.split) << '\n';
    }
    require(out.good(), ErrorCode::io_failure, "failed writing manifest '" + path + "'");
}

// --- UTF-8 helpers (keywords may contain non-ASCII letters) ----------------

inline std::size_t utf8_length(const std::string& s) {
    std::size_t count = 0;
    for (unsigned char c : s) {
        if ((c & 0xc0) != 0x80) {  // not a continuation byte
            ++count;
        }
    }
    return count;
}

inline std::string utf8_prefix(const std::string& s, std::size_t num_codepoints) {
    std::size_t count = 0;
    std::size_t i = 0;
    while (i < s.size()) {
        if ((static_cast<unsigned char>(s[i]) & 0xc0) != 0x80) {
            if (count == num_codepoints) {
                break;
            }
            ++count;
        }
        ++i;
    }
    return s.substr(0, i);
}

// Selects up to 35 keywords from a count table: sort by count descending
// (ties alphabetical), drop keywords of three or fewer characters, then keep
// only the first keyword for each distinct three-character prefix.
inline std::vector<std::string> select_keywords(
    const std::vector<std::pair<std::string, long long>>& counts) {
    std::map<std::string, long long> totals;
    for (const auto& [keyword, count] : counts) {
        require(count >= 0, ErrorCode::invalid_argument,
                "negative count for keyword '" + keyword + "'");
        totals[keyword] += count;
    }
    std::vector<std::pair<std::string, long long>> order(totals.begin(), totals.end());
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) {
            return a.second > b.second;
        }
        return a.first < b.first;
    });
    std::vector<std::string> selected;
    std::set<std::string> prefixes;
    for (const auto& [keyword, count] : order) {
        if (utf8_length(keyword) <= 3) {
            continue;
        }
        const std::string prefix = utf8_prefix(keyword, 3);
        if (!prefixes.insert(prefix).second) {
            continue;
        }
        selected.push_back(keyword);
        if (selected.size() == static_cast<std::size_t>(kMaxKeywords)) {
            break;
        }
    }
    return selected;
}

// Downsamples the majority gender per keyword so that every keyword has
// exactly as many male as female utterances. Keywords missing a gender
// entirely are removed and counted in dropped_keywords. The draw is seeded
// per keyword, so adding an unrelated keyword does not change another
// keyword's sample.
inline Dataset gender_balance(const Dataset& dataset, std::uint64_t seed) {
    std::map<std::string, std::array<std::vector<int>, 2>> by_keyword;
    for (std::size_t i = 0; i < dataset.utterances.size(); ++i) {
        const auto& u = dataset.utterances[i];
        by_keyword[u.keyword][u.group == Group::male ? 0 : 1].push_back(static_cast<int>(i));
    }
    std::vector<char> keep(dataset.utterances.size(), 0);
    int dropped_keywords = 0;
    for (auto& [keyword, pools] : by_keyword) {
        auto& males = pools[0];
        auto& females = pools[1];
        if (males.empty() || females.empty()) {
            ++dropped_keywords;
            continue;
        }
        const std::size_t target = std::min(males.size(), females.size());
        Rng rng(mix_seed(seed, detail::hash_string(keyword)));
        auto pick = [&](std::vector<int>& pool) {
            if (pool.size() > target) {
                rng.shuffle(pool);
                pool.resize(target);
            }
            for (int idx : pool) {
                keep[static_cast<std::size_t>(idx)] = 1;
            }
        };
        pick(males);
        pick(females);
    }
    Dataset balanced;
    balanced.name = dataset.name;
    balanced.dropped_rows = dataset.dropped_rows;
    balanced.dropped_keywords = dataset.dropped_keywords + dropped_keywords;
    for (std::size_t i = 0; i < dataset.utterances.size(); ++i) {
        if (keep[i]) {
            balanced.utterances.push_back(dataset.utterances[i]);
        }
    }
    require(!balanced.utterances.empty(), ErrorCode::imbalance,
            "gender balancing removed every keyword");
    detail::reindex(balanced);
    return balanced;
}

struct SplitRatios {
    double train = 0.8;
    double validation = 0.1;
    double test = 0.1;
};

// Assigns train/validation/test splits over unique (keyword, speaker) pairs so
// that no pair ever crosses a split boundary. Pair counts use round-to-nearest
// (halves away from zero): train = round(r_train * P), validation =
// round(r_val * P), test = remainder.
inline Dataset split_dataset(const Dataset& dataset, const SplitRatios& ratios,
                             std::uint64_t seed) {
    require(ratios.train >= 0.0 && ratios.validation >= 0.0 && ratios.test >= 0.0,
            ErrorCode::invalid_argument, "split ratios must be non-negative");
    require(std::abs(ratios.train + ratios.validation + ratios.test - 1.0) < 1e-9,
            ErrorCode::invalid_argument, "split ratios must sum to 1");

    std::set<std::pair<std::string, std::string>> pair_set;
    for (const auto& u : dataset.utterances) {
        pair_set.emplace(u.keyword, u.speaker_id);
    }
    std::vector<std::pair<std::string, std::string>> pairs(pair_set.begin(), pair_set.end());
    const auto total = static_cast<long long>(pairs.size());
    require(total >= 3, ErrorCode::insufficient_data,
            "need at least 3 (keyword, speaker) pairs, have " + std::to_string(total));

    auto num_train = std::lround(ratios.train * static_cast<double>(total));
    auto num_val = std::lround(ratios.validation * static_cast<double>(total));
    num_train = std::min<long long>(num_train, total);
    num_val = std::min<long long>(num_val, total - num_train);

    using Assignment = std::map<std::pair<std::string, std::string>, Split>;
    const auto assign = [&](std::uint64_t shuffle_seed) {
        auto shuffled = pairs;
        Rng rng(shuffle_seed);
        rng.shuffle(shuffled);
        Assignment assignment;
        for (long long i = 0; i < total; ++i) {
            Split split = Split::test;
            if (i < num_train) {
                split = Split::train;
            } else if (i < num_train + num_val) {
                split = Split::validation;
            }
            assignment[shuffled[static_cast<std::size_t>(i)]] = split;
        }
        return assignment;
    };

    // A split that misses one of the corpus genders is unusable downstream:
    // training batches are gender-balanced and evaluation reports per-group
    // metrics. Keep the first assignment, derived deterministically from the
    // seed, in which every nonempty split covers all genders present in the
    // corpus; when no bounded retry achieves that (for example a single
    // female speaker against three splits), fall back to the plain shuffle.
    std::map<std::string, Group> speaker_gender;
    std::set<Group> corpus_genders;
    for (const auto& u : dataset.utterances) {
        speaker_gender[u.speaker_id] = u.group;
        corpus_genders.insert(u.group);
    }
    const auto covered = [&](const Assignment& assignment) {
        std::map<Split, std::set<Group>> genders_by_split;
        for (const auto& [pair, split] : assignment) {
            genders_by_split[split].insert(speaker_gender.at(pair.second));
        }
        for (const auto& [split, genders] : genders_by_split) {
            if (genders.size() != corpus_genders.size()) {
                return false;
            }
        }
        return true;
    };

    Assignment assignment = assign(seed);
    for (std::uint64_t attempt = 1; attempt < 64 && !covered(assignment); ++attempt) {
        Assignment candidate = assign(mix_seed(seed, attempt));
        if (covered(candidate)) {
            assignment = std::move(candidate);
        }
    }

    Dataset out = dataset;
    for (auto& u : out.utterances) {
        u.split = assignment.at({u.keyword, u.speaker_id});
    }
    return out;
}

// Gender-balanced batches for one epoch: each batch holds batch_size/2 male
// and batch_size/2 female utterances. The smaller gender pool is extended by
// sampling with replacement up to the larger pool's size, both pools are
// shuffled deterministically per (seed, epoch), and a trailing partial batch
// is dropped. Returned values are indices into dataset.utterances.
inline std::vector<std::vector<int>> balanced_batches(const Dataset& dataset, Split split,
                                                      int batch_size, std::uint64_t seed,
                                                      int epoch) {
    require(batch_size >= 2 && batch_size % 2 == 0, ErrorCode::invalid_argument,
            "batch_size must be even and >= 2");
    std::vector<int> males;
    std::vector<int> females;
    for (std::size_t i = 0; i < dataset.utterances.size(); ++i) {
        const auto& u = dataset.utterances[i];
        if (u.split != split) {
            continue;
        }
        (u.group == Group::male ? males : females).push_back(static_cast<int>(i));
    }
    require(!males.empty(), ErrorCode::imbalance,
            std::string("no male utterances in ") + to_string(split) + " split");
    require(!females.empty(), ErrorCode::imbalance,
            std::string("no female utterances in ") + to_string(split) + " split");

    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
    const std::size_t target = std::max(males.size(), females.size());
    auto extend = [&](std::vector<int>& pool) {
        const std::size_t original = pool.size();
        rng.shuffle(pool);
        while (pool.size() < target) {
            pool.push_back(pool[static_cast<std::size_t>(rng.next_below(original))]);
        }
        rng.shuffle(pool);
    };
    extend(males);
    extend(females);

    const int half = batch_size / 2;
    const std::size_t num_batches = target / static_cast<std::size_t>(half);
    require(num_batches >= 1, ErrorCode::insufficient_data,
            std::string(to_string(split)) + " split too small for one batch of " +
                std::to_string(batch_size));
    std::vector<std::vector<int>> batches(num_batches);
    for (std::size_t b = 0; b < num_batches; ++b) {
        auto& batch = batches[b];
        batch.reserve(static_cast<std::size_t>(batch_size));
        for (int i = 0; i < half; ++i) {
            batch.push_back(males[b * static_cast<std::size_t>(half) + static_cast<std::size_t>(i)]);
        }
        for (int i = 0; i < half; ++i) {
            batch.push_back(females[b * static_cast<std::size_t>(half) + static_cast<std::size_t>(i)]);
        }
    }
    return batches;
}

// --- synthetic corpus -------------------------------------------------------

struct SynthConfig {
    int num_classes = 4;
    int speakers_per_gender = 4;
    int utterances_per_speaker = 5;  // per class
    int sample_rate = 16000;
    int clip_duration_ms = 1000;
    std::uint64_t seed = 0x5eedULL;
};

// Class keywords for the synthetic corpus; alphabetical, all longer than
// three characters, distinct three-letter prefixes.
inline const std::vector<std::string>& synth_keywords() {
    static const std::vector<std::string> names = {
        "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india",
        "juliett", "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo",
        "sierra", "tango", "uniform", "victor", "whiskey", "xray", "yankee", "zulu"};
    return names;
}

// Base tone frequency for each class: geometric spacing between 300 Hz and
// min(3400, 0.425 * sample_rate) Hz, far enough apart that the +-15% speaker
// pitch ranges of neighbouring classes never overlap.
inline double synth_class_frequency(int class_index, int num_classes, int sample_rate) {
    const double lo = 300.0;
    const double hi = std::min(3400.0, 0.425 * static_cast<double>(sample_rate));
    if (num_classes == 1) {
        return lo;
    }
    const double t = static_cast<double>(class_index) / static_cast<double>(num_classes - 1);
    return lo * std::pow(hi / lo, t);
}

// Per-speaker pitch factor. Male voices take [0.85, 0.95], female voices
// [1.05, 1.15]: disjoint ranges, so gender is a learnable covariate.
inline double synth_pitch_factor(Group group, int speaker, int speakers_per_gender,
                                 std::uint64_t seed) {
    const double base = group == Group::male ? 0.85 : 1.05;
    const double t = speakers_per_gender > 1
                         ? static_cast<double>(speaker) / static_cast<double>(speakers_per_gender - 1)
                         : 0.5;
    Rng rng(mix_seed(seed, detail::hash_string(std::string(to_string(group)) + "-pitch-") +
                               static_cast<std::uint64_t>(speaker)));
    return base + 0.08 * t + rng.uniform(0.0, 0.02);
}

namespace detail {

inline AudioClip synth_utterance(double base_hz, double pitch, int sample_rate,
                                 int clip_duration_ms, Rng& rng) {
    const auto total = static_cast<std::size_t>(
        std::lround(clip_duration_ms * sample_rate / 1000.0));
    std::vector<double> samples(total, 0.0);
    const double f0 = base_hz * pitch;
    const double nyquist = sample_rate / 2.0;
    const double amplitude = 0.25 + 0.1 * rng.next_double();
    const double chirp = rng.uniform(-0.04, 0.04);  // relative sweep over the clip
    const double phase0 = rng.uniform(0.0, 2.0 * kPi);
    const bool harmonic = 2.0 * f0 * 1.05 < 0.95 * nyquist;
    const auto onset = static_cast<std::size_t>(rng.next_below(total / 20 + 1));
    const std::size_t active = total - onset;
    const auto ramp = static_cast<std::size_t>(
        std::min<std::size_t>(active / 4, static_cast<std::size_t>(sample_rate / 20)));
    double phase = phase0;
    for (std::size_t i = 0; i < active; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(active);
        const double f = f0 * (1.0 + chirp * (t - 0.5));
        phase += 2.0 * kPi * f / static_cast<double>(sample_rate);
        double envelope = 1.0;
        if (ramp > 0 && i < ramp) {
            envelope = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(i) / static_cast<double>(ramp));
        } else if (ramp > 0 && i >= active - ramp) {
            envelope = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(active - 1 - i) /
                                            static_cast<double>(ramp));
        }
        double v = std::sin(phase);
        if (harmonic) {
            v += 0.3 * std::sin(2.0 * phase);
        }
        samples[onset + i] = amplitude * envelope * v;
    }
    for (auto& s : samples) {
        s += rng.normal(0.0, 0.01);
    }
    return make_clip(std::move(samples), sample_rate);
}

}  // namespace detail

// Generates a deterministic synthetic keyword corpus on disk: WAV files under
// <out_dir>/wavs plus <out_dir>/manifest.csv. Classes are tones at distinct
// base frequencies; speakers shift them by a persistent pitch factor with
// disjoint ranges per gender. The same seed always produces byte-identical
// files.
inline Dataset synth_dataset(const SynthConfig& config, const std::string& out_dir) {
    require(config.num_classes >= 2, ErrorCode::invalid_argument, "need at least 2 classes");
    require(config.num_classes <= static_cast<int>(synth_keywords().size()),
            ErrorCode::invalid_argument,
            "at most " + std::to_string(synth_keywords().size()) + " synthetic classes");
    require(config.speakers_per_gender >= 2, ErrorCode::invalid_argument,
            "need at least 2 speakers per gender");
    require(config.utterances_per_speaker >= 1, ErrorCode::invalid_argument,
            "need at least 1 utterance per speaker");
    require(config.sample_rate == 8000 || config.sample_rate == 16000,
            ErrorCode::invalid_argument, "sample_rate must be 8000 or 16000");

    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "wavs", ec);
    require(!ec, ErrorCode::io_failure, "cannot create '" + out_dir + "/wavs'");

    Dataset dataset;
    dataset.name = "synth";
    std::ofstream manifest(fs::path(out_dir) / "manifest.csv", std::ios::trunc);
    require(manifest.good(), ErrorCode::io_failure, "cannot write manifest in '" + out_dir + "'");
    manifest << "path,keyword,speaker_id,gender,split\n";

    std::uint64_t uid = 0;
    for (int k = 0; k < config.num_classes; ++k) {
        const std::string& keyword = synth_keywords()[static_cast<std::size_t>(k)];
        const double base_hz = synth_class_frequency(k, config.num_classes, config.sample_rate);
        for (Group group : {Group::male, Group::female}) {
            for (int s = 0; s < config.speakers_per_gender; ++s) {
                const double pitch =
                    synth_pitch_factor(group, s, config.speakers_per_gender, config.seed);
                char speaker_id[16];
                std::snprintf(speaker_id, sizeof(speaker_id), "%c%02d",
                              group == Group::male ? 'm' : 'f', s);
                for (int n = 0; n < config.utterances_per_speaker; ++n, ++uid) {
                    Rng rng(mix_seed(config.seed, uid));
                    const AudioClip clip = detail::synth_utterance(
                        base_hz, pitch, config.sample_rate, config.clip_duration_ms, rng);
                    char file_name[64];
                    std::snprintf(file_name, sizeof(file_name), "%s_%s_%02d.wav",
                                  keyword.c_str(), speaker_id, n);
                    const std::string rel = std::string("wavs/") + file_name;
                    const std::string abs = (fs::path(out_dir) / rel).string();
                    write_wav(abs, clip);
                    manifest << rel << ',' << keyword << ',' << speaker_id << ','
                             << to_string(group) << ",unassigned\n";
                    Utterance u;
                    u.audio_path = abs;
                    u.keyword = keyword;
                    u.speaker_id = speaker_id;
                    u.group = group;
                    dataset.utterances.push_back(std::move(u));
                }
            }
        }
    }
    require(manifest.good(), ErrorCode::io_failure, "failed writing manifest in '" + out_dir + "'");
    detail::reindex(dataset);
    return dataset;
}

}  // namespace kwsbias
