#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "darec/matrix.hpp"
#include "darec/rng.hpp"

namespace darec {

// Input-side failures (bad files, bad parameters) that the CLI maps to exit 2.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParamError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InteractionTriple {
    std::uint32_t user = 0;
    std::uint32_t item = 0;
    double rating = 0.0;
    std::optional<std::int64_t> timestamp;  // parsed, never used downstream
};

struct Dataset {
    std::uint32_t n_users = 0;
    std::uint32_t n_items = 0;
    std::vector<InteractionTriple> interactions;
    // internal id -> original id, populated by the loaders
    std::vector<std::int64_t> user_ids;
    std::vector<std::int64_t> item_ids;
    std::size_t duplicates_dropped = 0;
};

struct SplitDataset {
    Dataset base;
    std::vector<std::uint32_t> train;  // indices into base.interactions
    std::vector<std::uint32_t> val;
    std::vector<std::uint32_t> test;
    std::uint64_t split_seed = 0;
};

// On-disk carrier: 32-bit floats, row-major. EMB1 round-trips bit-exactly.
struct EmbeddingMatrix {
    std::uint32_t rows = 0;
    std::uint32_t dim = 0;
    std::vector<float> values;

    Mat to_mat() const;
    static EmbeddingMatrix from_mat(const Mat& m);
    bool operator==(const EmbeddingMatrix&) const = default;
};

struct SynthSpec {
    std::uint32_t n_users = 200;
    std::uint32_t n_items = 100;
    std::uint32_t latent_dim = 8;
    std::uint32_t llm_dim = 32;
    double shared_signal_scale = 1.0;
    double specific_scale = 0.5;
    double noise_scale = 0.1;
    std::uint32_t interactions_per_user = 10;
    std::uint64_t seed = 0;
};

struct SynthResult {
    SplitDataset split;
    EmbeddingMatrix user_llm;
    EmbeddingMatrix item_llm;
    EmbeddingMatrix truth_user;
    EmbeddingMatrix truth_item;
};

// TSV `user<TAB>item<TAB>rating[<TAB>timestamp]`, '#' comments, blank lines
// skipped. Keeps rows with rating >= min_rating, densely re-indexes ids in
// order of first appearance, drops duplicate (user,item) pairs keeping the
// first. Throws ParseError (with line number) or FormatError (empty result).
Dataset load_interactions(const std::string& path, double min_rating);

// Per-user shuffle-and-slice at the given ratios; floor counts for val/test,
// remainder to train. Users with fewer than 3 interactions go entirely to
// train and do not consume randomness.
SplitDataset split_dataset(const Dataset& ds, const std::array<double, 3>& ratios,
                           std::uint64_t seed);

EmbeddingMatrix load_embeddings(const std::string& path);
void write_embeddings(const EmbeddingMatrix& m, const std::string& path);
void write_embeddings_csv(const EmbeddingMatrix& m, const std::string& path);

SynthResult synth_dataset(const SynthSpec& spec);

void write_interactions_tsv(const Dataset& ds, const std::string& path);
void write_id_map(const std::vector<std::int64_t>& ids, const std::string& path);

// All file output in this project goes through here: temp file + rename.
void atomic_write(const std::string& path, const std::string& bytes);

}  // namespace darec
