#include "darec/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "darec/kernels.hpp"

namespace darec {

namespace {

std::vector<std::string> split_on(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = line.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

double parse_double(const std::string& s, const char* what, std::size_t line_no) {
    double v = 0.0;
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc{} || ptr != end)
        throw ParseError("line " + std::to_string(line_no) + ": bad " +
                         std::string(what) + " '" + s + "'");
    return v;
}

std::int64_t parse_int(const std::string& s, const char* what, std::size_t line_no) {
    std::int64_t v = 0;
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc{} || ptr != end)
        throw ParseError("line " + std::to_string(line_no) + ": bad " +
                         std::string(what) + " '" + s + "'");
    return v;
}

void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

Mat EmbeddingMatrix::to_mat() const {
    Mat m(rows, dim);
    for (std::size_t i = 0; i < values.size(); ++i)
        m.data()[i] = static_cast<double>(values[i]);
    return m;
}

EmbeddingMatrix EmbeddingMatrix::from_mat(const Mat& m) {
    EmbeddingMatrix e;
    e.rows = static_cast<std::uint32_t>(m.rows());
    e.dim = static_cast<std::uint32_t>(m.cols());
    e.values.resize(m.size());
    for (std::size_t i = 0; i < m.size(); ++i)
        e.values[i] = static_cast<float>(m.data()[i]);
    return e;
}

Dataset load_interactions(const std::string& path, double min_rating) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open interactions file: " + path);

    Dataset ds;
    std::map<std::int64_t, std::uint32_t> user_map;
    std::map<std::int64_t, std::uint32_t> item_map;
    std::map<std::pair<std::uint32_t, std::uint32_t>, bool> seen;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;

        const auto fields = split_on(line, '\t');
        if (fields.size() < 3 || fields.size() > 4)
            throw ParseError("line " + std::to_string(line_no) + ": expected 3 or 4 " +
                             "tab-separated fields, got " + std::to_string(fields.size()));

        const std::int64_t orig_user = parse_int(fields[0], "user id", line_no);
        const std::int64_t orig_item = parse_int(fields[1], "item id", line_no);
        const double rating = parse_double(fields[2], "rating", line_no);
        if (!std::isfinite(rating))
            throw ParseError("line " + std::to_string(line_no) + ": non-finite rating");

        std::optional<std::int64_t> ts;
        if (fields.size() == 4) ts = parse_int(fields[3], "timestamp", line_no);

        if (rating < min_rating) continue;

        auto [uit, u_new] = user_map.emplace(orig_user, static_cast<std::uint32_t>(ds.user_ids.size()));
        if (u_new) ds.user_ids.push_back(orig_user);
        auto [iit, i_new] = item_map.emplace(orig_item, static_cast<std::uint32_t>(ds.item_ids.size()));
        if (i_new) ds.item_ids.push_back(orig_item);

        const std::uint32_t u = uit->second;
        const std::uint32_t i = iit->second;
        if (!seen.emplace(std::make_pair(u, i), true).second) {
            ++ds.duplicates_dropped;
            continue;
        }
        ds.interactions.push_back({u, i, rating, ts});
    }

    if (ds.interactions.empty())
        throw FormatError("no interactions with rating >= " + fmt_double(min_rating) +
                          " in " + path);
    ds.n_users = static_cast<std::uint32_t>(ds.user_ids.size());
    ds.n_items = static_cast<std::uint32_t>(ds.item_ids.size());
    return ds;
}

SplitDataset split_dataset(const Dataset& ds, const std::array<double, 3>& ratios,
                           std::uint64_t seed) {
    if (ds.interactions.empty()) throw ParamError("split_dataset: empty dataset");
    double total = ratios[0] + ratios[1] + ratios[2];
    if (!(ratios[0] > 0) || !(ratios[1] > 0) || !(ratios[2] > 0) || !(total > 0))
        throw ParamError("split_dataset: ratios must be positive");
    const double r_val = ratios[1] / total;
    const double r_test = ratios[2] / total;

    std::vector<std::vector<std::uint32_t>> per_user(ds.n_users);
    for (std::uint32_t idx = 0; idx < ds.interactions.size(); ++idx)
        per_user[ds.interactions[idx].user].push_back(idx);

    SplitDataset out;
    out.base = ds;
    out.split_seed = seed;
    Rng rng(seed);

    for (std::uint32_t u = 0; u < ds.n_users; ++u) {
        auto& idx = per_user[u];
        if (idx.size() < 3) {
            out.train.insert(out.train.end(), idx.begin(), idx.end());
            continue;
        }
        rng.shuffle(idx);
        const std::size_t n = idx.size();
        const std::size_t n_val = static_cast<std::size_t>(std::floor(n * r_val));
        const std::size_t n_test = static_cast<std::size_t>(std::floor(n * r_test));
        const std::size_t n_train = n - n_val - n_test;
        out.train.insert(out.train.end(), idx.begin(), idx.begin() + n_train);
        out.val.insert(out.val.end(), idx.begin() + n_train, idx.begin() + n_train + n_val);
        out.test.insert(out.test.end(), idx.begin() + n_train + n_val, idx.end());
    }
    return out;
}

EmbeddingMatrix load_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open embeddings file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    if (bytes.empty()) throw FormatError("empty embeddings file: " + path);

    const bool has_magic = bytes.size() >= 4 && bytes.compare(0, 4, "EMB1") == 0;
    const bool near_magic = !has_magic && bytes.size() >= 3 && bytes.compare(0, 3, "EMB") == 0;
    if (near_magic)
        throw FormatError(path + ": bad magic at offset 0 (expected 'EMB1')");

    if (has_magic) {
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
        if (bytes.size() < 13)
            throw FormatError(path + ": truncated header at offset " +
                              std::to_string(bytes.size()) + " (need 13 bytes)");
        if (p[4] != 0x01)
            throw FormatError(path + ": unsupported version byte at offset 4");
        EmbeddingMatrix m;
        m.rows = get_u32_le(p + 5);
        m.dim = get_u32_le(p + 9);
        const std::size_t need = 13 + static_cast<std::size_t>(m.rows) * m.dim * 4;
        if (bytes.size() != need)
            throw FormatError(path + ": truncated payload at offset " +
                              std::to_string(bytes.size()) + " (need " +
                              std::to_string(need) + " bytes)");
        m.values.resize(static_cast<std::size_t>(m.rows) * m.dim);
        std::memcpy(m.values.data(), bytes.data() + 13, m.values.size() * 4);
        for (std::size_t i = 0; i < m.values.size(); ++i) {
            if (!std::isfinite(m.values[i]))
                throw FormatError(path + ": non-finite entry at offset " +
                                  std::to_string(13 + i * 4));
        }
        return m;
    }

    // CSV fallback: one row per line, comma-separated decimal reals.
    EmbeddingMatrix m;
    std::istringstream ss(bytes);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_on(line, ',');
        if (m.dim == 0) {
            m.dim = static_cast<std::uint32_t>(fields.size());
        } else if (fields.size() != m.dim) {
            throw FormatError(path + ": line " + std::to_string(line_no) +
                              ": expected " + std::to_string(m.dim) + " columns, got " +
                              std::to_string(fields.size()));
        }
        for (const auto& f : fields) {
            double v;
            try {
                v = parse_double(f, "value", line_no);
            } catch (const ParseError& e) {
                throw FormatError(path + ": " + e.what());
            }
            if (!std::isfinite(v))
                throw FormatError(path + ": line " + std::to_string(line_no) +
                                  ": non-finite entry");
            m.values.push_back(static_cast<float>(v));
        }
        ++m.rows;
    }
    if (m.rows == 0) throw FormatError(path + ": no data rows");
    return m;
}

void write_embeddings(const EmbeddingMatrix& m, const std::string& path) {
    std::string bytes;
    bytes.reserve(13 + m.values.size() * 4);
    bytes += "EMB1";
    bytes.push_back(0x01);
    put_u32_le(bytes, m.rows);
    put_u32_le(bytes, m.dim);
    const std::size_t payload_off = bytes.size();
    bytes.resize(payload_off + m.values.size() * 4);
    std::memcpy(bytes.data() + payload_off, m.values.data(), m.values.size() * 4);
    atomic_write(path, bytes);
}

void write_embeddings_csv(const EmbeddingMatrix& m, const std::string& path) {
    std::string out;
    for (std::uint32_t r = 0; r < m.rows; ++r) {
        for (std::uint32_t c = 0; c < m.dim; ++c) {
            if (c) out += ',';
            char buf[48];
            std::snprintf(buf, sizeof(buf), "%.9g",
                          static_cast<double>(m.values[static_cast<std::size_t>(r) * m.dim + c]));
            out += buf;
        }
        out += '\n';
    }
    atomic_write(path, out);
}

SynthResult synth_dataset(const SynthSpec& spec) {
    if (spec.n_users < 1 || spec.n_items < 1 || spec.latent_dim < 1 || spec.llm_dim < 1)
        throw ParamError("synth_dataset: counts must be >= 1");
    if (spec.interactions_per_user < 1 || spec.interactions_per_user > spec.n_items)
        throw ParamError("synth_dataset: interactions_per_user must be in [1, n_items]");
    if (spec.shared_signal_scale < 0 || spec.specific_scale < 0 || spec.noise_scale < 0)
        throw ParamError("synth_dataset: scales must be >= 0");

    Rng rng(spec.seed);
    const Mat z_u = Mat::gaussian(spec.n_users, spec.latent_dim, 0.0, 1.0, rng);
    const Mat z_i = Mat::gaussian(spec.n_items, spec.latent_dim, 0.0, 1.0, rng);
    const double w_std = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
    const Mat w = Mat::gaussian(spec.latent_dim, spec.llm_dim, 0.0, w_std, rng);

    auto make_llm = [&](const Mat& z) {
        Mat out = matmul(z, w);
        scale_inplace(out, spec.shared_signal_scale);
        const Mat specific =
            Mat::gaussian(z.rows(), spec.llm_dim, 0.0, 1.0, rng);
        add_scaled_inplace(out, specific, spec.specific_scale);
        const Mat noise = Mat::gaussian(z.rows(), spec.llm_dim, 0.0, 1.0, rng);
        add_scaled_inplace(out, noise, spec.noise_scale);
        return out;
    };
    const Mat user_llm = make_llm(z_u);
    const Mat item_llm = make_llm(z_i);

    // Each user interacts with their top-scored items under the true latents.
    Dataset ds;
    ds.n_users = spec.n_users;
    ds.n_items = spec.n_items;
    ds.user_ids.resize(spec.n_users);
    ds.item_ids.resize(spec.n_items);
    std::iota(ds.user_ids.begin(), ds.user_ids.end(), 0);
    std::iota(ds.item_ids.begin(), ds.item_ids.end(), 0);
    std::vector<std::uint32_t> order(spec.n_items);
    for (std::uint32_t u = 0; u < spec.n_users; ++u) {
        std::iota(order.begin(), order.end(), 0u);
        std::vector<double> score(spec.n_items);
        for (std::uint32_t i = 0; i < spec.n_items; ++i)
            score[i] = kernels::dot(z_u.row(u), z_i.row(i), spec.latent_dim);
        std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
            if (score[a] != score[b]) return score[a] > score[b];
            return a < b;
        });
        for (std::uint32_t k = 0; k < spec.interactions_per_user; ++k)
            ds.interactions.push_back({u, order[k], 5.0, std::nullopt});
    }

    SynthResult res;
    res.split = split_dataset(ds, {3.0, 1.0, 1.0}, spec.seed);
    res.user_llm = EmbeddingMatrix::from_mat(user_llm);
    res.item_llm = EmbeddingMatrix::from_mat(item_llm);
    res.truth_user = EmbeddingMatrix::from_mat(z_u);
    res.truth_item = EmbeddingMatrix::from_mat(z_i);
    return res;
}

void write_interactions_tsv(const Dataset& ds, const std::string& path) {
    std::string out;
    for (const auto& t : ds.interactions) {
        out += std::to_string(ds.user_ids[t.user]);
        out += '\t';
        out += std::to_string(ds.item_ids[t.item]);
        out += '\t';
        out += fmt_double(t.rating);
        if (t.timestamp) {
            out += '\t';
            out += std::to_string(*t.timestamp);
        }
        out += '\n';
    }
    atomic_write(path, out);
}

void write_id_map(const std::vector<std::int64_t>& ids, const std::string& path) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out += std::to_string(i);
        out += '\t';
        out += std::to_string(ids[i]);
        out += '\n';
    }
    atomic_write(path, out);
}

void atomic_write(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write file: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " -> " + path);
}

}  // namespace darec
