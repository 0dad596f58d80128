#pragma once

#include "scgplvm/core.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

/// @file dataset.hpp
/// Count-matrix container, label metadata, QC filtering and the
/// normalization pipelines that feed each likelihood.

namespace scgplvm::data {

/// Observed counts Y (cells x genes) with per-cell labels.
struct CountDataset {
    IMat counts;                              // N x D, nonnegative integers
    std::vector<std::string> cell_ids;        // N
    std::vector<std::string> gene_ids;        // D
    std::vector<std::string> batch_labels;    // N
    std::vector<std::string> celltype_labels; // N or empty

    Eigen::Index n_cells() const { return counts.rows(); }
    Eigen::Index n_genes() const { return counts.cols(); }
    bool has_celltypes() const { return !celltype_labels.empty(); }

    void validate() const {
        const auto n = static_cast<std::size_t>(counts.rows());
        if (cell_ids.size() != n || batch_labels.size() != n)
            throw ShapeMismatch("cell metadata length != number of matrix rows");
        if (!celltype_labels.empty() && celltype_labels.size() != n)
            throw ShapeMismatch("celltype label length != number of matrix rows");
        if (gene_ids.size() != static_cast<std::size_t>(counts.cols()))
            throw ShapeMismatch("gene id count != number of matrix columns");
        if ((counts.array() < 0).any())
            throw ParseError("negative count entry");
    }
};

/// One-hot covariate matrix Phi; rows sum to 1, columns = sorted batch levels.
struct DesignMatrix {
    Mat phi;                              // N x D_covar
    std::vector<std::string> levels;      // column order
};

enum class PipelineTag { LibraryNormalized, LogGaussian };

/// Real-valued matrix produced by a preprocessing pipeline.
struct ProcessedMatrix {
    Mat values;          // N x D
    PipelineTag pipeline_tag;
    double target = 0.0; // library target for LibraryNormalized
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

inline std::int32_t parse_count(const std::string& tok, const char* where) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(tok, &pos);
    } catch (const std::exception&) {
        throw ParseError(std::string("unparseable count in ") + where + ": '" + tok + "'");
    }
    if (pos != tok.size())
        throw ParseError(std::string("trailing garbage in count token: '") + tok + "'");
    if (v < 0.0)
        throw ParseError(std::string("negative count in ") + where + ": " + tok);
    const double r = std::round(v);
    if (std::abs(v - r) > 1e-9)
        throw ParseError(std::string("non-integer count in ") + where + ": " + tok);
    return static_cast<std::int32_t>(r);
}

struct MetaRow {
    std::string batch;
    std::string celltype;
};

inline std::map<std::string, MetaRow> load_metadata(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open metadata file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty metadata file: " + path);
    const auto header = split_csv_line(strip_cr(line));
    if (header.size() < 2 || header[0] != "cell_id" || header[1] != "batch")
        throw ParseError("metadata header must start with cell_id,batch");
    const bool has_celltype = header.size() >= 3 && header[2] == "celltype";
    std::map<std::string, MetaRow> meta;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() < 2) throw ParseError("metadata row with fewer than 2 fields");
        MetaRow row;
        row.batch = f[1];
        if (has_celltype && f.size() >= 3) row.celltype = f[2];
        if (!meta.emplace(f[0], std::move(row)).second)
            throw ParseError("duplicate cell_id in metadata: " + f[0]);
    }
    return meta;
}

} // namespace detail

enum class CountFormat { csv, mtx_triplet };

/// Load a count matrix (dense CSV or 1-indexed triplet text) plus its
/// metadata sidecar (CSV: cell_id,batch,celltype).
///
/// CSV counts: header row = gene ids, first column = cell_id.
/// Triplet: a `%%shape N D` header line, then `row col value` entries.
inline CountDataset load_dataset(const std::string& counts_path,
                                 const std::string& meta_path,
                                 CountFormat format) {
    CountDataset ds;
    if (format == CountFormat::csv) {
        std::ifstream in(counts_path);
        if (!in) throw IoError("cannot open counts file: " + counts_path);
        std::string line;
        if (!std::getline(in, line)) throw ParseError("empty counts file");
        const auto header = detail::split_csv_line(detail::strip_cr(line));
        if (header.size() < 2) throw ParseError("counts header needs cell_id + at least one gene");
        ds.gene_ids.assign(header.begin() + 1, header.end());
        std::vector<std::vector<std::int32_t>> rows;
        while (std::getline(in, line)) {
            line = detail::strip_cr(line);
            if (line.empty()) continue;
            const auto f = detail::split_csv_line(line);
            if (f.size() != header.size())
                throw ParseError("counts row width != header width");
            ds.cell_ids.push_back(f[0]);
            std::vector<std::int32_t> r(f.size() - 1);
            for (std::size_t j = 1; j < f.size(); ++j)
                r[j - 1] = detail::parse_count(f[j], "csv");
            rows.push_back(std::move(r));
        }
        ds.counts.resize(static_cast<Eigen::Index>(rows.size()),
                         static_cast<Eigen::Index>(ds.gene_ids.size()));
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < rows[i].size(); ++j)
                ds.counts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    } else {
        std::ifstream in(counts_path);
        if (!in) throw IoError("cannot open counts file: " + counts_path);
        std::string line;
        if (!std::getline(in, line)) throw ParseError("empty triplet file");
        line = detail::strip_cr(line);
        std::istringstream hs(line);
        std::string tag;
        long n = 0, d = 0;
        hs >> tag >> n >> d;
        if (tag != "%%shape" || n <= 0 || d <= 0)
            throw ParseError("triplet file must begin with a '%%shape N D' line");
        ds.counts = IMat::Zero(n, d);
        while (std::getline(in, line)) {
            line = detail::strip_cr(line);
            if (line.empty()) continue;
            std::istringstream es(line);
            long r = 0, c = 0;
            std::string vtok;
            if (!(es >> r >> c >> vtok))
                throw ParseError("malformed triplet entry: " + line);
            if (r < 1 || r > n || c < 1 || c > d)
                throw ParseError("triplet index out of range: " + line);
            ds.counts(r - 1, c - 1) = detail::parse_count(vtok, "triplet");
        }
        ds.cell_ids.resize(static_cast<std::size_t>(n));
        ds.gene_ids.resize(static_cast<std::size_t>(d));
        for (long i = 0; i < n; ++i) ds.cell_ids[static_cast<std::size_t>(i)] = "cell_" + std::to_string(i + 1);
        for (long j = 0; j < d; ++j) ds.gene_ids[static_cast<std::size_t>(j)] = "gene_" + std::to_string(j + 1);
    }

    const auto meta = detail::load_metadata(meta_path);
    if (meta.size() != ds.cell_ids.size())
        throw ShapeMismatch("metadata rows (" + std::to_string(meta.size()) +
                            ") != cells (" + std::to_string(ds.cell_ids.size()) + ")");
    bool any_celltype = false;
    for (const auto& id : ds.cell_ids) {
        const auto it = meta.find(id);
        if (it == meta.end()) throw ParseError("metadata missing cell_id: " + id);
        ds.batch_labels.push_back(it->second.batch);
        if (!it->second.celltype.empty()) any_celltype = true;
    }
    if (any_celltype) {
        for (const auto& id : ds.cell_ids)
            ds.celltype_labels.push_back(meta.at(id).celltype);
    }
    ds.validate();
    return ds;
}

inline void save_counts_csv(const CountDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write counts file: " + path);
    out << "cell_id";
    for (const auto& g : ds.gene_ids) out << ',' << g;
    out << '\n';
    for (Eigen::Index i = 0; i < ds.counts.rows(); ++i) {
        out << ds.cell_ids[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < ds.counts.cols(); ++j) out << ',' << ds.counts(i, j);
        out << '\n';
    }
}

inline void save_metadata_csv(const CountDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write metadata file: " + path);
    out << "cell_id,batch,celltype\n";
    for (std::size_t i = 0; i < ds.cell_ids.size(); ++i) {
        out << ds.cell_ids[i] << ',' << ds.batch_labels[i] << ','
            << (ds.has_celltypes() ? ds.celltype_labels[i] : std::string{}) << '\n';
    }
}

/// QC filter: drop cells with row-sum < min_cell_counts, then genes
/// expressed (count > 0) in <= min_cells_per_gene of the remaining cells.
/// Single pass each, cells first.
inline CountDataset filter_qc(const CountDataset& ds, long min_cell_counts = 200,
                              long min_cells_per_gene = 3) {
    if (min_cell_counts < 0 || min_cells_per_gene < 0)
        throw DomainError("filter_qc thresholds must be >= 0");
    const Eigen::Index n = ds.counts.rows(), d = ds.counts.cols();
    std::vector<Eigen::Index> keep_cells;
    for (Eigen::Index i = 0; i < n; ++i) {
        long long rowsum = 0;
        for (Eigen::Index j = 0; j < d; ++j) rowsum += ds.counts(i, j);
        if (rowsum >= min_cell_counts) keep_cells.push_back(i);
    }
    if (keep_cells.empty()) throw EmptyResult("filter_qc removed every cell");

    std::vector<Eigen::Index> keep_genes;
    for (Eigen::Index j = 0; j < d; ++j) {
        long expressed = 0;
        for (const auto i : keep_cells) expressed += (ds.counts(i, j) > 0) ? 1 : 0;
        if (expressed > min_cells_per_gene) keep_genes.push_back(j);
    }
    if (keep_genes.empty()) throw EmptyResult("filter_qc removed every gene");

    CountDataset out;
    out.counts.resize(static_cast<Eigen::Index>(keep_cells.size()),
                      static_cast<Eigen::Index>(keep_genes.size()));
    for (std::size_t ii = 0; ii < keep_cells.size(); ++ii)
        for (std::size_t jj = 0; jj < keep_genes.size(); ++jj)
            out.counts(static_cast<Eigen::Index>(ii), static_cast<Eigen::Index>(jj)) =
                ds.counts(keep_cells[ii], keep_genes[jj]);
    for (const auto i : keep_cells) {
        out.cell_ids.push_back(ds.cell_ids[static_cast<std::size_t>(i)]);
        out.batch_labels.push_back(ds.batch_labels[static_cast<std::size_t>(i)]);
        if (ds.has_celltypes()) out.celltype_labels.push_back(ds.celltype_labels[static_cast<std::size_t>(i)]);
    }
    for (const auto j : keep_genes) out.gene_ids.push_back(ds.gene_ids[static_cast<std::size_t>(j)]);
    return out;
}

/// Scale each row to sum to `target`.
inline ProcessedMatrix library_normalize(const CountDataset& ds, double target) {
    if (target <= 0.0) throw DomainError("library target must be positive");
    ProcessedMatrix pm;
    pm.pipeline_tag = PipelineTag::LibraryNormalized;
    pm.target = target;
    pm.values.resize(ds.counts.rows(), ds.counts.cols());
    for (Eigen::Index i = 0; i < ds.counts.rows(); ++i) {
        long long rowsum = 0;
        for (Eigen::Index j = 0; j < ds.counts.cols(); ++j) rowsum += ds.counts(i, j);
        if (rowsum == 0)
            throw ZeroRow("library_normalize: all-zero row " + std::to_string(i));
        const double scale = target / static_cast<double>(rowsum);
        for (Eigen::Index j = 0; j < ds.counts.cols(); ++j)
            pm.values(i, j) = scale * static_cast<double>(ds.counts(i, j));
    }
    return pm;
}

/// Library-normalize then log1p; the Gaussian-likelihood pipeline.
inline ProcessedMatrix gaussian_pipeline(const CountDataset& ds, double target,
                                         bool standardize_genes = false) {
    ProcessedMatrix pm = library_normalize(ds, target);
    pm.values = pm.values.array().log1p();
    pm.pipeline_tag = PipelineTag::LogGaussian;
    pm.target = 0.0;
    if (standardize_genes) {
        const auto n = static_cast<double>(pm.values.rows());
        for (Eigen::Index j = 0; j < pm.values.cols(); ++j) {
            const double mean = pm.values.col(j).mean();
            const double var = (pm.values.col(j).array() - mean).square().sum() / n;
            const double sd = std::sqrt(var);
            if (sd > 1e-12) pm.values.col(j) = (pm.values.col(j).array() - mean) / sd;
            else pm.values.col(j).array() -= mean;
        }
    }
    return pm;
}

/// One-hot design matrix; column order = sorted distinct levels.
inline DesignMatrix one_hot_design(const std::vector<std::string>& labels) {
    if (labels.empty()) throw DomainError("one_hot_design: no labels");
    DesignMatrix dm;
    dm.levels = labels;
    std::sort(dm.levels.begin(), dm.levels.end());
    dm.levels.erase(std::unique(dm.levels.begin(), dm.levels.end()), dm.levels.end());
    dm.phi = Mat::Zero(static_cast<Eigen::Index>(labels.size()),
                       static_cast<Eigen::Index>(dm.levels.size()));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto it = std::lower_bound(dm.levels.begin(), dm.levels.end(), labels[i]);
        dm.phi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(it - dm.levels.begin())) = 1.0;
    }
    return dm;
}

} // namespace scgplvm::data
