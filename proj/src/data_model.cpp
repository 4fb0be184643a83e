#include "surrmeta/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "surrmeta/util.hpp"

namespace surrmeta {

std::string to_string(SurrogateScale s) { return s == SurrogateScale::suvr ? "SUVR" : "Centiloid"; }

std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::cdr_sob: return "CDR-SOB";
    case Outcome::adas_cog: return "ADAS-Cog";
    case Outcome::mmse: return "MMSE";
  }
  return "?";
}

std::string to_string(Tracer t) {
  switch (t) {
    case Tracer::florbetapir: return "florbetapir";
    case Tracer::florbetaben: return "florbetaben";
    case Tracer::flutemetamol: return "flutemetamol";
    case Tracer::other: return "other";
  }
  return "?";
}

SurrogateScale scale_from_string(const std::string& s) {
  if (s == "SUVR") return SurrogateScale::suvr;
  if (s == "Centiloid") return SurrogateScale::centiloid;
  throw DataError("unknown surrogate scale '" + s + "'");
}

Outcome outcome_from_string(const std::string& s) {
  if (s == "CDR-SOB") return Outcome::cdr_sob;
  if (s == "ADAS-Cog") return Outcome::adas_cog;
  if (s == "MMSE") return Outcome::mmse;
  throw DataError("unknown outcome '" + s + "'");
}

Tracer tracer_from_string(const std::string& s) {
  if (s == "florbetapir") return Tracer::florbetapir;
  if (s == "florbetaben") return Tracer::florbetaben;
  if (s == "flutemetamol") return Tracer::flutemetamol;
  if (s == "other") return Tracer::other;
  throw DataError("unknown tracer '" + s + "'");
}

std::vector<std::string> Dataset::study_ids() const {
  std::vector<std::string> ids;
  std::unordered_set<std::string> seen;
  for (const auto& c : contrasts)
    if (seen.insert(c.study_id).second) ids.push_back(c.study_id);
  return ids;
}

std::vector<std::string> Dataset::treatments() const {
  std::vector<std::string> ts;
  for (const auto& c : contrasts) ts.push_back(c.treatment);
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  return ts;
}

Eigen::VectorXd StudyBlock::observations() const {
  Eigen::VectorXd y(2 * static_cast<Eigen::Index>(contrasts.size()));
  for (std::size_t k = 0; k < contrasts.size(); ++k) {
    y[2 * k] = contrasts[k].y1;
    y[2 * k + 1] = contrasts[k].y2;
  }
  return y;
}

namespace {

const std::vector<std::string> kRequiredColumns = {
    "study_id", "treatment", "contrast_id",  "y1",       "se1",
    "surrogate_scale", "tracers", "t_surrogate_weeks", "y2",  "se2",
    "outcome", "adascog_variant", "t_final_weeks", "n_final", "rho_within",
    "aria_effect", "apoe_prop"};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      cells.push_back(cell);
      cell.clear();
    } else {
      cell += ch;
    }
  }
  cells.push_back(cell);
  for (auto& c : cells) c = util::trim(c);
  return cells;
}

double parse_real(const std::string& cell, std::size_t line, const std::string& column) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last)
    throw MalformedRow(line, "column '" + column + "': bad real '" + cell + "'");
  return v;
}

long parse_int(const std::string& cell, std::size_t line, const std::string& column) {
  long v = 0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last)
    throw MalformedRow(line, "column '" + column + "': bad integer '" + cell + "'");
  return v;
}

std::string duplicate_key(const TrialContrast& c) {
  return c.study_id + '\x1f' + c.contrast_id + '\x1f' + to_string(c.outcome) + '\x1f' +
         util::format_double(c.t_surrogate_weeks) + '\x1f' + util::format_double(c.t_final_weeks);
}

}  // namespace

Dataset parse_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw MissingColumn(kRequiredColumns.front());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < header.size(); ++i) index.emplace(header[i], i);
  for (const auto& name : kRequiredColumns)
    if (!index.count(name)) throw MissingColumn(name);
  const bool has_imputed = index.count("imputed_scale") > 0;

  auto cell_at = [&](const std::vector<std::string>& cells, const std::string& name) -> const std::string& {
    return cells[index.at(name)];
  };

  Dataset d;
  std::unordered_set<std::string> seen_keys;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (util::trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() < header.size())
      throw MalformedRow(line_no, "expected " + std::to_string(header.size()) + " cells, got " +
                                      std::to_string(cells.size()));
    TrialContrast c;
    c.study_id = cell_at(cells, "study_id");
    c.treatment = cell_at(cells, "treatment");
    c.contrast_id = cell_at(cells, "contrast_id");
    if (c.study_id.empty()) throw MalformedRow(line_no, "empty study_id");
    if (c.contrast_id.empty()) throw MalformedRow(line_no, "empty contrast_id");
    c.y1 = parse_real(cell_at(cells, "y1"), line_no, "y1");
    c.se1 = parse_real(cell_at(cells, "se1"), line_no, "se1");
    try {
      c.surrogate_scale = scale_from_string(cell_at(cells, "surrogate_scale"));
      for (const auto& t : util::split(cell_at(cells, "tracers"), ';'))
        if (!util::trim(t).empty()) c.tracers.insert(tracer_from_string(util::trim(t)));
      c.outcome = outcome_from_string(cell_at(cells, "outcome"));
    } catch (const DataError& e) {
      throw MalformedRow(line_no, e.what());
    }
    c.t_surrogate_weeks = parse_real(cell_at(cells, "t_surrogate_weeks"), line_no, "t_surrogate_weeks");
    c.y2 = parse_real(cell_at(cells, "y2"), line_no, "y2");
    c.se2 = parse_real(cell_at(cells, "se2"), line_no, "se2");
    const auto& variant = cell_at(cells, "adascog_variant");
    if (!variant.empty()) {
      const long v = parse_int(variant, line_no, "adascog_variant");
      if (v < 11 || v > 14) throw MalformedRow(line_no, "adascog_variant must be one of 11,12,13,14");
      c.adascog_variant = static_cast<int>(v);
    }
    c.t_final_weeks = parse_real(cell_at(cells, "t_final_weeks"), line_no, "t_final_weeks");
    c.n_final = parse_int(cell_at(cells, "n_final"), line_no, "n_final");
    const auto& rho = cell_at(cells, "rho_within");
    if (!rho.empty()) c.rho_within = parse_real(rho, line_no, "rho_within");
    const auto& aria = cell_at(cells, "aria_effect");
    if (!aria.empty()) c.aria_effect = parse_real(aria, line_no, "aria_effect");
    const auto& apoe = cell_at(cells, "apoe_prop");
    if (!apoe.empty()) c.apoe_prop = parse_real(apoe, line_no, "apoe_prop");
    if (has_imputed) {
      const auto& imp = cells[index.at("imputed_scale")];
      c.imputed_scale = (imp == "1" || imp == "true");
    }
    if (!seen_keys.insert(duplicate_key(c)).second) throw DuplicateContrast(c.study_id, c.contrast_id);
    d.contrasts.push_back(std::move(c));
  }
  return d;
}

Dataset parse_dataset_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  return parse_dataset(in);
}

void write_dataset_csv(const Dataset& d, std::ostream& out) {
  for (std::size_t i = 0; i < kRequiredColumns.size(); ++i)
    out << (i ? "," : "") << kRequiredColumns[i];
  out << ",imputed_scale\n";
  for (const auto& c : d.contrasts) {
    out << c.study_id << ',' << c.treatment << ',' << c.contrast_id << ','
        << util::format_double(c.y1) << ',' << util::format_double(c.se1) << ','
        << to_string(c.surrogate_scale) << ',';
    bool first = true;
    for (const auto t : c.tracers) {
      out << (first ? "" : ";") << to_string(t);
      first = false;
    }
    out << ',' << util::format_double(c.t_surrogate_weeks) << ',' << util::format_double(c.y2) << ','
        << util::format_double(c.se2) << ',' << to_string(c.outcome) << ',';
    if (c.adascog_variant) out << *c.adascog_variant;
    out << ',' << util::format_double(c.t_final_weeks) << ',' << c.n_final << ',';
    if (c.rho_within) out << util::format_double(*c.rho_within);
    out << ',';
    if (c.aria_effect) out << util::format_double(*c.aria_effect);
    out << ',';
    if (c.apoe_prop) out << util::format_double(*c.apoe_prop);
    out << ',' << (c.imputed_scale ? "1" : "0") << '\n';
  }
}

void write_dataset_csv_file(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  write_dataset_csv(d, out);
}

bool ValidationReport::has_errors() const { return error_count() > 0; }

std::size_t ValidationReport::error_count() const {
  return static_cast<std::size_t>(std::count_if(findings.begin(), findings.end(), [](const Finding& f) {
    return f.severity == Finding::Severity::error;
  }));
}

std::size_t ValidationReport::warning_count() const { return findings.size() - error_count(); }

ValidationReport validate_dataset(const Dataset& d) {
  ValidationReport report;
  auto add = [&](Finding::Severity sev, const TrialContrast* c, std::string msg) {
    report.findings.push_back({sev, c ? c->study_id : "", c ? c->contrast_id : "", std::move(msg)});
  };
  if (d.contrasts.empty()) {
    add(Finding::Severity::error, nullptr, "empty dataset");
    return report;
  }
  for (const auto& c : d.contrasts) {
    if (!(c.se1 > 0.0))
      add(Finding::Severity::error, &c, "nonpositive standard error se1");
    if (!(c.se2 > 0.0))
      add(Finding::Severity::error, &c, "nonpositive standard error se2");
    if (c.n_final < 1) add(Finding::Severity::error, &c, "n_final must be >= 1");
    if (c.rho_within && !(std::abs(*c.rho_within) < 1.0))
      add(Finding::Severity::error, &c, "rho_within outside (-1, 1)");
    if (c.apoe_prop && (*c.apoe_prop < 0.0 || *c.apoe_prop > 1.0))
      add(Finding::Severity::error, &c, "apoe_prop outside [0, 1]");
    if (!std::isfinite(c.y1) || !std::isfinite(c.y2))
      add(Finding::Severity::error, &c, "non-finite effect estimate");
  }
  std::set<int> variants;
  for (const auto& c : d.contrasts)
    if (c.outcome == Outcome::adas_cog && c.adascog_variant) variants.insert(*c.adascog_variant);
  if (variants.size() > 1) {
    std::string msg = "mixed ADAS-Cog variants:";
    for (int v : variants) msg += " " + std::to_string(v);
    add(Finding::Severity::warning, nullptr, msg);
  }
  std::set<SurrogateScale> scales;
  for (const auto& c : d.contrasts) scales.insert(c.surrogate_scale);
  if (scales.size() > 1)
    add(Finding::Severity::warning, nullptr, "mixed surrogate scales; harmonize before fitting");
  return report;
}

namespace {

double resolved_rho(const TrialContrast& c, double default_rho) {
  return c.rho_within ? *c.rho_within : default_rho;
}

}  // namespace

std::vector<StudyBlock> build_study_blocks(const Dataset& d, const BlockOptions& opts) {
  if (!(std::abs(opts.default_rho) < 1.0) || !(std::abs(opts.shared_control_rho) < 1.0))
    throw DataError("default_rho and shared_control_rho must lie in (-1, 1)");

  std::vector<StudyBlock> blocks;
  std::unordered_map<std::string, std::size_t> by_study;
  for (const auto& c : d.contrasts) {
    auto [it, inserted] = by_study.emplace(c.study_id, blocks.size());
    if (inserted) blocks.push_back(StudyBlock{c.study_id, {}, {}, false, 0.0});
    blocks[it->second].contrasts.push_back(c);
  }

  for (auto& b : blocks) {
    const auto K = static_cast<Eigen::Index>(b.contrasts.size());
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(2 * K, 2 * K);
    for (Eigen::Index j = 0; j < K; ++j) {
      const auto& cj = b.contrasts[j];
      const double rho_j = resolved_rho(cj, opts.default_rho);
      sigma(2 * j, 2 * j) = cj.se1 * cj.se1;
      sigma(2 * j + 1, 2 * j + 1) = cj.se2 * cj.se2;
      sigma(2 * j, 2 * j + 1) = sigma(2 * j + 1, 2 * j) = rho_j * cj.se1 * cj.se2;
      for (Eigen::Index k = j + 1; k < K; ++k) {
        const auto& ck = b.contrasts[k];
        const double rho_k = resolved_rho(ck, opts.default_rho);
        const double rho_bar = 0.5 * (rho_j + rho_k);
        const double s = opts.shared_control_rho;
        sigma(2 * j, 2 * k) = sigma(2 * k, 2 * j) = s * cj.se1 * ck.se1;
        sigma(2 * j + 1, 2 * k + 1) = sigma(2 * k + 1, 2 * j + 1) = s * cj.se2 * ck.se2;
        sigma(2 * j, 2 * k + 1) = sigma(2 * k + 1, 2 * j) = s * rho_bar * cj.se1 * ck.se2;
        sigma(2 * j + 1, 2 * k) = sigma(2 * k, 2 * j + 1) = s * rho_bar * cj.se2 * ck.se1;
      }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sigma);
    b.min_eigenvalue_before = eig.eigenvalues().minCoeff();
    if (b.min_eigenvalue_before < -1e-10) {
      if (!opts.repair_psd)
        throw NotPositiveSemiDefinite("within-study covariance of study '" + b.study_id +
                                      "' has eigenvalue " + util::format_double(b.min_eigenvalue_before));
      const Eigen::VectorXd clipped = eig.eigenvalues().cwiseMax(0.0);
      sigma = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
      sigma = 0.5 * (sigma + sigma.transpose().eval());  // re-symmetrize rounding residue
      b.psd_repaired = true;
    }
    b.sigma_within = std::move(sigma);
  }
  return blocks;
}

Dataset filter_outcome(const Dataset& d, Outcome outcome) {
  Dataset out;
  out.provenance = d.provenance;
  for (const auto& c : d.contrasts)
    if (c.outcome == outcome) out.contrasts.push_back(c);
  return out;
}

Dataset select_timepoints(const Dataset& d, TimepointPolicy policy) {
  std::map<std::pair<std::string, std::string>, std::size_t> chosen;
  for (std::size_t i = 0; i < d.contrasts.size(); ++i) {
    const auto& c = d.contrasts[i];
    const auto key = std::make_pair(c.study_id, c.contrast_id);
    auto it = chosen.find(key);
    if (it == chosen.end()) {
      chosen.emplace(key, i);
      continue;
    }
    const auto& held = d.contrasts[it->second];
    const bool replace = policy == TimepointPolicy::earliest_surrogate
                             ? c.t_surrogate_weeks < held.t_surrogate_weeks
                             : c.t_surrogate_weeks > held.t_surrogate_weeks;
    if (replace) it->second = i;
  }
  std::vector<std::size_t> keep;
  keep.reserve(chosen.size());
  for (const auto& [key, idx] : chosen) keep.push_back(idx);
  std::sort(keep.begin(), keep.end());
  Dataset out;
  out.provenance = d.provenance;
  for (const auto idx : keep) out.contrasts.push_back(d.contrasts[idx]);
  return out;
}

}  // namespace surrmeta
