#include "surrmeta/mcmc.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <thread>

#include "surrmeta/stats.hpp"
#include "surrmeta/util.hpp"

namespace surrmeta::mcmc {

void McmcSettings::check() const {
  if (iterations <= 0) throw DataError("iterations must be positive");
  if (burn_in < 0 || burn_in >= iterations) throw DataError("burn_in must lie in [0, iterations)");
  if (thin <= 0) throw DataError("thin must be positive");
  if (chains < 1) throw DataError("chains must be >= 1");
  if (adapt_window <= 0) throw DataError("adapt_window must be positive");
  if (retained_per_chain() < 100)
    throw DataError("settings retain " + std::to_string(retained_per_chain()) +
                    " draws per chain; at least 100 required");
}

Eigen::Index Chain::column(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw UnknownParameter(name);
  return static_cast<Eigen::Index>(it - names.begin());
}

namespace {

struct MetropolisState {
  double log_step;
  long window_proposals = 0;
  long window_accepts = 0;
  long batch = 0;
  long kept_proposals = 0;  // post-burn-in
  long kept_accepts = 0;
};

Chain run_single_chain(const Model& model, Eigen::VectorXd state, const McmcSettings& s,
                       std::uint64_t sub_seed, int chain_index) {
  Rng rng(sub_seed);
  const auto P = static_cast<Eigen::Index>(model.names.size());
  if (state.size() != P) throw DataError("init size does not match parameter count");

  if (model.log_density) {
    const double ld = model.log_density(state);
    if (!std::isfinite(ld))
      throw InitOutOfSupport("chain " + std::to_string(chain_index) +
                             ": log density not finite at the initial point");
  }

  std::vector<MetropolisState> msts;
  msts.reserve(model.metropolis.size());
  for (const auto& step : model.metropolis) msts.push_back({std::log(step.initial_step)});

  const long retained = s.retained_per_chain();
  Eigen::MatrixXd draws(retained, P);
  long row = 0;

  for (long t = 1; t <= s.iterations; ++t) {
    for (const auto& g : model.gibbs) g.update(state, rng);

    for (std::size_t m = 0; m < model.metropolis.size(); ++m) {
      const auto& step = model.metropolis[m];
      auto& mst = msts[m];
      const double cur_target = step.log_target(state);
      if (!std::isfinite(cur_target))
        throw DivergentChain("chain " + std::to_string(chain_index) + ": conditional for '" +
                             step.label + "' became non-finite at iteration " + std::to_string(t));
      const double old_value = state[step.index];
      const double eps = std::exp(mst.log_step) * rng.normal();
      double log_jacobian = 0.0;
      double proposal;
      if (step.scale == ProposalScale::log) {
        const double log_old = std::log(old_value);
        const double log_new = log_old + eps;
        proposal = std::exp(log_new);
        log_jacobian = log_new - log_old;
      } else {
        proposal = old_value + eps;
      }
      bool accept = false;
      if (std::isfinite(proposal) && (step.scale != ProposalScale::log || proposal > 0.0)) {
        state[step.index] = proposal;
        const double prop_target = step.log_target(state);
        const double log_alpha = prop_target - cur_target + log_jacobian;
        accept = std::isfinite(prop_target) && std::log(rng.uniform_pos()) < log_alpha;
        if (!accept) state[step.index] = old_value;
      }
      ++mst.window_proposals;
      if (accept) ++mst.window_accepts;
      if (t <= s.burn_in) {
        if (mst.window_proposals == s.adapt_window) {
          ++mst.batch;
          const double rate =
              static_cast<double>(mst.window_accepts) / static_cast<double>(mst.window_proposals);
          const double delta = std::min(0.25, 1.0 / std::sqrt(static_cast<double>(mst.batch)));
          mst.log_step += rate > 0.44 ? delta : -delta;
          mst.window_proposals = 0;
          mst.window_accepts = 0;
        }
      } else {
        ++mst.kept_proposals;
        if (accept) ++mst.kept_accepts;
      }
    }

    if (!state.allFinite())
      throw DivergentChain("chain " + std::to_string(chain_index) +
                           ": state became non-finite at iteration " + std::to_string(t));

    if (t > s.burn_in && (t - s.burn_in) % s.thin == 0) {
      for (const int idx : model.nonnegative)
        if (state[idx] < 0.0)
          throw DivergentChain("chain " + std::to_string(chain_index) + ": parameter '" +
                               model.names[idx] + "' went negative");
      draws.row(row++) = state;
    }
  }

  Chain chain;
  chain.names = model.names;
  chain.draws = std::move(draws);
  for (std::size_t m = 0; m < model.metropolis.size(); ++m) {
    chain.metropolis_labels.push_back(model.metropolis[m].label);
    const auto& mst = msts[m];
    chain.acceptance.push_back(mst.kept_proposals == 0
                                   ? 0.0
                                   : static_cast<double>(mst.kept_accepts) /
                                         static_cast<double>(mst.kept_proposals));
  }
  return chain;
}

}  // namespace

std::vector<Chain> run_chains(const Model& model, const std::vector<Eigen::VectorXd>& inits,
                              const McmcSettings& settings) {
  settings.check();
  if (model.names.empty()) throw DataError("model has no parameters");
  if (inits.empty()) throw DataError("no initial points supplied");
  if (inits.size() != 1 && inits.size() != static_cast<std::size_t>(settings.chains))
    throw DataError("expected 1 or chains initial points");

  auto init_for = [&](int c) -> const Eigen::VectorXd& {
    return inits.size() == 1 ? inits.front() : inits[static_cast<std::size_t>(c)];
  };

  std::vector<Chain> chains(static_cast<std::size_t>(settings.chains));
  std::vector<std::exception_ptr> failures(chains.size());

  unsigned n_threads = settings.max_threads == 0 ? std::thread::hardware_concurrency()
                                                 : static_cast<unsigned>(settings.max_threads);
  n_threads = std::max(1u, std::min<unsigned>(n_threads, static_cast<unsigned>(settings.chains)));

  auto work = [&](int c) {
    try {
      chains[static_cast<std::size_t>(c)] =
          run_single_chain(model, init_for(c), settings, settings.seed + static_cast<std::uint64_t>(c), c);
    } catch (...) {
      failures[static_cast<std::size_t>(c)] = std::current_exception();
    }
  };

  if (n_threads == 1) {
    for (int c = 0; c < settings.chains; ++c) work(c);
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (unsigned i = 0; i < n_threads; ++i)
      pool.emplace_back([&] {
        for (int c = next.fetch_add(1); c < settings.chains; c = next.fetch_add(1)) work(c);
      });
    for (auto& th : pool) th.join();
  }

  for (const auto& f : failures)
    if (f) std::rethrow_exception(f);
  return chains;
}

Eigen::VectorXd sample_mvn_precision(const Eigen::MatrixXd& prec, const Eigen::VectorXd& lin,
                                     Rng& rng) {
  Eigen::LLT<Eigen::MatrixXd> llt(prec);
  if (llt.info() != Eigen::Success)
    throw DivergentChain("conditional precision matrix is not positive definite");
  const Eigen::VectorXd mu = llt.solve(lin);
  const Eigen::VectorXd z = rng.normal_vector(prec.rows());
  return mu + llt.matrixU().solve(z);
}

Eigen::VectorXd pooled_draws(const std::vector<Chain>& chains, const std::string& name) {
  if (chains.empty()) throw DataError("no chains");
  const auto col = chains.front().column(name);
  Eigen::Index total = 0;
  for (const auto& c : chains) total += c.draws.rows();
  Eigen::VectorXd pooled(total);
  Eigen::Index at = 0;
  for (const auto& c : chains) {
    pooled.segment(at, c.draws.rows()) = c.draws.col(col);
    at += c.draws.rows();
  }
  return pooled;
}

PosteriorSummary summarize_draws(const Eigen::VectorXd& draws) {
  Eigen::VectorXd sorted = draws;
  std::sort(sorted.begin(), sorted.end());
  PosteriorSummary s;
  s.mean = stats::mean(draws);
  s.sd = stats::sd(draws);
  s.q025 = stats::quantile_sorted(sorted, 0.025);
  s.q50 = stats::quantile_sorted(sorted, 0.50);
  s.q975 = stats::quantile_sorted(sorted, 0.975);
  return s;
}

PosteriorSummary summarize(const std::vector<Chain>& chains, const std::string& name) {
  return summarize_draws(pooled_draws(chains, name));
}

namespace {

std::vector<double> autocorrelations(const Eigen::VectorXd& x, int max_lag) {
  const auto n = x.size();
  std::vector<double> acf;
  const double m = x.mean();
  const Eigen::VectorXd c = x.array() - m;
  const double c0 = c.squaredNorm() / static_cast<double>(n);
  if (c0 <= 0.0) return acf;
  for (int lag = 1; lag <= max_lag && lag < n; ++lag) {
    const double ck =
        c.head(n - lag).dot(c.tail(n - lag)) / static_cast<double>(n);
    acf.push_back(ck / c0);
  }
  return acf;
}

}  // namespace

double effective_sample_size(const Eigen::VectorXd& draws) {
  const auto n = draws.size();
  if (n < 2) return static_cast<double>(n);
  const double m = draws.mean();
  const Eigen::VectorXd c = draws.array() - m;
  const double c0 = c.squaredNorm() / static_cast<double>(n);
  if (c0 <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  auto rho = [&](long t) {
    return c.head(n - t).dot(c.tail(n - t)) / static_cast<double>(n) / c0;
  };
  // Geyer initial positive sequence: tau = 1 + 2*sum(rho_t), truncated at the
  // first non-positive pair sum rho_{2m} + rho_{2m+1}.
  const long max_lag = std::min<long>(n - 1, 2000);
  double tau = -1.0;
  for (long pair = 0;; ++pair) {
    const long even = 2 * pair;
    const long odd = even + 1;
    if (even > max_lag) break;
    const double rho_even = even == 0 ? 1.0 : rho(even);
    const double rho_odd = odd <= max_lag ? rho(odd) : 0.0;
    const double gamma = rho_even + rho_odd;
    if (gamma <= 0.0) break;
    tau += 2.0 * gamma;
    if (odd >= max_lag) break;
  }
  if (tau <= 0.0) return static_cast<double>(n);
  return std::min(static_cast<double>(n), static_cast<double>(n) / tau);
}

namespace {

double split_rhat_rank_normalized(const std::vector<Eigen::VectorXd>& chains_draws) {
  // Split each chain in half, rank-normalize over the pooled draws, then
  // apply the classic between/within variance ratio.
  std::vector<Eigen::VectorXd> segments;
  Eigen::Index half = std::numeric_limits<Eigen::Index>::max();
  for (const auto& d : chains_draws) half = std::min(half, d.size() / 2);
  if (half < 2) return std::numeric_limits<double>::quiet_NaN();
  for (const auto& d : chains_draws) {
    segments.push_back(d.head(half));
    segments.push_back(d.tail(half));
  }
  std::vector<double> pooled;
  for (const auto& seg : segments)
    for (Eigen::Index i = 0; i < seg.size(); ++i) pooled.push_back(seg[i]);
  const auto ranks = stats::average_ranks(pooled);
  const double S = static_cast<double>(pooled.size());
  std::size_t at = 0;
  std::vector<Eigen::VectorXd> z(segments.size());
  for (std::size_t j = 0; j < segments.size(); ++j) {
    z[j].resize(half);
    for (Eigen::Index i = 0; i < half; ++i)
      z[j][i] = stats::normal_quantile((ranks[at++] - 0.375) / (S + 0.25));
  }
  const double m = static_cast<double>(z.size());
  const double n = static_cast<double>(half);
  double grand = 0.0;
  std::vector<double> means(z.size()), vars(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    means[j] = z[j].mean();
    vars[j] = (z[j].array() - means[j]).square().sum() / (n - 1.0);
    grand += means[j];
  }
  grand /= m;
  double B = 0.0, W = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    B += (means[j] - grand) * (means[j] - grand);
    W += vars[j];
  }
  B *= n / (m - 1.0);
  W /= m;
  if (W <= 0.0) return B > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  const double vhat = (n - 1.0) / n * W + B / n;
  return std::max(1.0, std::sqrt(vhat / W));
}

}  // namespace

DiagnosticsReport diagnostics(const std::vector<Chain>& chains) {
  if (chains.empty()) throw DataError("no chains");
  const auto& names = chains.front().names;
  Eigen::Index total = 0;
  for (const auto& c : chains) total += c.draws.rows();
  if (chains.front().draws.rows() < 100) throw DataError("diagnostics need >= 100 retained draws");

  DiagnosticsReport report;
  for (std::size_t p = 0; p < names.size(); ++p) {
    ParamDiagnostics d;
    d.name = names[p];
    std::vector<Eigen::VectorXd> per_chain;
    for (const auto& c : chains) per_chain.push_back(c.draws.col(static_cast<Eigen::Index>(p)));

    bool all_constant = true;
    for (const auto& x : per_chain)
      if ((x.array() != x[0]).any()) {
        all_constant = false;
        break;
      }
    if (all_constant) {
      d.degenerate = true;
      d.ess = std::numeric_limits<double>::quiet_NaN();
      d.rhat = std::numeric_limits<double>::quiet_NaN();
      report.params.push_back(std::move(d));
      continue;
    }

    double ess = 0.0;
    int acf_chains = 0;
    std::vector<double> acf_sum;
    for (const auto& x : per_chain) {
      const double e = effective_sample_size(x);
      ess += std::isnan(e) ? 1.0 : e;  // a constant chain carries one draw of information
      const auto acf = autocorrelations(x, 50);
      if (!acf.empty()) {
        if (acf_sum.size() < acf.size()) acf_sum.resize(acf.size(), 0.0);
        for (std::size_t i = 0; i < acf.size(); ++i) acf_sum[i] += acf[i];
        ++acf_chains;
      }
    }
    d.ess = std::min(ess, static_cast<double>(total));
    if (acf_chains > 0) {
      d.acf = std::move(acf_sum);
      for (auto& a : d.acf) a /= acf_chains;
    }
    d.rhat = split_rhat_rank_normalized(per_chain);
    report.params.push_back(std::move(d));
  }
  return report;
}

const ParamDiagnostics& DiagnosticsReport::for_parameter(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return p;
  throw UnknownParameter(name);
}

void write_chain_csv(const Chain& chain, std::ostream& out) {
  out << "iteration";
  for (const auto& n : chain.names) out << ',' << n;
  out << '\n';
  for (Eigen::Index i = 0; i < chain.draws.rows(); ++i) {
    out << (i + 1);
    for (Eigen::Index j = 0; j < chain.draws.cols(); ++j)
      out << ',' << util::format_double(chain.draws(i, j));
    out << '\n';
  }
}

Chain read_chain_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty draw dump");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = util::split(line, ',');
  if (header.empty() || header.front() != "iteration") throw IoError("draw dump missing header");
  Chain chain;
  chain.names.assign(header.begin() + 1, header.end());
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = util::split(line, ',');
    if (cells.size() != header.size()) throw IoError("draw dump row width mismatch");
    std::vector<double> row;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cells[i].data(), cells[i].data() + cells[i].size(), v);
      if (ec != std::errc{} || ptr != cells[i].data() + cells[i].size())
        throw IoError("draw dump bad value '" + cells[i] + "'");
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  chain.draws.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(chain.names.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      chain.draws(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return chain;
}

}  // namespace surrmeta::mcmc
