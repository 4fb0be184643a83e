#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "surrmeta/errors.hpp"
#include "surrmeta/rng.hpp"

namespace surrmeta::mcmc {

struct McmcSettings {
  long iterations = 100000;
  long burn_in = 50000;
  long thin = 10;
  int chains = 2;
  std::uint64_t seed = 1;
  long adapt_window = 50;  // burn-in-only step-size adaptation batches
  int max_threads = 1;     // 0 = hardware concurrency; never changes results

  long retained_per_chain() const { return (iterations - burn_in) / thin; }
  void check() const;
};

/// Exact draw from a full conditional; mutates the state in place.
struct GibbsStep {
  std::string label;
  std::function<void(Eigen::VectorXd&, Rng&)> update;
};

enum class ProposalScale {
  linear,  // additive random walk
  log      // multiplicative random walk on a positive coordinate (Jacobian handled)
};

/// Adaptive random-walk Metropolis on a single coordinate. log_target must
/// be the conditional log density with respect to the natural (untransformed)
/// coordinate; -inf marks out-of-support proposals.
struct MetropolisStep {
  std::string label;
  int index = 0;
  ProposalScale scale = ProposalScale::linear;
  std::function<double(const Eigen::VectorXd&)> log_target;
  double initial_step = 0.5;
};

struct Model {
  std::vector<std::string> names;
  std::vector<GibbsStep> gibbs;
  std::vector<MetropolisStep> metropolis;
  std::function<double(const Eigen::VectorXd&)> log_density;  // joint log posterior
  std::vector<int> nonnegative;  // variance-type coordinates, checked on every retained draw
};

struct Chain {
  std::vector<std::string> names;
  Eigen::MatrixXd draws;  // retained x parameters
  std::vector<std::string> metropolis_labels;
  std::vector<double> acceptance;  // post-burn-in acceptance rate per Metropolis step

  Eigen::Index column(const std::string& name) const;
};

/// Runs settings.chains independent chains; chain c uses sub-seed
/// settings.seed + c, so results are identical for any max_threads.
std::vector<Chain> run_chains(const Model& model, const std::vector<Eigen::VectorXd>& inits,
                              const McmcSettings& settings);

/// Draw from N(prec^-1 * lin, prec^-1) via the Cholesky factor of prec.
Eigen::VectorXd sample_mvn_precision(const Eigen::MatrixXd& prec, const Eigen::VectorXd& lin,
                                     Rng& rng);

struct PosteriorSummary {
  double mean = 0, sd = 0, q025 = 0, q50 = 0, q975 = 0;
};

/// Pools retained draws of all chains in chain order.
Eigen::VectorXd pooled_draws(const std::vector<Chain>& chains, const std::string& name);

PosteriorSummary summarize(const std::vector<Chain>& chains, const std::string& name);
PosteriorSummary summarize_draws(const Eigen::VectorXd& draws);

struct ParamDiagnostics {
  std::string name;
  double ess = 0;    // initial-positive-sequence estimator, capped at total draws
  double rhat = 1;   // rank-normalized split-Rhat, floored at 1
  bool degenerate = false;
  std::vector<double> acf;  // lags 1..50
};

struct DiagnosticsReport {
  std::vector<ParamDiagnostics> params;
  const ParamDiagnostics& for_parameter(const std::string& name) const;
};

DiagnosticsReport diagnostics(const std::vector<Chain>& chains);

/// ESS of a single series (exposed for reuse and tests).
double effective_sample_size(const Eigen::VectorXd& draws);

void write_chain_csv(const Chain& chain, std::ostream& out);
Chain read_chain_csv(std::istream& in);

}  // namespace surrmeta::mcmc
