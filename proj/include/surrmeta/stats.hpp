#pragma once

#include <vector>

#include <Eigen/Dense>

namespace surrmeta::stats {

double mean(const Eigen::VectorXd& x);

/// Sample standard deviation (n-1 denominator); 0 for n < 2.
double sd(const Eigen::VectorXd& x);

/// Quantile by linear interpolation of order statistics (R type 7).
double quantile(Eigen::VectorXd x, double p);

/// Quantile of an already ascending-sorted vector.
double quantile_sorted(const Eigen::VectorXd& sorted, double p);

double normal_quantile(double p);
double normal_cdf(double x);

/// Upper-tail p-value of a chi-squared statistic.
double chi_squared_sf(double stat, double dof);

/// Two-sample Kolmogorov-Smirnov distance sup|F1 - F2|.
double ks_distance(Eigen::VectorXd a, Eigen::VectorXd b);

/// Average ranks (1-based, ties averaged).
std::vector<double> average_ranks(const std::vector<double>& x);

}  // namespace surrmeta::stats
