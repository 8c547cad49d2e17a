#pragma once

// Brute-force oracle twins of the metric suite. These are deliberately
// naive re-implementations (direct 2D convolution, union-find components,
// per-pixel loops) kept independent of src/metrics.cpp so equivalence
// tests mean something.

#include "flowmatte/matting.hpp"

namespace flowmatte::oracle {

double mad(const AlphaSequence& pred, const AlphaSequence& gt, double scale);
double mse(const AlphaSequence& pred, const AlphaSequence& gt, double scale);
double sad(const AlphaSequence& pred, const AlphaSequence& gt, double scale);
double grad_error(const AlphaSequence& pred, const AlphaSequence& gt, double scale);
double conn_error(const AlphaSequence& pred, const AlphaSequence& gt, double scale);
double dtssd(const AlphaSequence& pred, const AlphaSequence& gt, double scale);

}  // namespace flowmatte::oracle
