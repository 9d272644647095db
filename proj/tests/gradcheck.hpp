#pragma once

// Central finite-difference check shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mfas/tape.hpp"

namespace mfas::testutil {

// `build` must be a deterministic function of the current param values that
// returns a scalar loss. Returns the worst relative error between analytic
// and central-difference gradients over every entry of every param.
inline double gradcheck(std::vector<Param*> params,
                        const std::function<Var(Tape&)>& build,
                        double eps = 1e-5) {
  for (Param* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = build(tape);
    tape.backward(loss);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);

  auto eval = [&]() {
    Tape tape;
    return tape.val(build(tape))[0];
  };

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& v = params[pi]->value;
    for (int64_t i = 0; i < v.numel(); ++i) {
      double saved = v[i];
      v[i] = saved + eps;
      double fp = eval();
      v[i] = saved - eps;
      double fm = eval();
      v[i] = saved;
      double num = (fp - fm) / (2 * eps);
      double ana = analytic[pi][i];
      double rel = std::abs(ana - num) / std::max({1e-6, std::abs(ana), std::abs(num)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace mfas::testutil
