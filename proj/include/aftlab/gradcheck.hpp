// Central finite-difference gradient checking. The numeric side only ever
// calls the forward evaluation, so it stays independent of the backward pass
// it is used to verify.
#pragma once

#include "aftlab/autodiff.hpp"

#include <functional>
#include <string>
#include <vector>

namespace aftlab {

struct FdOptions {
  double step = 1e-5;
  double rel_tol = 1e-4;
  double abs_floor = 1e-7;
};

struct FdIssue {
  int param = 0;
  int row = 0;
  int col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct FdReport {
  bool ok = true;
  long entries = 0;
  double max_rel_err = 0.0;  // over entries above the absolute floor
  std::vector<FdIssue> issues;
};

// Evaluates the scalar objective at a parameter setting; must rebuild its
// computation from scratch each call.
using FdForward = std::function<double(const std::vector<Matrix>&)>;

// Compares `analytic` (one gradient per parameter, same shapes) against
// central differences of `forward` around `params`. An entry passes when
// |ad - fd| <= max(abs_floor, rel_tol * max(|ad|, |fd|)).
FdReport check_gradients(const FdForward& forward, std::vector<Matrix> params,
                         const std::vector<Matrix>& analytic, const FdOptions& opt = {});

// --- full finite-difference suite ------------------------------------------------
//
// For losses with detached terms the differenced function must hold those
// terms at their base values (a detached quantity is a constant to the
// gradient), so each loss gets a plain-double oracle forward with detach
// boundaries frozen. The oracle shares no code with the tape.

struct SuiteCase {
  std::string name;
  FdReport fd;
  double forward_gap = 0.0;  // |tape forward - oracle forward| at the base point
  bool ok = false;
};

struct SuiteResult {
  std::vector<SuiteCase> cases;
  bool ok = true;
  double seconds = 0.0;
};

// Score-level FD for every loss kind, `instances` random instances each.
SuiteResult run_loss_fd_suite(int instances, std::uint64_t seed, const FdOptions& opt = {});

// End-to-end FD through a micro model: VFT objective and the unconstrained
// alignment objective, differentiated against every model parameter.
SuiteResult run_model_fd_suite(std::uint64_t seed, const FdOptions& opt = {});

}  // namespace aftlab
