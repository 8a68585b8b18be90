#pragma once

#include "nrgen/statespace.hpp"

#include <functional>

namespace nrgen {

// Gradients are fields with respect to the flat pairing <f,g> = sum f g w.
using PotentialFn = std::function<double(const Density&, const Vec&)>;
using PotentialGradFn = std::function<Vec(const Density&, const Vec&)>;

struct DissipationPotential {
  PotentialFn psi_star;
  PotentialGradFn grad_psi_star;
  // Filled by attach_legendre_psi in hamiltonian.hpp; may throw on
  // non-convergence.
  PotentialFn psi;
  bool symmetric = false;
  // Shift invariance in xi means psi is finite only on mean-zero arguments.
  bool shift_invariant = false;
};

}  // namespace nrgen
