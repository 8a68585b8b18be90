#pragma once

// Convenience header pulling in the whole library.

#include "nrgen/statespace.hpp"
#include "nrgen/rng.hpp"
#include "nrgen/opalg.hpp"
#include "nrgen/generic.hpp"
#include "nrgen/legendre.hpp"
#include "nrgen/hamiltonian.hpp"
#include "nrgen/dissipation.hpp"
#include "nrgen/expr.hpp"
#include "nrgen/models.hpp"
#include "nrgen/fpsolve.hpp"
#include "nrgen/pdmp_sim.hpp"
