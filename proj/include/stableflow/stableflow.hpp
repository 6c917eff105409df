#ifndef STABLEFLOW_STABLEFLOW_HPP
#define STABLEFLOW_STABLEFLOW_HPP

#include "stableflow/config.hpp"
#include "stableflow/fixtures.hpp"
#include "stableflow/flows.hpp"
#include "stableflow/graph.hpp"
#include "stableflow/lyapunov.hpp"
#include "stableflow/model.hpp"
#include "stableflow/robustness.hpp"
#include "stableflow/solver.hpp"
#include "stableflow/special.hpp"
#include "stableflow/tape.hpp"
#include "stableflow/tensor.hpp"
#include "stableflow/training.hpp"

#endif
