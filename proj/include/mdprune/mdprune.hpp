#pragma once

#include "mdprune/arch.hpp"
#include "mdprune/datakit.hpp"
#include "mdprune/metrics.hpp"
#include "mdprune/model.hpp"
#include "mdprune/objective.hpp"
#include "mdprune/ops.hpp"
#include "mdprune/optim.hpp"
#include "mdprune/pruner.hpp"
#include "mdprune/rng.hpp"
#include "mdprune/serialize.hpp"
#include "mdprune/tensor.hpp"
#include "mdprune/trainer.hpp"
