#pragma once

// Umbrella header for the whole library.

#include "tcrm/autodiff.hpp"
#include "tcrm/errors.hpp"
#include "tcrm/losses.hpp"
#include "tcrm/metrics.hpp"
#include "tcrm/optim.hpp"
#include "tcrm/oracle.hpp"
#include "tcrm/parameters.hpp"
#include "tcrm/ppo.hpp"
#include "tcrm/prm.hpp"
#include "tcrm/scorer.hpp"
#include "tcrm/synth.hpp"
#include "tcrm/train.hpp"
#include "tcrm/transformer.hpp"
