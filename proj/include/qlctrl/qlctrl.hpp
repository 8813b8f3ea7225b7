#pragma once

#include "qlctrl/errors.hpp"
#include "qlctrl/systems.hpp"
#include "qlctrl/propagator.hpp"
#include "qlctrl/linctrl.hpp"
#include "qlctrl/nonlinctrl.hpp"
#include "qlctrl/rng.hpp"
#include "qlctrl/stochastic.hpp"
