#pragma once

#include "widecaps/error.hpp"
#include "widecaps/tensor.hpp"
#include "widecaps/tape.hpp"
#include "widecaps/linalg.hpp"
#include "widecaps/ops.hpp"
#include "widecaps/gradcheck.hpp"
#include "widecaps/routing.hpp"
#include "widecaps/attention.hpp"
#include "widecaps/parameters.hpp"
#include "widecaps/backbone.hpp"
#include "widecaps/model.hpp"
#include "widecaps/data.hpp"
#include "widecaps/training.hpp"
#include "widecaps/config.hpp"
#include "widecaps/checkpoint.hpp"
#include "widecaps/runner.hpp"
#include "widecaps/gradsuite.hpp"
