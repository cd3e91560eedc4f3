// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The lirf-desk Authors

#pragma once

#include "lirf/errors.hpp"
#include "lirf/tensor.hpp"
#include "lirf/ops.hpp"
#include "lirf/sgd.hpp"
#include "lirf/binary_io.hpp"
#include "lirf/checkpoint.hpp"
#include "lirf/blocknet.hpp"
#include "lirf/losses.hpp"
#include "lirf/pruner.hpp"
#include "lirf/datasets.hpp"
#include "lirf/training.hpp"
#include "lirf/eval.hpp"
#include "lirf/deposit.hpp"
#include "lirf/config.hpp"
#include "lirf/pipeline.hpp"
