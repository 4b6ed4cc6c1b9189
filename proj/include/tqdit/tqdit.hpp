// Copyright 2026 The tqdit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "tqdit/autodiff.hpp"
#include "tqdit/calibration.hpp"
#include "tqdit/diffusion.hpp"
#include "tqdit/digest.hpp"
#include "tqdit/errors.hpp"
#include "tqdit/evaluation.hpp"
#include "tqdit/io.hpp"
#include "tqdit/model.hpp"
#include "tqdit/parallel.hpp"
#include "tqdit/quantizers.hpp"
#include "tqdit/rng.hpp"
#include "tqdit/tensor.hpp"
