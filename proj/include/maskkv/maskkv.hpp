// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "maskkv/budgeting.hpp"
#include "maskkv/common.hpp"
#include "maskkv/decode.hpp"
#include "maskkv/eviction.hpp"
#include "maskkv/forward.hpp"
#include "maskkv/harness/calibration.hpp"
#include "maskkv/harness/compare.hpp"
#include "maskkv/harness/memory.hpp"
#include "maskkv/harness/metrics.hpp"
#include "maskkv/harness/needle.hpp"
#include "maskkv/harness/profile_io.hpp"
#include "maskkv/harness/report.hpp"
#include "maskkv/harness/trace.hpp"
#include "maskkv/keep_set.hpp"
#include "maskkv/kv_cache.hpp"
#include "maskkv/model.hpp"
#include "maskkv/scoring.hpp"
#include "maskkv/step_scores.hpp"
