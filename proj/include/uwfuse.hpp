// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "uwfuse/tensor.hpp"
#include "uwfuse/autodiff.hpp"
#include "uwfuse/layers.hpp"
#include "uwfuse/models.hpp"
#include "uwfuse/losses.hpp"
#include "uwfuse/optim.hpp"
#include "uwfuse/image.hpp"
#include "uwfuse/data.hpp"
#include "uwfuse/metrics.hpp"
#include "uwfuse/config.hpp"
#include "uwfuse/checkpoint.hpp"
#include "uwfuse/train.hpp"
