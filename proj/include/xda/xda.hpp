// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "xda/attention.hpp"
#include "xda/checkpoint.hpp"
#include "xda/common.hpp"
#include "xda/config.hpp"
#include "xda/eval.hpp"
#include "xda/io.hpp"
#include "xda/methods.hpp"
#include "xda/metrics.hpp"
#include "xda/model.hpp"
#include "xda/nn.hpp"
#include "xda/opt.hpp"
#include "xda/rng.hpp"
#include "xda/synth.hpp"
#include "xda/tensor.hpp"
#include "xda/train.hpp"
