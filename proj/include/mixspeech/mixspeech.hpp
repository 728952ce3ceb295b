// Copyright (c) 2026 the mixspeech authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mixspeech/common.hpp"
#include "mixspeech/config.hpp"
#include "mixspeech/corpus.hpp"
#include "mixspeech/losses.hpp"
#include "mixspeech/metrics.hpp"
#include "mixspeech/mixup.hpp"
#include "mixspeech/model.hpp"
#include "mixspeech/optimizer.hpp"
#include "mixspeech/rng.hpp"
#include "mixspeech/tensor.hpp"
#include "mixspeech/train.hpp"
