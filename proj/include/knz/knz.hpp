// Copyright 2026 The knz Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "knz/archive.hpp"
#include "knz/autodiff.hpp"
#include "knz/checkpoint.hpp"
#include "knz/corpus.hpp"
#include "knz/distill.hpp"
#include "knz/kronecker.hpp"
#include "knz/layers.hpp"
#include "knz/loss_kernels.hpp"
#include "knz/matrix.hpp"
#include "knz/model.hpp"
#include "knz/report.hpp"
#include "knz/rng.hpp"
