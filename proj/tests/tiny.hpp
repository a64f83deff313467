// Copyright 2026 The prosodic-kws Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Small corpus and model settings for tests that exercise whole pipelines.

#pragma once

#include "kws/train.hpp"

namespace kws::testing {

inline train::RunConfig tiny_run_config(std::uint64_t seed = 7) {
  train::RunConfig c;
  c.master_seed = seed;
  c.corpus.master_seed = seed;
  c.corpus.keywords = 2;
  c.corpus.speakers = 3;
  c.corpus.dev_speakers = 1;
  c.corpus.test_speakers = 1;
  c.model.phoneme.model_dim = 32;
  c.model.phoneme.blocks = 1;
  c.model.phoneme.heads = 2;
  c.model.phoneme.conv_kernel = 5;
  c.model.prosody.hidden = 8;
  c.model.prosody.attention_dim = 16;
  c.model.fusion.model_dim = 32;
  c.model.fusion.prosody_dim = 16;
  c.model.fusion.heads = 2;
  c.model.fusion.decision_hidden = 16;
  c.epochs = 2;
  c.batch_size = 8;
  c.warmup_epochs = 0.5;
  return c;
}

inline const train::Dataset& tiny_dataset() {
  static const train::Dataset d = train::load_dataset(tiny_run_config());
  return d;
}

}  // namespace kws::testing
