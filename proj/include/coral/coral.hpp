// coral.hpp: everything except the HTTP service and the CLI.
#pragma once

#include "coral/common.hpp"
#include "coral/dialogue.hpp"
#include "coral/generation.hpp"
#include "coral/metrics.hpp"
#include "coral/model.hpp"
#include "coral/random.hpp"
#include "coral/tensor.hpp"
#include "coral/tokenizer.hpp"
#include "coral/training.hpp"
