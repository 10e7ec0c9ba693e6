#pragma once

#include "transgeo/batching.hpp"
#include "transgeo/checkpoint.hpp"
#include "transgeo/config.hpp"
#include "transgeo/crop.hpp"
#include "transgeo/dataset.hpp"
#include "transgeo/eval.hpp"
#include "transgeo/geo.hpp"
#include "transgeo/image.hpp"
#include "transgeo/loss.hpp"
#include "transgeo/ops.hpp"
#include "transgeo/optim.hpp"
#include "transgeo/pipeline.hpp"
#include "transgeo/synth.hpp"
#include "transgeo/tensor.hpp"
#include "transgeo/vit.hpp"
