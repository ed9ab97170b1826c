#pragma once

#include "mtlid/adam.hpp"
#include "mtlid/attnpool.hpp"
#include "mtlid/checkpoint.hpp"
#include "mtlid/config.hpp"
#include "mtlid/data.hpp"
#include "mtlid/encoder.hpp"
#include "mtlid/metrics.hpp"
#include "mtlid/model.hpp"
#include "mtlid/params.hpp"
#include "mtlid/preprocess.hpp"
#include "mtlid/tensor.hpp"
#include "mtlid/train.hpp"
