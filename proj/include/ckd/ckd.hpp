#pragma once

#include "ckd/backbone.hpp"
#include "ckd/box.hpp"
#include "ckd/config.hpp"
#include "ckd/data.hpp"
#include "ckd/distill.hpp"
#include "ckd/elimination.hpp"
#include "ckd/eval.hpp"
#include "ckd/head.hpp"
#include "ckd/image.hpp"
#include "ckd/matrix.hpp"
#include "ckd/model.hpp"
#include "ckd/rng.hpp"
#include "ckd/train.hpp"
#include "ckd/types.hpp"
