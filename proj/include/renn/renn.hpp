// renn.hpp — umbrella include.

#pragma once

#include "renn/attack.hpp"
#include "renn/core.hpp"
#include "renn/dataset.hpp"
#include "renn/io.hpp"
#include "renn/layers.hpp"
#include "renn/linalg.hpp"
#include "renn/mlp.hpp"
#include "renn/pipeline.hpp"
#include "renn/quaternion.hpp"
#include "renn/rotation.hpp"
#include "renn/tensor.hpp"
#include "renn/training.hpp"
