#pragma once

#include "circuits/tensor.hpp"
#include "circuits/binary_io.hpp"
#include "circuits/model.hpp"
#include "circuits/dataset.hpp"
#include "circuits/activation_index.hpp"
#include "circuits/scores.hpp"
#include "circuits/thresholding.hpp"
#include "circuits/discovery.hpp"
#include "circuits/circuit_io.hpp"
#include "circuits/evaluation.hpp"
#include "circuits/export.hpp"
