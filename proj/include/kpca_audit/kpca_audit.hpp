// Umbrella header for the kpca_audit library.
#pragma once

#include "attention_core.hpp"
#include "gamma_audit.hpp"
#include "kernel_feature.hpp"
#include "kpca_value.hpp"
#include "matrix.hpp"
#include "projection_loss.hpp"
#include "random.hpp"
#include "report.hpp"
#include "similarity.hpp"
#include "spectral.hpp"
#include "tensor_container.hpp"
