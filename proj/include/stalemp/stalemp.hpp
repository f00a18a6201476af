#pragma once

#include "stalemp/parallel.hpp"
#include "stalemp/tensor.hpp"
#include "stalemp/autodiff.hpp"
#include "stalemp/checkpoint.hpp"
#include "stalemp/graph.hpp"
#include "stalemp/history.hpp"
#include "stalemp/layer.hpp"
#include "stalemp/loss.hpp"
#include "stalemp/train.hpp"
#include "stalemp/diagnostics.hpp"
