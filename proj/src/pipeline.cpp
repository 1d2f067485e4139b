#include "sv4d/common.hpp"
