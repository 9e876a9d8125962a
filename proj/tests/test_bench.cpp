#include <catch2/catch_amalgamated.hpp>
#include "pmtx/pmtx.hpp"
