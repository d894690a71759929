#include "subnetkit/cli.hpp"
