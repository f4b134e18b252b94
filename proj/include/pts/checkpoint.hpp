// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>

#include "pts/network.hpp"

namespace pts {

// Checkpoint layout: a text header terminated by a line "end", then the raw
// little-endian float64 arrays of every layer in order (weight, bias,
// running_mean, running_var; absent arrays are skipped). Array sizes follow
// from the layer lines, so the header fully describes the payload.
//
//   ptsnet 1
//   input 1,16,16
//   mode eval
//   layers 10
//   layer conv2d 1 8 3 1 1        kind in out kernel stride padding
//   ...
//   end

void save_network(const Network& net, std::ostream& out);
Network load_network(std::istream& in);

void save_network(const Network& net, const std::string& path);
Network load_network(const std::string& path);

/// Little-endian float64 array I/O shared with the mask and dataset writers.
void write_f64_le(std::ostream& out, const double* values, std::size_t count);
void read_f64_le(std::istream& in, double* values, std::size_t count);

} // namespace pts
