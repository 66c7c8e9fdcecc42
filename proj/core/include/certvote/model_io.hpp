#pragma once

#include <string>

#include "certvote/network.hpp"

namespace certvote {

// Versioned JSON model document ("certvote-net", version 1). Reals are
// serialized with full round-trip precision, arrays row-major.
std::string network_to_json(const Network& net);
Network network_from_json(const std::string& text);

void save_network(const Network& net, const std::string& path);
Network load_network(const std::string& path);

}  // namespace certvote
