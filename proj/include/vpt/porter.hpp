#pragma once

#include <string>

namespace vptlab {

// Porter stemming algorithm (1980), lowercase ASCII input. Words of length
// at most 2 are returned unchanged.
std::string porter_stem(const std::string& word);

}  // namespace vptlab
