#include "flowdisagg/rng.hpp"

#include <sstream>

#include "flowdisagg/exceptions.hpp"

namespace flowdisagg {

std::string Rng::save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::load_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (is.fail()) throw FormatError("Rng::load_state: malformed engine state string");
}

}  // namespace flowdisagg
