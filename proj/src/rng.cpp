#include "evagc/rng.hpp"

#include <sstream>

namespace evagc {

std::string Rng::save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::load_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
}

} // namespace evagc
