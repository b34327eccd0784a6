#ifndef EVAGC_TENSOR_REF_HPP
#define EVAGC_TENSOR_REF_HPP

#include <string>
#include <vector>

namespace evagc {

// Named view of a flat parameter (or gradient) buffer. The optimizer,
// checkpoint writer and finite-difference checker all walk models through
// these instead of knowing the concrete structs.
struct TensorRef {
    std::string name;
    double* data = nullptr;
    std::size_t size = 0;
};

using TensorRefs = std::vector<TensorRef>;

} // namespace evagc

#endif
