#include "ta/tensor.hpp"

#include <istream>
#include <ostream>

namespace ta::ad {

// Layout: "TNS1", u8 rank, rank x i32 dims, raw f32 payload. Little-endian.
void save_tensor(std::ostream& os, const Tensor& t) {
    os.write("TNS1", 4);
    const std::uint8_t rank = (std::uint8_t)t.shape.size();
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (int d : t.shape) {
        const std::int32_t v = d;
        os.write(reinterpret_cast<const char*>(&v), 4);
    }
    os.write(reinterpret_cast<const char*>(t.ptr()), t.size() * (std::int64_t)sizeof(float));
    check(os.good(), "tensor write failed");
}

Tensor load_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    check(is.good() && std::memcmp(magic, "TNS1", 4) == 0, "bad tensor magic");
    std::uint8_t rank = 0;
    is.read(reinterpret_cast<char*>(&rank), 1);
    check(is.good() && rank <= 8, "bad tensor rank");
    Shape shape(rank);
    for (auto& d : shape) {
        std::int32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 4);
        check(is.good() && v > 0, "bad tensor dim");
        d = v;
    }
    check(numel(shape) < (std::int64_t(1) << 31), "tensor too large");
    Tensor t = Tensor::zeros(shape);
    is.read(reinterpret_cast<char*>(t.ptr()), t.size() * (std::int64_t)sizeof(float));
    check(is.good(), "truncated tensor payload");
    return t;
}

}  // namespace ta::ad
