#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

namespace lorra {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Non-owning view over one named parameter tensor, row-major semantics are
// not implied: data follows Eigen's column-major storage.
template <typename T>
struct TensorView {
    std::string name;
    T* data;
    Eigen::Index rows;
    Eigen::Index cols;

    Eigen::Index size() const { return rows * cols; }
};

template <typename T, typename Derived>
void add_view(std::vector<TensorView<T>>& out, std::string name, Eigen::PlainObjectBase<Derived>& m) {
    out.push_back({std::move(name), m.data(), m.rows(), m.cols()});
}

template <typename T>
T relu(T x) {
    return x > T(0) ? x : T(0);
}

}  // namespace lorra
