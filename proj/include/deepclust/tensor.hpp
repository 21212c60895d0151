#pragma once

#include "deepclust/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace deepclust {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape &shape)
{
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i)
  {
    if (i != 0)
    {
      os << ", ";
    }
    os << shape[i];
  }
  os << ')';
  return os.str();
}

inline std::size_t shape_volume(const Shape &shape)
{
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/**
 * Dense row-major n-dimensional array.
 *
 * Extents are always >= 1, so an allocated tensor is never empty. A
 * default-constructed tensor has rank 0 and no storage; it is used as the
 * "not yet set" value in caches.
 */
template <typename T>
class Tensor
{
public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
    : shape_(std::move(shape))
  {
    validate_shape(shape_);
    data_.assign(shape_volume(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape))
    , data_(std::move(data))
  {
    validate_shape(shape_);
    if (data_.size() != shape_volume(shape_))
    {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  const Shape &shape() const noexcept
  {
    return shape_;
  }

  std::size_t rank() const noexcept
  {
    return shape_.size();
  }

  std::size_t dim(std::size_t axis) const
  {
    if (axis >= shape_.size())
    {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_string(shape_));
    }
    return shape_[axis];
  }

  std::size_t size() const noexcept
  {
    return data_.size();
  }

  bool empty() const noexcept
  {
    return data_.empty();
  }

  T *data() noexcept
  {
    return data_.data();
  }

  const T *data() const noexcept
  {
    return data_.data();
  }

  std::span<T> values() noexcept
  {
    return data_;
  }

  std::span<const T> values() const noexcept
  {
    return data_;
  }

  T &operator[](std::size_t i) noexcept
  {
    return data_[i];
  }

  const T &operator[](std::size_t i) const noexcept
  {
    return data_[i];
  }

  T &at(std::initializer_list<std::size_t> index)
  {
    return data_[offset(index)];
  }

  const T &at(std::initializer_list<std::size_t> index) const
  {
    return data_[offset(index)];
  }

  void fill(T value)
  {
    std::fill(data_.begin(), data_.end(), value);
  }

  /// Same storage viewed with a different shape of equal volume.
  Tensor reshaped(Shape shape) const
  {
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const
  {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const
  {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor &a, const Tensor &b)
  {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

private:
  static void validate_shape(const Shape &shape)
  {
    if (shape.empty())
    {
      throw DimensionError("tensor shape must have rank >= 1");
    }
    for (auto e : shape)
    {
      if (e == 0)
      {
        throw DimensionError("tensor extents must be >= 1, got " + shape_string(shape));
      }
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> index) const
  {
    if (index.size() != shape_.size())
    {
      throw DimensionError("index rank " + std::to_string(index.size()) +
                           " does not match tensor rank " + std::to_string(shape_.size()));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index)
    {
      if (i >= shape_[axis])
      {
        throw DimensionError("index out of range on axis " + std::to_string(axis));
      }
      flat = flat * shape_[axis] + i;
      ++axis;
    }
    return flat;
  }

  Shape          shape_;
  std::vector<T> data_;
};

}  // namespace deepclust
