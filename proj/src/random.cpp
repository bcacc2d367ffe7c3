#include "diti/random.hpp"

namespace diti {

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view component) {
  return splitmix64(root ^ fnv1a64(component));
}

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
  return splitmix64(splitmix64(root) + index);
}

Tensor Rng::gaussian_tensor(Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_values()) v = static_cast<float>(gaussian());
  return t;
}

Tensor Rng::uniform_tensor(Shape shape, float lo, float hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_values()) v = lo + (hi - lo) * static_cast<float>(uniform());
  return t;
}

}  // namespace diti
