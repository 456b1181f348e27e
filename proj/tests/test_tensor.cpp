#include "doctest.h"

#include <stdexcept>

#include "fgsd/rng.h"
#include "fgsd/tensor.h"

using fgsd::Rng;
using fgsd::Shape;
using fgsd::Tensor;
using fgsd::TensorF;

TEST_CASE("construction, numel, zero init") {
  Tensor t({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.rank() == 3);
  for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0);
  CHECK(Tensor::full({2, 2}, 1.5)[3] == 1.5);
}

TEST_CASE("row-major indexing convention") {
  Tensor t({2, 3, 4, 5});
  t.at(1, 2, 3, 4) = 9.0;
  CHECK(t[((1 * 3 + 2) * 4 + 3) * 5 + 4] == 9.0);
  Tensor v({3, 7});
  v.at(2, 5) = 4.0;
  CHECK(v[2 * 7 + 5] == 4.0);
}

TEST_CASE("from_data validates element count") {
  auto t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(t.at(1, 1) == 4.0);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), std::invalid_argument);
}

TEST_CASE("reshape preserves data, rejects bad products") {
  auto t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = t.reshaped({3, 2});
  CHECK(r.at(2, 1) == 6.0);
  CHECK_THROWS_AS(t.reshaped({4, 2}), std::invalid_argument);
}

TEST_CASE("matrix view writes through to the buffer") {
  Tensor t({2, 3});
  t.mat()(1, 2) = 7.0;
  CHECK(t[5] == 7.0);
  // flat view with explicit dims over a rank-4 tensor
  Tensor u({2, 2, 2, 2});
  u.mat(4, 4)(3, 3) = 2.0;
  CHECK(u[15] == 2.0);
  CHECK_THROWS_AS(t.mat(4, 2), std::invalid_argument);
}

TEST_CASE("randn is seed-deterministic") {
  Rng r1(5), r2(5);
  auto a = Tensor::randn({3, 3}, r1);
  auto b = Tensor::randn({3, 3}, r2);
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("cast to f32 and back") {
  Rng rng(6);
  auto a = Tensor::randn({4}, rng);
  TensorF f = a.cast<float>();
  Tensor back = f.cast<double>();
  for (std::int64_t i = 0; i < a.numel(); ++i)
    CHECK(back[i] == doctest::Approx(a[i]).epsilon(1e-6));
}

TEST_CASE("negative dimension rejected") {
  CHECK_THROWS_AS(Tensor({2, -1}), std::invalid_argument);
}
