#include <doctest.h>

#include <cstring>
#include <sstream>

#include "medix/rng.hpp"
#include "medix/tensor.hpp"

using namespace medix;

TEST_SUITE("tensor") {

TEST_CASE("shape bookkeeping") {
  Tensor<double> t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  CHECK(t.dim(1) == 3);
  for (Index i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0);

  CHECK_THROWS_AS(Tensor<double>::from({2, 2}, {1.0, 2.0, 3.0}), Error);
  CHECK_THROWS_AS(Tensor<double>({2, -1}), Error);

  // zero-extent tensors are allowed (empty concat operands)
  Tensor<double> empty({0});
  CHECK(empty.size() == 0);
}

TEST_CASE("indexing is row-major") {
  auto t = Tensor<double>::from({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(t(0, 0, 0) == 0);
  CHECK(t(0, 0, 1) == 1);
  CHECK(t(0, 1, 0) == 2);
  CHECK(t(1, 0, 0) == 4);
  CHECK(t(1, 1, 1) == 7);
}

TEST_CASE("matrix view shares the buffer") {
  auto t = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto m = t.matrix();
  CHECK(m(0, 2) == 3);
  CHECK(m(1, 0) == 4);
  m(1, 0) = 9;
  CHECK(t(1, 0) == 9);
}

TEST_CASE("reshape and cast") {
  auto t = Tensor<float>::from({4}, {1.5f, 2.5f, 3.5f, 4.5f});
  auto r = t.reshaped({2, 2});
  CHECK(r(1, 1) == 4.5f);
  CHECK_THROWS_AS(t.reshaped({3}), Error);
  auto d = t.cast<double>();
  CHECK(d[2] == doctest::Approx(3.5));
}

TEST_CASE("finite detection") {
  auto t = Tensor<double>::from({2}, {1.0, 2.0});
  CHECK(t.all_finite());
  t[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(ensure_finite(t, "test"), Error);
}

TEST_CASE("dmtx header layout is exact") {
  auto t = Tensor<float>::from({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  const std::string bytes = dmtx_bytes(t);
  // magic, version=1, dtype=0 (f32), rank=2, dims 2,2 as u32 LE, 16-byte payload
  REQUIRE(bytes.size() == 4 + 1 + 1 + 1 + 8 + 16);
  CHECK(bytes.substr(0, 4) == "DMTX");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 2);
  const unsigned char* dims = reinterpret_cast<const unsigned char*>(bytes.data() + 7);
  CHECK(dims[0] == 2);
  CHECK(dims[1] == 0);
  CHECK(dims[4] == 2);
  float first;
  std::memcpy(&first, bytes.data() + 15, 4);
  CHECK(first == 1.0f);
}

TEST_CASE("dmtx round trip, both precisions") {
  Rng rng(11);
  Tensor<double> t({3, 5});
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal();

  std::ostringstream os(std::ios::binary);
  write_dmtx(os, t);
  std::istringstream is(os.str(), std::ios::binary);
  auto back = read_dmtx<double>(is);
  REQUIRE(back.shape() == t.shape());
  for (Index i = 0; i < t.size(); ++i) CHECK(back[i] == t[i]);

  // f64 file read as f32 converts
  std::istringstream is2(os.str(), std::ios::binary);
  auto f = read_dmtx<float>(is2);
  CHECK(f[0] == doctest::Approx(static_cast<float>(t[0])));
}

TEST_CASE("dmtx rejects malformed streams") {
  std::istringstream bad("XXXX", std::ios::binary);
  CHECK_THROWS_AS(read_dmtx<double>(bad), Error);

  auto t = Tensor<double>::from({2}, {1, 2});
  std::string bytes = dmtx_bytes(t);
  std::istringstream truncated(bytes.substr(0, bytes.size() - 4), std::ios::binary);
  CHECK_THROWS_AS(read_dmtx<double>(truncated), Error);
}

TEST_CASE("rng streams are deterministic and label-split") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());

  Rng c(42);
  Rng s1 = c.split("alpha"), s2 = c.split("beta"), s1again = c.split("alpha");
  CHECK(s1.next() == s1again.next());
  Rng s1b = c.split("alpha"), s2b = c.split("beta");
  bool all_equal = true;
  for (int i = 0; i < 16; ++i)
    if (s1b.next() != s2b.next()) all_equal = false;
  CHECK_FALSE(all_equal);

  CHECK(c.split("x", 3).next() == Rng(c.stream_seed("x", 3)).next());
}

TEST_CASE("rng uniform range and shuffle determinism") {
  Rng r(5);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  std::vector<int> v1{1, 2, 3, 4, 5, 6, 7}, v2 = v1;
  Rng ra(9), rb(9);
  shuffle(v1, ra);
  shuffle(v2, rb);
  CHECK(v1 == v2);
}

TEST_CASE("rng normal moments are sane") {
  Rng r(17);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(sq / n == doctest::Approx(1.0).epsilon(0.05));
}

}  // TEST_SUITE
