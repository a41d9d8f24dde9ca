#include <cmath>

#include "doctest.h"
#include "slmt/model.hpp"
#include "slmt/objectives.hpp"
#include "support.hpp"

using namespace slmt;

namespace {

constexpr std::size_t kVocab = 13;

TokenMatrix tokens(const std::vector<std::vector<std::int32_t>>& rows) { return TokenMatrix::from_rows(rows, 0); }

std::vector<double> row_slice(const ad::Tensor<double>& t, std::size_t b, std::size_t pos) {
  const std::size_t len = t.dim(1), width = t.dim(2);
  const auto* p = t.data().data() + (b * len + pos) * width;
  return {p, p + width};
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("sinusoidal position table follows the sin/cos interleaving") {
  const auto table = sinusoidal_positions<double>(5, 6);
  CHECK(table[0] == 0.0);
  CHECK(table[1] == 1.0);
  CHECK(table[3 * 6 + 2] == doctest::Approx(std::sin(3.0 / std::pow(10000.0, 2.0 / 6.0))).epsilon(1e-12));
  CHECK(table[3 * 6 + 5] == doctest::Approx(std::cos(3.0 / std::pow(10000.0, 4.0 / 6.0))).epsilon(1e-12));
}

TEST_CASE("decoder is causal") {
  for (bool ling : {false, true}) {
    TranslationModel<double> model(testing::tiny_config(kVocab, false, false, ling), 3);
    const auto src = tokens({{2, 5, 6, 7}});
    auto a = model.forward(src, tokens({{3, 8, 9, 10, 11}}), {});
    auto b = model.forward(src, tokens({{3, 8, 9, 12, 5}}), {});
    for (std::size_t pos = 0; pos < 3; ++pos) {
      CHECK(max_abs_diff(row_slice(a.logits, 0, pos), row_slice(b.logits, 0, pos)) == 0.0);
    }
    CHECK(max_abs_diff(row_slice(a.logits, 0, 3), row_slice(b.logits, 0, 3)) > 1e-6);
  }
}

TEST_CASE("padding does not change the real positions") {
  for (bool dis : {false, true}) {
    TranslationModel<double> model(testing::tiny_config(kVocab, dis, false, true), 4);
    auto alone = model.forward(tokens({{2, 5, 6}}), tokens({{3, 8}}), {});
    auto padded = model.forward(tokens({{2, 5, 6}, {2, 7, 8, 9, 10, 11}}), tokens({{3, 8}, {3, 9, 10, 11}}), {});
    for (std::size_t pos = 0; pos < 2; ++pos) {
      CHECK(max_abs_diff(row_slice(alone.logits, 0, pos), row_slice(padded.logits, 0, pos)) < 1e-12);
    }
    for (std::size_t pos = 0; pos < 3; ++pos) {
      CHECK(max_abs_diff(row_slice(alone.source.memory, 0, pos), row_slice(padded.source.memory, 0, pos)) < 1e-12);
    }
  }
}

TEST_CASE("incremental decoding matches the teacher-forced pass") {
  struct Variant {
    bool dis, ling;
  };
  for (auto v : {Variant{false, false}, Variant{true, false}, Variant{false, true}, Variant{true, true}}) {
    CAPTURE(v.dis);
    CAPTURE(v.ling);
    auto cfg = testing::tiny_config(kVocab, v.dis, v.dis, v.ling);
    TranslationModel<float> model(cfg, 5);
    const auto src = tokens({{2, 5, 6, 7}, {3, 9, 10}});
    const std::vector<std::vector<std::int32_t>> dec{{4, 8, 9, 11, 12}, {4, 12, 5, 5, 6}};
    auto full = model.forward(src, tokens(dec), {});
    auto state = model.begin_decode(src);
    for (std::size_t pos = 0; pos < dec[0].size(); ++pos) {
      const std::vector<std::int32_t> ids{dec[0][pos], dec[1][pos]};
      auto logits = model.step(state, ids);
      for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t k = 0; k < kVocab; ++k) {
          const float teacher = full.logits.data()[(b * dec[0].size() + pos) * kVocab + k];
          CHECK(std::abs(logits.data()[b * kVocab + k] - teacher) <= 1e-5f);
        }
      }
    }
  }
}

TEST_CASE("beam reordering keeps the cached rows aligned") {
  TranslationModel<double> model(testing::tiny_config(kVocab, true, true, true), 6);
  const auto src = tokens({{2, 5, 6, 7}});
  auto state = model.begin_decode(src);
  const std::vector<std::int32_t> first{4};
  model.step(state, first);
  const std::vector<std::size_t> dup{0, 0};
  model.reorder(state, dup);
  const std::vector<std::int32_t> second{8, 9};
  auto logits = model.step(state, second);
  auto ref8 = model.forward(src, tokens({{4, 8}}), {});
  auto ref9 = model.forward(src, tokens({{4, 9}}), {});
  for (std::size_t k = 0; k < kVocab; ++k) {
    CHECK(logits.data()[k] == doctest::Approx(ref8.logits.data()[kVocab + k]).epsilon(1e-10));
    CHECK(logits.data()[kVocab + k] == doctest::Approx(ref9.logits.data()[kVocab + k]).epsilon(1e-10));
  }
}

TEST_CASE("cross-entropy gradient through the whole model matches finite differences") {
  for (std::uint64_t seed : {1, 2, 3}) {
    TranslationModel<double> model(testing::tiny_config(kVocab, true, false, true), seed);
    const auto src = tokens({{2, 5, 6, 7}, {3, 9, 10}});
    const auto dec = tokens({{4, 8, 9, 11}, {4, 12, 5}});
    const auto gold = tokens({{8, 9, 11, 1}, {12, 5, 1}});
    auto loss = [&] { return objectives::cross_entropy(model.forward(src, dec, {}).logits, gold, 0.1); };
    const auto r = testing::fd_check_parameters(model.params(), loss, 3, seed);
    INFO("worst coordinate " << r.worst);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("toggled-off components own no parameters") {
  TranslationModel<float> plain(testing::tiny_config(kVocab, false, false, false), 1);
  TranslationModel<float> full(testing::tiny_config(kVocab, true, true, true), 1);
  for (const auto& [name, _] : plain.params()) {
    CHECK(name.rfind("disentangler.", 0) != 0);
    CHECK(name.rfind("lingenc.", 0) != 0);
    CHECK(name.rfind("fusion.", 0) != 0);
  }
  CHECK(full.params().size() > plain.params().size());
  for (const auto& [name, t] : plain.params()) {
    const auto& other = full.params().at(name);
    REQUIRE(other.shape() == t.shape());
    CHECK(std::equal(t.data().begin(), t.data().end(), other.data().begin()));
  }
}

TEST_CASE("out-of-range ids and over-long inputs are rejected") {
  TranslationModel<float> model(testing::tiny_config(kVocab, false, false, false), 1);
  CHECK_THROWS(model.forward(tokens({{2, 99}}), tokens({{3}}), {}));
  std::vector<std::int32_t> too_long(30, 5);
  CHECK_THROWS(model.forward(tokens({too_long}), tokens({{3}}), {}));
}
