#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <string>

#include "connloss/embstore.hpp"
#include "connloss/error.hpp"

namespace testutil {

/// Fresh per-test scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = std::filesystem::temp_directory_path() / "connloss_tests" /
             (std::string(info->test_suite_name()) + "." + info->name());
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline connloss::EmbeddingSet random_set(std::size_t n, std::uint32_t m1, std::uint32_t m2, std::size_t d_pre,
                                         std::size_t s_post, std::size_t d_post, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  connloss::EmbeddingSet set;
  set.grid = {m1, m2};
  set.pre = connloss::SequenceTensor(n, std::size_t(m1) * m2, d_pre);
  set.post = connloss::SequenceTensor(n, s_post, d_post);
  for (auto& v : set.pre.values) v = g(rng);
  for (auto& v : set.post.values) v = g(rng);
  for (std::size_t i = 0; i < n; ++i) set.ids.push_back("img" + std::to_string(1000 + i));
  return set;
}

template <typename Fn>
connloss::ErrorKind error_kind_of(Fn&& fn) {
  try {
    fn();
  } catch (const connloss::Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected connloss::Error";
  return connloss::ErrorKind::io;
}

template <typename Fn>
std::string error_message_of(Fn&& fn) {
  try {
    fn();
  } catch (const connloss::Error& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected connloss::Error";
  return {};
}

}  // namespace testutil
