#include <cmath>
#include <sstream>

#include "doctest.h"
#include "condvid/attention/attention.hpp"
#include "condvid/numerics/rng.hpp"

using namespace condvid;

namespace {

using Vec = std::vector<std::size_t>;

// Naive attention over explicitly concatenated frames, long double throughout.
Tensor<double> brute_force(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                           const FrameSamplingPlan& plan, std::size_t heads) {
  const std::size_t F = q.dim(0), S = q.dim(1), d = q.dim(2), dh = d / heads;
  Tensor<double> out(q.dims());
  for (std::size_t i = 0; i < F; ++i) {
    const auto kv = plan.kv_indices(i);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t r = 0; r < S; ++r) {
        std::vector<long double> score;
        for (std::size_t f : kv)
          for (std::size_t c = 0; c < S; ++c) {
            long double acc = 0;
            for (std::size_t e = h * dh; e < (h + 1) * dh; ++e) acc += (long double)q[(i * S + r) * d + e] * k[(f * S + c) * d + e];
            score.push_back(acc / std::sqrt((long double)dh));
          }
        long double mx = score[0], z = 0;
        for (auto s : score) mx = std::max(mx, s);
        for (auto& s : score) z += (s = std::exp(s - mx));
        for (std::size_t e = h * dh; e < (h + 1) * dh; ++e) {
          long double acc = 0;
          std::size_t col = 0;
          for (std::size_t f : kv)
            for (std::size_t c = 0; c < S; ++c) acc += score[col++] / z * v[(f * S + c) * d + e];
          out[(i * S + r) * d + e] = static_cast<double>(acc);
        }
      }
  }
  return out;
}

const std::vector<AttentionMode> kModes{AttentionMode::self, AttentionMode::sparse_causal, AttentionMode::sbist,
                                        AttentionMode::dense};

}  // namespace

TEST_CASE("sbist frame indices") {
  CHECK(sbist_frame_indices(24, 3) == Vec{0, 3, 6, 9, 12, 15, 18, 21});
  CHECK(sbist_frame_indices(1, 3) == Vec{0});
  CHECK(sbist_frame_indices(5, 3) == Vec{0, 3});
  CHECK(sbist_frame_indices(4, 3) == Vec{0, 3});
  CHECK(sbist_frame_indices(3, 3) == Vec{0});
  CHECK_THROWS_AS(sbist_frame_indices(4, 0), std::invalid_argument);
  CHECK_THROWS_AS(sbist_frame_indices(0, 3), std::invalid_argument);
  for (std::size_t F = 1; F <= 100; ++F)
    for (std::size_t gap = 1; gap <= 7; ++gap) {
      const auto idx = sbist_frame_indices(F, gap);
      CHECK(idx.size() == (F + gap - 1) / gap);
      CHECK(idx.back() < F);
      CHECK(idx.back() + gap >= F);
    }
}

TEST_CASE("kv index sets per mode") {
  const FrameSamplingPlan sc(AttentionMode::sparse_causal, 6);
  CHECK(sc.kv_indices(0) == Vec{0, 0});
  CHECK(sc.kv_indices(1) == Vec{0, 0});
  CHECK(sc.kv_indices(5) == Vec{0, 4});
  CHECK(FrameSamplingPlan(AttentionMode::self, 6).kv_indices(4) == Vec{4});
  CHECK(FrameSamplingPlan(AttentionMode::dense, 3).kv_indices(2) == Vec{0, 1, 2});
  const FrameSamplingPlan sb(AttentionMode::sbist, 7);
  for (std::size_t i = 0; i < 7; ++i) CHECK(sb.kv_indices(i) == Vec{0, 3, 6});
  CHECK_THROWS_AS((void)sb.kv_indices(7), std::out_of_range);
  CHECK_THROWS_AS(FrameSamplingPlan(AttentionMode::dense, 0), std::invalid_argument);
  CHECK(sb.with_frames(24).kv_frames() == 8);
}

TEST_CASE("mode names round trip") {
  for (auto m : kModes) CHECK(parse_attention_mode(to_string(m)) == m);
  CHECK(parse_attention_mode("no-temporal") == AttentionMode::self);
  CHECK(parse_attention_mode("sparse-causal") == AttentionMode::sparse_causal);
  CHECK_THROWS_AS(parse_attention_mode("full"), std::invalid_argument);
}

TEST_CASE("attend_frames matches the concatenation oracle on random cases") {
  SeededRng rng(11);
  int cases = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t F = 1 + rng.below(6), S = 1 + rng.below(3), heads = 1 + rng.below(2);
    const std::size_t d = heads * (1 + rng.below(4 / heads));
    const std::size_t gap = 1 + rng.below(4);
    const auto q = gaussian_noise<double>({F, S, d}, rng);
    const auto k = gaussian_noise<double>({F, S, d}, rng);
    const auto v = gaussian_noise<double>({F, S, d}, rng);
    for (auto mode : kModes) {
      const FrameSamplingPlan plan(mode, F, gap);
      CHECK(max_abs_diff(attend_frames(q, k, v, plan, heads), brute_force(q, k, v, plan, heads)) < 1e-6);
      ++cases;
    }
  }
  CHECK(cases >= 100);
}

TEST_CASE("a single frame makes every mode plain self-attention") {
  SeededRng rng(12);
  const auto q = gaussian_noise<double>({1, 9, 4}, rng);
  const auto k = gaussian_noise<double>({1, 9, 4}, rng);
  const auto v = gaussian_noise<double>({1, 9, 4}, rng);
  const auto ref = attend_frames(q, k, v, FrameSamplingPlan(AttentionMode::self, 1));
  for (auto mode : kModes) CHECK(max_abs_diff(attend_frames(q, k, v, FrameSamplingPlan(mode, 1)), ref) < 1e-6);
}

TEST_CASE("identical frames: duplicated keys leave attention unchanged") {
  SeededRng rng(13);
  const auto frame = gaussian_noise<double>({6, 4}, rng);
  AttentionWeights<double> w{gaussian_noise<double>({4, 4}, rng), gaussian_noise<double>({4, 4}, rng),
                             gaussian_noise<double>({4, 4}, rng)};
  const auto single = temporal_attention(repeat_leading(frame, 1), w, FrameSamplingPlan(AttentionMode::self, 1));
  for (auto mode : kModes)
    for (std::size_t F : {2, 5, 7}) {
      const auto out = temporal_attention(repeat_leading(frame, F), w, FrameSamplingPlan(mode, F));
      for (std::size_t f = 0; f < F; ++f) {
        double err = 0;
        for (std::size_t e = 0; e < single.size(); ++e) err = std::max(err, std::abs(out.slice(f)[e] - single[e]));
        CHECK(err < 1e-6);
      }
    }
}

TEST_CASE("gap 1 equals dense, and key frame order does not matter") {
  SeededRng rng(14);
  const auto q = gaussian_noise<double>({5, 3, 4}, rng);
  const auto k = gaussian_noise<double>({5, 3, 4}, rng);
  const auto v = gaussian_noise<double>({5, 3, 4}, rng);
  const auto dense = attend_frames(q, k, v, FrameSamplingPlan(AttentionMode::dense, 5));
  CHECK(max_abs_diff(attend_frames(q, k, v, FrameSamplingPlan(AttentionMode::sbist, 5, 1)), dense) < 1e-12);

  // Permuting frames 1..4 of k and v together permutes the dense key set
  // for query frame 0 without changing it.
  Tensor<double> kp = k, vp = v;
  const std::vector<std::size_t> perm{0, 3, 1, 4, 2};
  for (std::size_t f = 0; f < 5; ++f) {
    std::copy(k.slice(perm[f]).begin(), k.slice(perm[f]).end(), kp.slice(f).begin());
    std::copy(v.slice(perm[f]).begin(), v.slice(perm[f]).end(), vp.slice(f).begin());
  }
  const auto permuted = attend_frames(q, kp, vp, FrameSamplingPlan(AttentionMode::dense, 5));
  CHECK(max_abs_diff(permuted, dense) < 1e-12);
}

TEST_CASE("attention shape errors") {
  const Tensor<double> a({2, 3, 4}), b({2, 3, 5}), c({3, 3, 4});
  const FrameSamplingPlan plan(AttentionMode::dense, 2);
  CHECK_THROWS_AS(attend_frames(a, b, a, plan), std::invalid_argument);
  CHECK_THROWS_AS(attend_frames(c, c, c, plan), std::invalid_argument);
  CHECK_THROWS_AS(attend_frames(a, a, a, plan, 3), std::invalid_argument);
  CHECK_THROWS_AS(attend_frames(Tensor<double>({2, 12}), Tensor<double>({2, 12}), Tensor<double>({2, 12}), plan),
                  std::invalid_argument);
}

TEST_CASE("attention backward matches central differences") {
  SeededRng rng(15);
  for (auto mode : kModes)
    for (std::size_t heads : {1, 2}) {
      const std::size_t F = 5, S = 3, d = 4;
      const FrameSamplingPlan plan(mode, F, 2);
      auto q = gaussian_noise<double>({F, S, d}, rng);
      auto k = gaussian_noise<double>({F, S, d}, rng);
      auto v = gaussian_noise<double>({F, S, d}, rng);
      const auto g = gaussian_noise<double>({F, S, d}, rng);
      auto loss = [&] {
        const auto o = attend_frames(q, k, v, plan, heads);
        double acc = 0;
        for (std::size_t e = 0; e < o.size(); ++e) acc += o[e] * g[e];
        return acc;
      };
      AttentionCache<double> cache;
      (void)attend_frames(q, k, v, plan, heads, &cache);
      Tensor<double> dq(q.dims()), dk(q.dims()), dv(q.dims());
      attend_frames_backward(g, q, k, v, plan, heads, cache, dq, dk, dv);
      for (auto [x, dx] : {std::pair{&q, &dq}, {&k, &dk}, {&v, &dv}}) {
        double worst = 0;
        for (std::size_t e = 0; e < x->size(); ++e) {
          const double keep = (*x)[e], h = 1e-5;
          (*x)[e] = keep + h;
          const double up = loss();
          (*x)[e] = keep - h;
          const double down = loss();
          (*x)[e] = keep;
          const double num = (up - down) / (2 * h);
          worst = std::max(worst, std::abs(num - (*dx)[e]) / std::max(1.0, std::abs(num)));
        }
        CHECK(worst < 1e-7);
      }
    }
}

TEST_CASE("float path tracks the double path") {
  SeededRng rng(16);
  const auto q = gaussian_noise<double>({4, 70, 8}, rng);
  const auto k = gaussian_noise<double>({4, 70, 8}, rng);
  const auto v = gaussian_noise<double>({4, 70, 8}, rng);
  const FrameSamplingPlan plan(AttentionMode::sbist, 4);
  const auto ref = attend_frames(q, k, v, plan, 2);
  const auto f = attend_frames(q.cast<float>(), k.cast<float>(), v.cast<float>(), plan, 2);
  CHECK(max_abs_diff(f.cast<double>(), ref) < 1e-5);
}

TEST_CASE("cost accounts") {
  const auto dense = cost_account(FrameSamplingPlan(AttentionMode::dense, 24), 4096, 64);
  const auto sbist = cost_account(FrameSamplingPlan(AttentionMode::sbist, 24), 4096, 64);
  const auto sc = cost_account(FrameSamplingPlan(AttentionMode::sparse_causal, 24), 4096, 64);
  const auto self = cost_account(FrameSamplingPlan(AttentionMode::self, 24), 4096, 64);
  CHECK(dense.kv_frames == 24);
  CHECK(sbist.kv_frames == 8);
  CHECK(sc.kv_frames == 2);
  CHECK(self.kv_frames == 1);
  CHECK(dense.score_flops == 24.0 * 4096 * 24 * 4096 * 64 * 2);
  CHECK(dense.score_flops / sbist.score_flops == 3.0);
  CHECK(self.score_flops < sc.score_flops);
  CHECK(sc.score_flops < sbist.score_flops);
  CHECK(sbist.score_flops < dense.score_flops);
  CHECK(sbist.wall_time_s < 0);
}

TEST_CASE("benchmark rows and CSV layout") {
  const auto rows = benchmark_attention(kModes, 4, 4, 4, 8, 2, 1);
  REQUIRE(rows.size() == 8);
  CHECK(rows[2].mode == AttentionMode::sbist);
  CHECK(rows[2].kv_frames == 2);
  for (const auto& r : rows) CHECK(r.wall_time_s >= 0);
  std::ostringstream os;
  write_cost_csv(os, {cost_account(FrameSamplingPlan(AttentionMode::sbist, 24), 16, 8)});
  CHECK(os.str() == "mode,F,S,d,kv_frames,score_flops,wall_time_s\nsbist,24,16,8,8,786432,-1\n");
}
