#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "radloc/autodiff.hpp"

using namespace radloc;
namespace ad = radloc::ad;

namespace {

ad::Tensor rand_tensor(ad::Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ad::numel_of(s));
  for (double& x : v) x = u(rng);
  return ad::Tensor::from(std::move(s), std::move(v), true);
}

// Central-difference check of d f / d inputs.
void check_grad(const std::vector<ad::Tensor>& inputs, const std::function<ad::Tensor()>& f, double tol = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  ad::Tensor out = f();
  out.backward();
  const double h = 1e-5;
  for (auto& t : inputs) {
    auto g = t.grad();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      double keep = t.at(i);
      ad::Tensor handle = t;
      auto d = handle.mutable_data();
      double fp, fm;
      {
        ad::NoGradGuard ng;
        d[i] = keep + h;
        fp = f().item();
        d[i] = keep - h;
        fm = f().item();
      }
      d[i] = keep;
      double fd = (fp - fm) / (2 * h);
      EXPECT_NEAR(g[i], fd, tol * std::max(1.0, std::abs(fd))) << "element " << i;
    }
  }
}

}  // namespace

TEST(Autodiff, ElementwiseChain) {
  std::mt19937_64 rng(1);
  auto a = rand_tensor({5}, rng), b = rand_tensor({5}, rng, 0.5, 2.0);
  check_grad({a, b}, [&] {
    return ad::sum(ad::sigmoid(a) * ad::exp(b) / b + ad::square(a - b) + ad::sin(a) * ad::cos(b) +
                   ad::log_clamped(b, 1e-12));
  });
}

TEST(Autodiff, ScalarBroadcast) {
  std::mt19937_64 rng(2);
  auto a = rand_tensor({4}, rng), s = rand_tensor({1}, rng);
  check_grad({a, s}, [&] { return ad::sum(a * s + s / (ad::square(a) + 1.0)); });
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  auto x = ad::Tensor::scalar(3.0, true);
  auto y = x * x + x;
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Autodiff, NoGradGuardStopsRecording) {
  auto x = ad::Tensor::scalar(2.0, true);
  ad::Tensor y;
  {
    ad::NoGradGuard g;
    y = x * x;
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(ad::grad_enabled());
}

TEST(Autodiff, SmallLinalg) {
  std::mt19937_64 rng(3);
  auto a = rand_tensor({3, 3}, rng);
  auto spd = [&] { return ad::matmul(a, ad::transpose(a)) + ad::Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}); };
  check_grad({a}, [&] { return ad::det(spd()) + ad::sum(ad::inverse(spd())); }, 1e-5);
}

TEST(Autodiff, InverseValues) {
  auto m = ad::Tensor::from({2, 2}, {4, 7, 2, 6});
  auto inv = ad::inverse(m);
  EXPECT_NEAR(inv.at(0), 0.6, 1e-12);
  EXPECT_NEAR(inv.at(1), -0.7, 1e-12);
  EXPECT_NEAR(inv.at(2), -0.2, 1e-12);
  EXPECT_NEAR(inv.at(3), 0.4, 1e-12);
  EXPECT_NEAR(ad::det(m).item(), 10.0, 1e-12);
}

TEST(Autodiff, SoftminRowsSumsToOne) {
  std::mt19937_64 rng(4);
  auto x = rand_tensor({3, 6}, rng, -5, 5);
  auto p = ad::softmin_rows(x, 0.7);
  for (int r = 0; r < 3; ++r) {
    double s = 0;
    for (int c = 0; c < 6; ++c) s += p.at(r * 6 + c);
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
  std::vector<double> w{1, -2, 3, 0.5, -1, 2};
  check_grad({x}, [&] { return ad::sum(ad::square(ad::row_dot(ad::softmin_rows(x, 0.7), w))); });
}

TEST(Autodiff, AxisMarginalGradient) {
  std::mt19937_64 rng(5);
  auto v = rand_tensor({2, 2 * 3 * 2}, rng);
  check_grad({v}, [&] {
    return ad::sum(ad::square(ad::axis_marginal(v, 2, 3, 2, 0))) + ad::sum(ad::square(ad::axis_marginal(v, 2, 3, 2, 1))) +
           ad::sum(ad::square(ad::axis_marginal(v, 2, 3, 2, 2)));
  });
}

TEST(Autodiff, Conv2dMatchesDirectLoop) {
  std::mt19937_64 rng(6);
  auto x = rand_tensor({2, 3, 6, 5}, rng), w = rand_tensor({4, 3, 3, 3}, rng), b = rand_tensor({4}, rng);
  auto y = ad::conv2d(x, w, b, 2, 1);
  int oh = y.dim(2), ow = y.dim(3);
  ASSERT_EQ(oh, 3);
  ASSERT_EQ(ow, 3);
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
          double acc = b.at(o);
          for (int i = 0; i < 3; ++i)
            for (int kr = 0; kr < 3; ++kr)
              for (int kc = 0; kc < 3; ++kc) {
                int rr = r * 2 - 1 + kr, cc = c * 2 - 1 + kc;
                if (rr < 0 || rr >= 6 || cc < 0 || cc >= 5) continue;
                acc += w.at(((o * 3 + i) * 3 + kr) * 3 + kc) * x.at(((n * 3 + i) * 6 + rr) * 5 + cc);
              }
          EXPECT_NEAR(y.at(((n * 4 + o) * oh + r) * ow + c), acc, 1e-12);
        }
}

TEST(Autodiff, Conv2dGradient) {
  std::mt19937_64 rng(7);
  auto x = rand_tensor({2, 2, 5, 5}, rng), w = rand_tensor({3, 2, 3, 3}, rng), b = rand_tensor({3}, rng);
  check_grad({x, w, b}, [&] { return ad::sum(ad::square(ad::conv2d(x, w, b, 1, 1))); }, 1e-5);
}

TEST(Autodiff, PoolUpsampleConcatGradient) {
  std::mt19937_64 rng(8);
  auto x = rand_tensor({1, 2, 4, 4}, rng);
  check_grad({x}, [&] {
    auto p = ad::max_pool2x2(x);
    auto u = ad::upsample_nearest2x(p);
    return ad::sum(ad::square(ad::concat_channels(u, x)));
  });
}

TEST(Autodiff, BatchNormTrainingGradientAndStats) {
  std::mt19937_64 rng(9);
  auto x = rand_tensor({3, 2, 3, 3}, rng), g = rand_tensor({2}, rng, 0.5, 1.5), b = rand_tensor({2}, rng);
  std::vector<double> w(54);
  for (double& v : w) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  auto wt = ad::Tensor::from({3, 2, 3, 3}, w);
  check_grad({x, g, b}, [&] { return ad::sum(ad::batch_norm(x, g, b, nullptr, true) * wt); }, 1e-5);

  ad::BatchNormStats st{{0, 0}, {1, 1}};
  ad::batch_norm(x, g, b, &st, true, 0.1);
  double m0 = 0;
  for (int n = 0; n < 3; ++n)
    for (int i = 0; i < 9; ++i) m0 += x.at(n * 18 + i);
  EXPECT_NEAR(st.mean[0], 0.1 * m0 / 27, 1e-12);
}

TEST(Autodiff, BatchNormEvalUsesRunningStats) {
  auto x = ad::Tensor::from({1, 1, 1, 2}, {1.0, 3.0});
  ad::BatchNormStats st{{1.0}, {4.0}};
  auto y = ad::batch_norm(x, ad::Tensor::from({1}, {2.0}), ad::Tensor::from({1}, {0.5}), &st, false, 0.1, 0.0);
  EXPECT_NEAR(y.at(0), 0.5, 1e-12);
  EXPECT_NEAR(y.at(1), 2.5, 1e-12);
  EXPECT_EQ(st.mean[0], 1.0);
}

TEST(Autodiff, InstanceNormAndPatchOpsGradient) {
  std::mt19937_64 rng(10);
  auto a = rand_tensor({2, 1, 4, 4}, rng), b = rand_tensor({2, 3, 4, 4}, rng);
  check_grad({a, b}, [&] {
    auto d = ad::sub_broadcast_channels(ad::instance_norm(a), b);
    auto p = ad::patchify(d, 2);
    auto m = ad::group_mean(ad::mean_spatial(p), 4);
    return ad::sum(ad::square(m));
  }, 1e-5);
}

TEST(Autodiff, PatchifyLayout) {
  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[i] = i;
  auto p = ad::patchify(ad::Tensor::from({1, 1, 4, 4}, v), 2);
  ASSERT_EQ(p.shape(), (ad::Shape{4, 1, 2, 2}));
  // patch 1 = top-right block
  EXPECT_EQ(p.at(4), 2);
  EXPECT_EQ(p.at(5), 3);
  EXPECT_EQ(p.at(6), 6);
  EXPECT_EQ(p.at(7), 7);
}

TEST(Autodiff, ResampleGradient) {
  std::mt19937_64 rng(11);
  auto x = rand_tensor({2, 1, 3, 3}, rng);
  auto plan = std::make_shared<ad::ResamplePlan>();
  plan->channels = 2;
  plan->height = 3;
  plan->width = 3;
  std::uniform_int_distribution<int> src(-1, 8);
  std::uniform_real_distribution<double> w(0, 0.5);
  for (int i = 0; i < 2 * 9 * 4; ++i) {
    plan->src.push_back(src(rng));
    plan->wts.push_back(w(rng));
  }
  check_grad({x}, [&] { return ad::sum(ad::square(ad::resample(x, plan))); });
}

TEST(Autodiff, StackIndexRowsGradient) {
  std::mt19937_64 rng(12);
  auto x = rand_tensor({3, 2}, rng);
  check_grad({x}, [&] {
    auto s = ad::stack({ad::index(x, 0), ad::index(x, 5), ad::index(x, 3)}, {3});
    auto r = ad::concat_rows({ad::slice_rows(x, 2, 3), ad::slice_rows(x, 0, 1)});
    return ad::sum(ad::square(s)) + ad::sum(ad::relu(r) * r) + ad::sum(ad::clamp_min(x, 0.1));
  });
}

TEST(Autodiff, WrapAngleValue) {
  auto a = ad::wrap_angle(ad::Tensor::from({2}, {4.0, -4.0}));
  EXPECT_NEAR(a.at(0), 4.0 - 2 * std::numbers::pi, 1e-12);
  EXPECT_NEAR(a.at(1), -4.0 + 2 * std::numbers::pi, 1e-12);
}
