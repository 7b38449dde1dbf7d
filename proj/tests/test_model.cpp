#include <algorithm>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fdmix/gradcheck.hpp"
#include "fdmix/model.hpp"

using namespace fdmix;

namespace {

ModelConfig micro_config() {
  ModelConfig mc;
  mc.image_hw = 16;
  mc.num_classes = 4;
  mc.channels = {2, 3, 3, 4};
  mc.feat_dim = 8;
  mc.mid_dim = 6;
  mc.latent_dim = 4;
  return mc;
}

Tensor rand_images(int b, int hw, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(b) * 3 * hw * hw);
  for (auto& x : v) x = rng.uniform();
  return Tensor::from({b, 3, hw, hw}, std::move(v));
}

}  // namespace

TEST_CASE("identical images give identical feature rows in eval mode") {
  Rng rng(1);
  Model model(micro_config(), rng);
  model.set_mode(Mode::Eval);
  Tensor one = rand_images(1, 16, rng);
  std::vector<double> two = one.data();
  two.insert(two.end(), one.data().begin(), one.data().end());
  Tensor batch = Tensor::from({2, 3, 16, 16}, std::move(two));
  Tensor f = model.extract(batch);
  REQUIRE(f.shape() == Shape{2, 8});
  for (int c = 0; c < 8; ++c) {
    CHECK(f.data()[c] == f.data()[8 + c]);
  }
}

TEST_CASE("feature dim follows the configured width and zero images stay finite") {
  Rng rng(2);
  ModelConfig mc;
  mc.image_hw = 32;
  mc.num_classes = 5;
  Model model(mc, rng);
  model.set_mode(Mode::Eval);
  Tensor f = model.extract(Tensor::zeros({2, 3, 32, 32}));
  CHECK(f.shape() == Shape{2, 512});
  for (double v : f.data()) CHECK(std::isfinite(v));
}

TEST_CASE("wrong channel count is rejected") {
  Rng rng(3);
  Model model(micro_config(), rng);
  CHECK_THROWS_AS(model.extract(Tensor::zeros({1, 1, 16, 16})), std::invalid_argument);
}

TEST_CASE("disentangle returns the means in eval mode and matches zero-noise training") {
  Rng rng(4);
  Model model(micro_config(), rng);
  Tensor images = rand_images(3, 16, rng);

  model.set_mode(Mode::Eval);
  DisentangledFeatures eval_out = model.disentangle(model.extract(images));
  CHECK(eval_out.h1.data() == eval_out.mean_a.data());
  CHECK(eval_out.h2.data() == eval_out.mean_b.data());
  CHECK(eval_out.h1.shape() == Shape{3, 4});
  CHECK(eval_out.h2.shape() == Shape{3, 4});

  // training with zero noise only differs through BN batch statistics, so
  // compare the reparameterization directly: H = mean + exp(0.5 devia) * 0
  model.set_mode(Mode::Train);
  Tensor zero = Tensor::zeros({3, 4});
  DisentangledFeatures train_out = model.disentangle(model.extract(images), &zero, &zero);
  CHECK(train_out.h1.data() == train_out.mean_a.data());
}

TEST_CASE("training mode without noise tensors is rejected") {
  Rng rng(5);
  Model model(micro_config(), rng);
  model.set_mode(Mode::Train);
  Tensor f = model.extract(rand_images(2, 16, rng));
  CHECK_THROWS_AS(model.disentangle(f), std::invalid_argument);
}

TEST_CASE("unit noise with zero log-variance shifts the mean by exactly one") {
  // zero the devia heads so exp(0.5 * 0) = 1
  Rng rng(6);
  Model model(micro_config(), rng);
  for (const char* name : {"h/fc22a.w", "h/fc22a.b", "h/fc22b.w", "h/fc22b.b"}) {
    auto& data = model.params_h().at(name).mutable_data();
    std::fill(data.begin(), data.end(), 0.0);
  }
  model.set_mode(Mode::Train);
  Tensor f = model.extract(rand_images(2, 16, rng));
  Tensor ones = Tensor::full({2, 4}, 1.0);
  DisentangledFeatures out = model.disentangle(f, &ones, &ones);
  for (int i = 0; i < 8; ++i) {
    CHECK(out.h1.data()[i] == doctest::Approx(out.mean_a.data()[i] + 1.0).epsilon(1e-12));
  }
}

TEST_CASE("classifier head shapes") {
  Rng rng(7);
  Model model(micro_config(), rng);
  model.set_mode(Mode::Eval);
  DisentangledFeatures d = model.disentangle(model.extract(rand_images(1, 16, rng)));
  CHECK(model.classify_fc(d.h1).shape() == Shape{1, 4});
  CHECK(model.domain_logits(d.h1).shape() == Shape{1, 2});
}

TEST_CASE("prototype logits: an exact support match wins, ties give uniform softmax") {
  Rng rng(8);
  Model model(micro_config(), rng);
  Tensor support = Tensor::from({2, 3}, {0.0, 0.0, 0.0, 1.0, 1.0, 1.0});
  Tensor query = Tensor::from({1, 3}, {0.0, 0.0, 0.0});
  Tensor logits = model.fsl_logits(support, {0, 1}, 2, query);
  CHECK(logits.data()[0] > logits.data()[1]);
  CHECK(logits.data()[0] == doctest::Approx(0.0));  // distance zero

  Tensor tied_support = Tensor::from({2, 3}, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
  Tensor tied = model.fsl_logits(tied_support, {0, 1}, 2, query);
  CHECK(tied.data()[0] == doctest::Approx(tied.data()[1]).epsilon(1e-12));
}

TEST_CASE("2-way toy: query at the origin goes to the class whose prototype is the origin") {
  Rng rng(9);
  Model model(micro_config(), rng);
  Tensor support = Tensor::from({2, 4}, {0, 0, 0, 0, 1, 1, 1, 1});
  Tensor query = Tensor::zeros({1, 4});
  const std::vector<int> pred = argmax_rows(model.fsl_logits(support, {0, 1}, 2, query));
  CHECK(pred[0] == 0);
}

TEST_CASE("prototype head ignores support ordering within a class") {
  Rng rng(10);
  Model model(micro_config(), rng);
  std::vector<double> s(6 * 4);
  for (auto& v : s) v = rng.uniform(-1.0, 1.0);
  Tensor support = Tensor::from({6, 4}, s);
  // swap the two support rows of class 1 (rows 2 and 3)
  std::vector<double> swapped = s;
  for (int c = 0; c < 4; ++c) std::swap(swapped[2 * 4 + c], swapped[3 * 4 + c]);
  Tensor support2 = Tensor::from({6, 4}, std::move(swapped));
  Tensor query = Tensor::from({2, 4}, {0.1, -0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.8});
  const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  Tensor a = model.fsl_logits(support, labels, 3, query);
  Tensor b = model.fsl_logits(support2, labels, 3, query);
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("graph propagation head pulls a query toward its class neighborhood") {
  Rng rng(11);
  ModelConfig mc = micro_config();
  mc.head = FslHead::GraphProp;
  Model model(mc, rng);
  Tensor support = Tensor::from({2, 3}, {1.0, 0.0, 0.1, 0.0, 1.0, 0.1});
  Tensor query = Tensor::from({1, 3}, {0.9, 0.05, 0.1});
  const std::vector<int> pred = argmax_rows(model.fsl_logits(support, {0, 1}, 2, query));
  CHECK(pred[0] == 0);
}

TEST_CASE("the full eval pipeline is bitwise deterministic") {
  Rng rng(12);
  Model model(micro_config(), rng);
  model.set_mode(Mode::Eval);
  Tensor support_imgs = rand_images(4, 16, rng);
  Tensor query_imgs = rand_images(6, 16, rng);
  auto run = [&] {
    DisentangledFeatures s = model.disentangle(model.extract(support_imgs));
    DisentangledFeatures q = model.disentangle(model.extract(query_imgs));
    return model.fsl_logits(s.h1, {0, 0, 1, 1}, 2, q.h1);
  };
  CHECK(run().data() == run().data());
}

TEST_CASE("checkpoint round trip is byte-identical") {
  namespace fs = std::filesystem;
  Rng rng(13);
  Model model(micro_config(), rng);
  const std::string p1 = (fs::temp_directory_path() / "fdmix_ck1.bin").string();
  const std::string p2 = (fs::temp_directory_path() / "fdmix_ck2.bin").string();
  model.save(p1);
  Model loaded = Model::load(p1);
  loaded.save(p2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(!b1.empty());
  fs::remove(p1);
  fs::remove(p2);

  // loaded model computes the same features
  model.set_mode(Mode::Eval);
  loaded.set_mode(Mode::Eval);
  Tensor imgs = rand_images(2, 16, rng);
  CHECK(model.extract(imgs).data() == loaded.extract(imgs).data());
}

TEST_CASE("clone is independent of the original") {
  Rng rng(14);
  Model model(micro_config(), rng);
  Model copy = model.clone();
  auto& w = model.params_f().at("f/fc.w").mutable_data();
  w[0] += 1.0;
  CHECK(copy.params_f().at("f/fc.w").data()[0] != w[0]);
}

TEST_CASE("end-to-end training-loss gradients match finite differences") {
  const double err = model_training_gradcheck(/*seed=*/123);
  CHECK(err < 1e-4);
}
