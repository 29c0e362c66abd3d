#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

#include "gazereg/containers.hpp"
#include "gazereg/rouge.hpp"
#include "gazereg/synth.hpp"

using namespace gazereg;

namespace {

SynthConfig small_config() {
  SynthConfig c;
  c.n_train = 40;
  c.n_val = 5;
  c.n_test = 10;
  return c;
}

// full (m+1) x (n+1) table, no row reuse
std::size_t lcs_table(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
  return t[a.size()][b.size()];
}

// nearest glyph by squared distance over the first channel
int template_class(const Image& img, int patch, const SynthConfig& c, const std::vector<Plane<double>>& glyphs) {
  const int px = (patch % c.n_h) * c.patch_px, py = (patch / c.n_h) * c.patch_px;
  const auto block = img.planes[0].block(py, px, c.patch_px, c.patch_px);
  int best = 0;
  double best_d = 1e300;
  for (std::size_t g = 0; g < glyphs.size(); ++g) {
    const double d = (block - (0.2 + 0.6 * glyphs[g])).square().sum();
    if (d < best_d) best_d = d, best = static_cast<int>(g);
  }
  return best;
}

}  // namespace

TEST_CASE("generation is reproducible and the on-disk copy is identical") {
  const SynthConfig c = small_config();
  const SynthDataset a = generate(c, 3), b = generate(c, 3);
  REQUIRE(a.train.size() == 40);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].future_tokens == b.train[i].future_tokens);
    CHECK(a.train[i].gaze.samples == b.train[i].gaze.samples);
    CHECK(encode_gim1(a.train[i].frames[2].cast<float>()) == encode_gim1(b.train[i].frames[2].cast<float>()));
  }
  const std::string dir = "synth_roundtrip";
  std::filesystem::remove_all(dir);
  write_dataset(a, dir);
  const SynthDataset back = read_dataset(dir);
  REQUIRE(back.test.size() == a.test.size());
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    CHECK(back.test[i].future_tokens == a.test[i].future_tokens);
    CHECK(back.test[i].gaze.samples == a.test[i].gaze.samples);
    for (std::size_t k = 0; k < a.test[i].frames.size(); ++k)
      for (int ch = 0; ch < 3; ++ch)
        CHECK((back.test[i].frames[k].planes[ch] - a.test[i].frames[k].planes[ch]).abs().maxCoeff() == 0.0);
  }
  const SynthDataset other = generate(c, 4);
  const bool differs = other.train[0].signal_patch != a.train[0].signal_patch ||
                       other.train[0].signal_class != a.train[0].signal_class;
  CHECK(differs);
}

TEST_CASE("zero jitter and no saccades put every gaze sample in the signal patch") {
  SynthConfig c = small_config();
  c.gaze_jitter_px = 0.0;
  c.saccade_prob = 0.0;
  const auto glyphs = make_glyphs(c);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SynthSample s = generate_sample(c, glyphs, seed);
    for (const auto& g : s.gaze.samples) {
      int k = 0;
      while (k < c.tau_o - 1 && g.timestamp_ms > c.frame_time(k)) ++k;
      CHECK(c.grid().index_of(g.x, g.y) == s.signal_patch[static_cast<std::size_t>(k)]);
    }
  }
}

TEST_CASE("signal position is spread over the whole grid") {
  const SynthConfig c = small_config();
  const auto glyphs = make_glyphs(c);
  std::vector<int> hist(16, 0);
  for (std::uint64_t seed = 0; seed < 800; ++seed)
    for (int p : generate_sample(c, glyphs, seed).signal_patch) ++hist[static_cast<std::size_t>(p)];
  for (int h : hist) {
    CHECK(h > 4000 / 16 * 0.7);
    CHECK(h < 4000 / 16 * 1.3);
  }
}

TEST_CASE("glyphs are distinct and half filled") {
  const SynthConfig c = small_config();
  const auto glyphs = make_glyphs(c);
  REQUIRE(glyphs.size() == 8);
  for (std::size_t i = 0; i < glyphs.size(); ++i) {
    CHECK(glyphs[i].sum() == 32.0);
    for (std::size_t j = i + 1; j < glyphs.size(); ++j) CHECK_FALSE((glyphs[i] == glyphs[j]).all());
  }
}

TEST_CASE("token rule: deterministic, slots in range, depends on the latest frame") {
  const SynthConfig c = small_config();
  const std::vector<int> classes{0, 1, 2, 3, 4}, patches{5, 6, 7, 8, 9};
  const auto t = future_tokens(c, classes, patches, nullptr);
  REQUIRE(t.size() == 4);
  CHECK(t == future_tokens(c, classes, patches, nullptr));
  CHECK(t[0] < c.n_classes);
  CHECK(t[1] == c.n_classes + (9 + 1) % 16);
  CHECK(t[3] == c.n_classes + (9 + 2) % 16);
  auto other = classes;
  other[4] = 7;
  CHECK(future_tokens(c, other, patches, nullptr)[0] != t[0]);
  const auto cur = current_tokens(c, classes, patches, nullptr);
  REQUIRE(cur.size() == 10);
  CHECK(cur[4] == 2);
  CHECK(cur[5] == c.n_classes + 7);
}

TEST_CASE("bayes ceiling: clean rule is 1, pure label noise is chance per slot") {
  SynthConfig c = small_config();
  CHECK(bayes_ceiling(c) == 1.0);
  c.label_noise = 1.0;
  CHECK(bayes_ceiling(c) == doctest::Approx(0.5 * (1.0 / c.n_classes + 1.0 / c.patches())));
  c.label_noise = 0.2;
  CHECK(bayes_ceiling(c) == doctest::Approx(0.5 * ((0.8 + 0.2 / 8) + (0.8 + 0.2 / 16))));
  c.n_h = 5;
  CHECK_THROWS_AS(bayes_ceiling(c), ParameterError);
}

TEST_CASE("signal patch identifies the class; a distractor patch does not") {
  const SynthConfig c = small_config();
  const auto glyphs = make_glyphs(c);
  int hit_signal = 0, hit_other = 0, n = 0;
  std::mt19937_64 rng(11);
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    const SynthSample s = generate_sample(c, glyphs, seed + 1000);
    for (int k = 0; k < c.tau_o; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      hit_signal += template_class(s.frames[ku], s.signal_patch[ku], c, glyphs) == s.signal_class[ku];
      int other = static_cast<int>(rng() % 15);
      if (other >= s.signal_patch[ku]) ++other;
      hit_other += template_class(s.frames[ku], other, c, glyphs) == s.signal_class[ku];
      ++n;
    }
  }
  const double acc_signal = double(hit_signal) / n, acc_other = double(hit_other) / n;
  MESSAGE("signal " << acc_signal << " distractor " << acc_other);
  CHECK(acc_signal >= 0.9 * bayes_ceiling(c));
  CHECK(std::abs(acc_other - 1.0 / c.n_classes) < 0.05);
}

TEST_CASE("occluded sub-frames above 60% coverage are judged major on their flows") {
  SynthConfig c = small_config();
  c.occlusion_prob = 1.0;
  c.occluder_coverage = 0.8;
  const auto glyphs = make_glyphs(c);
  const SynthSample s = generate_sample(c, glyphs, 5);
  REQUIRE(s.sub_frames.size() == 2 * static_cast<std::size_t>(c.tau_o));
  for (const auto& sf : s.sub_frames) {
    const auto r = occlusion_check(sf.fwd, sf.bwd);
    CHECK((r.verdict == OcclusionVerdict::major) == sf.occluded);
    if (sf.occluded) CHECK(sf.coverage > 0.6);
  }
}

TEST_CASE("occlusion scene coverage is exact and its mask is the oracle") {
  std::mt19937_64 rng(12);
  for (double cov : {0.0, 0.3, 0.7, 0.9}) {
    const OcclusionScene sc = make_occlusion_scene(32, 32, cov, 2, rng);
    CHECK(sc.coverage == doctest::Approx(cov).epsilon(1e-3));
    CHECK(sc.mask.mean() == sc.coverage);
  }
}

TEST_CASE("lcs and rouge-l against the full-table oracle") {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 300; ++t) {
    std::vector<int> a(rng() % 12), b(1 + rng() % 12);
    for (auto& x : a) x = static_cast<int>(rng() % 5);
    for (auto& x : b) x = static_cast<int>(rng() % 5);
    const std::size_t l = lcs_table(a, b);
    CHECK(lcs_length(a, b) == l);
    const RougeScore r = rouge_l_ids(a, b);
    const double p = a.empty() ? 0.0 : double(l) / a.size(), rc = double(l) / b.size();
    CHECK(r.precision == p);
    CHECK(r.recall == rc);
    CHECK(r.f == (l == 0 ? 0.0 : 2 * p * rc / (rc + p)));
  }
}

TEST_CASE("rouge-l edge cases") {
  const std::vector<std::string> s{"a", "b", "c"};
  CHECK(rouge_l(s, s).f == 1.0);
  CHECK(rouge_l({"x", "y"}, s).f == 0.0);
  CHECK(rouge_l({}, s).f == 0.0);
  CHECK_THROWS_AS(rouge_l(s, {}), ParameterError);
  CHECK(rouge_l({"a", "c"}, s).precision == 1.0);
  CHECK(rouge_l({"a", "c"}, s).recall == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("token words are unique and stable") {
  std::set<std::string> words;
  for (int i = 0; i < 64; ++i) words.insert(token_word(i));
  CHECK(words.size() == 64);
  CHECK(render_tokens({0, 1}) == std::vector<std::string>{token_word(0), token_word(1)});
}

TEST_CASE("GIM1 container round-trip and corruption") {
  ImageF img(6, 4, 2);
  img(1, 3, 5) = 0.25f;
  const std::string bytes = encode_gim1(img);
  CHECK(bytes.size() == 20 + 6 * 4 * 2 * 4);
  const ImageF back = decode_gim1(bytes);
  CHECK(back(1, 3, 5) == 0.25f);
  CHECK_THROWS(decode_gim1(bytes.substr(0, bytes.size() - 1)));
  CHECK_THROWS_AS(io::read_file("definitely/not/here.gim"), IoError);
}
