#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "pmx/dataset.hpp"

using namespace pmx;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("pmx_dataset_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

PatientCase make_case(const std::string& id, double t, std::size_t dim = 4) {
  PatientCase c;
  c.patient_id = id;
  c.t_score = t;
  c.label = who_label(t);
  c.embedding.assign(dim, t);
  c.clinical[kAge] = 60.0;
  c.clinical[kWeight] = 70.0;
  c.clinical[kHeight] = 165.0;
  return c;
}

std::vector<PatientCase> balanced(std::size_t n) {
  std::vector<PatientCase> out;
  const std::array<double, 3> ts = {0.5, -1.7, -3.0};
  for (std::size_t i = 0; i < n; ++i) {
    auto c = make_case("id" + std::to_string(1000 + i), ts[i % 3] + 0.001 * static_cast<double>(i % 7));
    c.embedding = {static_cast<double>(i), static_cast<double>(i % 5), 1.0, -static_cast<double>(i) * 0.5};
    c.clinical[kAge] = 40.0 + static_cast<double>(i % 30);
    c.clinical[kWeight] = 50.0 + static_cast<double>(i % 17);
    c.clinical[kPreviousFracture] = static_cast<double>(i % 2);
    out.push_back(c);
  }
  return out;
}

} // namespace

TEST(WhoLabel, Thresholds) {
  EXPECT_EQ(who_label(-0.5), Label::Normal);
  EXPECT_EQ(who_label(-3.48), Label::Osteoporosis);
  EXPECT_EQ(who_label(-1.0), Label::Osteopenia);
  EXPECT_EQ(who_label(-2.5), Label::Osteopenia);
  EXPECT_EQ(who_label(-2.5000001), Label::Osteoporosis);
  EXPECT_EQ(who_label(-0.9999999), Label::Normal);
}

TEST(WhoLabel, RejectsNonFinite) {
  EXPECT_THROW(who_label(std::numeric_limits<double>::quiet_NaN()), DataError);
  EXPECT_THROW(who_label(std::numeric_limits<double>::infinity()), DataError);
}

TEST(LoadDataset, ThreeRowRoundTrip) {
  auto dir = temp_dir("three");
  std::vector<PatientCase> cases = {make_case("a", 0.2, kEmbeddingDim), make_case("b", -1.5, kEmbeddingDim),
                                    make_case("c", -3.0, kEmbeddingDim)};
  cases[1].label = Label::Normal; // wrong on purpose; recomputed on load
  write_clinical_csv((dir / "clin.csv").string(), cases);
  for (auto fmt : {EmbeddingFormat::Csv, EmbeddingFormat::Binary}) {
    write_embeddings((dir / "emb").string(), cases, fmt);
    auto loaded = load_dataset((dir / "clin.csv").string(), (dir / "emb").string());
    ASSERT_EQ(loaded.size(), 3u);
    EXPECT_EQ(loaded[1].patient_id, "b");
    EXPECT_EQ(loaded[1].label, Label::Osteopenia);
    EXPECT_EQ(loaded[2].embedding.size(), kEmbeddingDim);
    EXPECT_DOUBLE_EQ(loaded[2].embedding[7], -3.0);
    EXPECT_EQ(loaded[0].clinical, cases[0].clinical);
  }
}

TEST(LoadDataset, JoinErrorNamesId) {
  auto dir = temp_dir("join");
  std::vector<PatientCase> cases = {make_case("a", 0.2, kEmbeddingDim), make_case("orphan", -1.5, kEmbeddingDim)};
  write_clinical_csv((dir / "clin.csv").string(), cases);
  write_embeddings((dir / "emb.csv").string(), std::span(cases).first(1), EmbeddingFormat::Csv);
  try {
    load_dataset((dir / "clin.csv").string(), (dir / "emb.csv").string());
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("orphan"), std::string::npos) << e.what();
  }
}

TEST(LoadDataset, WidthErrorReportsObservedWidth) {
  auto dir = temp_dir("width");
  std::vector<PatientCase> cases = {make_case("a", 0.2, 1150)};
  write_clinical_csv((dir / "clin.csv").string(), cases);
  write_embeddings((dir / "emb.csv").string(), cases, EmbeddingFormat::Csv);
  try {
    load_dataset((dir / "clin.csv").string(), (dir / "emb.csv").string());
    FAIL();
  } catch (const DataError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("1150"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1151"), std::string::npos) << msg;
  }
}

TEST(LoadDataset, NaNReportsRow) {
  auto dir = temp_dir("nan");
  std::vector<PatientCase> cases = {make_case("a", 0.2, kEmbeddingDim), make_case("b", 0.3, kEmbeddingDim)};
  write_clinical_csv((dir / "clin.csv").string(), cases);
  std::ifstream in(dir / "clin.csv");
  std::string all((std::istreambuf_iterator<char>(in)), {});
  in.close();
  auto pos = all.rfind("0.3");
  all.replace(pos, 3, "nan");
  std::ofstream(dir / "clin.csv") << all;
  try {
    read_clinical_csv((dir / "clin.csv").string());
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos) << e.what();
  }
}

TEST(SplitDataset, SizesAndStrata) {
  auto cases = balanced(100);
  auto s = split_dataset(cases, 7);
  EXPECT_EQ(s.train.size(), 72u);
  EXPECT_EQ(s.val.size(), 8u);
  EXPECT_EQ(s.test.size(), 20u);
  // Hand count: classes 34/33/33; test 20% -> 6.8/6.6/6.6 -> 7/7/6; val 8% -> 2.72/2.64/2.64 -> 3/3/2.
  std::array<int, 3> test{}, val{};
  for (auto& c : s.test) ++test[static_cast<int>(c.label)];
  for (auto& c : s.val) ++val[static_cast<int>(c.label)];
  EXPECT_EQ(test, (std::array<int, 3>{7, 7, 6}));
  EXPECT_EQ(val, (std::array<int, 3>{3, 3, 2}));
}

TEST(SplitDataset, DeterministicPartition) {
  auto cases = balanced(100);
  auto a = split_dataset(cases, 7);
  auto b = split_dataset(cases, 7);
  auto ids = [](const std::vector<PatientCase>& v) {
    std::vector<std::string> out;
    for (auto& c : v) out.push_back(c.patient_id);
    return out;
  };
  EXPECT_EQ(ids(a.train), ids(b.train));
  EXPECT_EQ(ids(a.test), ids(b.test));
  auto c = split_dataset(cases, 8);
  EXPECT_NE(ids(a.test), ids(c.test));

  std::set<std::string> all;
  for (auto* part : {&a.train, &a.val, &a.test})
    for (auto& x : *part) EXPECT_TRUE(all.insert(x.patient_id).second) << "duplicate " << x.patient_id;
  EXPECT_EQ(all.size(), cases.size());
}

TEST(SplitDataset, MissingClassIsError) {
  std::vector<PatientCase> cases;
  for (int i = 0; i < 20; ++i) cases.push_back(make_case("x" + std::to_string(i), i % 2 ? 0.0 : -2.0));
  EXPECT_THROW(split_dataset(cases, 1), DataError);
}

TEST(Standardizer, TrainStatisticsAreStandard) {
  auto cases = balanced(100);
  auto s = split_dataset(cases, 3);
  const std::size_t dim = s.train.front().embedding.size();
  std::vector<double> mean(dim, 0.0), sq(dim, 0.0);
  std::array<double, kClinicalDim> cm{}, cs{};
  for (auto& c : s.train) {
    auto e = s.standardizer.embedding(c.embedding);
    for (std::size_t d = 0; d < dim; ++d) {
      mean[d] += e[d];
      sq[d] += e[d] * e[d];
    }
    auto x = s.standardizer.clinical(c.clinical);
    for (std::size_t j = 0; j < kClinicalDim; ++j) {
      cm[j] += x[j];
      cs[j] += x[j] * x[j];
    }
    EXPECT_EQ(x[kPreviousFracture], c.clinical[kPreviousFracture]); // binaries untouched
  }
  const double n = static_cast<double>(s.train.size());
  for (std::size_t d = 0; d < dim; ++d) {
    EXPECT_LT(std::abs(mean[d] / n), 1e-6);
    const double sd = std::sqrt(sq[d] / n - (mean[d] / n) * (mean[d] / n));
    if (d == 2) EXPECT_EQ(sd, 0.0) << "constant dimension maps to 0";
    else EXPECT_NEAR(sd, 1.0, 1e-6);
  }
  for (std::size_t j : {kAge, kWeight}) {
    EXPECT_LT(std::abs(cm[j] / n), 1e-6);
    EXPECT_NEAR(std::sqrt(cs[j] / n - (cm[j] / n) * (cm[j] / n)), 1.0, 1e-6);
  }
  EXPECT_EQ(cm[kHeight], 0.0);
}

TEST(Synthetic, Deterministic) {
  SynthConfig cfg;
  cfg.n_cases = 200;
  cfg.seed = 11;
  auto a = generate_synthetic(cfg);
  auto b = generate_synthetic(cfg);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].patient_id, b[i].patient_id);
    EXPECT_EQ(a[i].embedding, b[i].embedding);
    EXPECT_EQ(a[i].clinical, b[i].clinical);
    EXPECT_EQ(a[i].t_score, b[i].t_score);
  }
  auto dir = temp_dir("synth");
  write_clinical_csv((dir / "a.csv").string(), a);
  write_clinical_csv((dir / "b.csv").string(), b);
  EXPECT_EQ(detail::read_file_bytes((dir / "a.csv").string()), detail::read_file_bytes((dir / "b.csv").string()));
}

TEST(Synthetic, LabelsMatchTScoresAndRanges) {
  SynthConfig cfg;
  cfg.n_cases = 2000;
  cfg.seed = 3;
  for (auto& c : generate_synthetic(cfg)) {
    EXPECT_EQ(c.label, who_label(c.t_score));
    EXPECT_NO_THROW(c.clinical.validate());
    EXPECT_GE(c.clinical[kAge], 20.0);
    EXPECT_LE(c.clinical[kAge], 100.0);
    EXPECT_GE(c.clinical[kHeight], 145.0);
    EXPECT_LE(c.clinical[kHeight], 195.0);
  }
}

TEST(Synthetic, ClassCountsFollowFractions) {
  // Pearson chi-square against the requested fractions; df = 2, critical value at alpha 0.01.
  const double critical = 9.2103;
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    SynthConfig cfg;
    cfg.n_cases = 4160;
    cfg.seed = seed;
    cfg.embedding_dim = 8;
    std::array<double, 3> counts{};
    for (auto& c : generate_synthetic(cfg)) counts[static_cast<int>(c.label)] += 1.0;
    const std::array<double, 3> expected = {1872.0, 1581.0, 707.0}; // 4160 * (0.45, 0.38, 0.17)
    double chi2 = 0.0;
    for (int k = 0; k < 3; ++k) chi2 += (counts[k] - expected[k]) * (counts[k] - expected[k]) / expected[k];
    EXPECT_LT(chi2, critical) << "seed " << seed;
  }
}

TEST(Synthetic, ConfigValidation) {
  SynthConfig cfg;
  cfg.class_fractions = {0.5, 0.5, 0.1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = SynthConfig{};
  cfg.noise_sigma = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = SynthConfig{};
  cfg.tabular_signal = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Synthetic, ComplementaryKnobsValidate) {
  EXPECT_FALSE(SynthConfig{}.complementary());
  const auto preset = complementary_synth_config();
  EXPECT_TRUE(preset.complementary());
  EXPECT_NO_THROW(preset.validate());
  SynthConfig cfg;
  cfg.image_noise_fraction = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = SynthConfig{};
  cfg.image_noise_scale = 0.5; // below noise_sigma
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = SynthConfig{};
  cfg.clinical_decoy_fraction = -0.1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = SynthConfig{};
  cfg.clinical_noise = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Synthetic, ClassSteppedClinicalFeaturesClusterByClass) {
  SynthConfig cfg;
  cfg.n_cases = 1500;
  cfg.embedding_dim = 8;
  cfg.seed = 21;
  cfg.clinical_by_class = true;
  cfg.clinical_noise = 0.05;
  std::array<double, 3> sum{}, sq{}, n{};
  for (const auto& c : generate_synthetic(cfg)) {
    EXPECT_EQ(c.label, who_label(c.t_score));
    const auto k = static_cast<std::size_t>(c.label);
    sum[k] += c.clinical[kAge];
    sq[k] += c.clinical[kAge] * c.clinical[kAge];
    n[k] += 1.0;
  }
  std::array<double, 3> mean{};
  for (std::size_t k = 0; k < 3; ++k) {
    mean[k] = sum[k] / n[k];
    EXPECT_LT(std::sqrt(sq[k] / n[k] - mean[k] * mean[k]), 1.0) << "class " << k;
  }
  // Age rises with severity.
  EXPECT_LT(mean[0] + 2.0, mean[1]);
  EXPECT_LT(mean[1] + 2.0, mean[2]);
}

TEST(Synthetic, ComplementaryCohortIsDeterministic) {
  auto cfg = complementary_synth_config();
  cfg.n_cases = 300;
  cfg.seed = 5;
  auto a = generate_synthetic(cfg), b = generate_synthetic(cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].embedding, b[i].embedding);
    EXPECT_EQ(a[i].clinical, b[i].clinical);
  }
}
