#include <gtest/gtest.h>

#include <atomic>
#include <set>

#include "pscm/config.hpp"
#include "pscm/csv.hpp"
#include "pscm/dates.hpp"
#include "pscm/panel.hpp"
#include "pscm/parallel.hpp"
#include "pscm/rng.hpp"
#include "test_util.hpp"

using namespace pscm;
using namespace std::chrono;

TEST(Philox, KnownAnswerVectors) {
  // Reference vectors published with the Random123 library.
  const auto zero = Philox4x32::block(0, {0, 0, 0, 0});
  EXPECT_EQ(zero, (Philox4x32::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  const auto ones = Philox4x32::block(0xffffffffffffffffull, {0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu});
  EXPECT_EQ(ones, (Philox4x32::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  const auto pi = Philox4x32::block(0x299f31d0a4093822ull, {0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u});
  EXPECT_EQ(pi, (Philox4x32::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(RandomStream, ReproducibleAndStreamsDiffer) {
  RandomStream a(42, streams::kPlacebo, 3), b(42, streams::kPlacebo, 3), c(42, streams::kPlacebo, 4);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(RandomStream, UniformAndNormalMoments) {
  RandomStream rng(7, streams::kSimulation);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(RandomStream, BelowIsUnbiasedAndInRange) {
  RandomStream rng(1, 9);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    ++counts[v];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
}

TEST(Dates, ParseAndFormatRoundTrip) {
  const auto d = parse_date("2021-05-12");
  ASSERT_TRUE(d);
  EXPECT_EQ(format_date(*d), "2021-05-12");
  EXPECT_FALSE(parse_date("2021-02-30"));
  EXPECT_FALSE(parse_date("2021/05/12"));
  EXPECT_FALSE(parse_date("21-05-12"));
}

TEST(Dates, StudyHorizonHasThirtyFourThursdays) {
  const auto cal = thursday_calendar(sys_days{year{2021} / 1 / 1}, sys_days{year{2021} / 8 / 24});
  ASSERT_EQ(cal.size(), 34u);
  for (auto d : cal) EXPECT_TRUE(is_thursday(d));
  EXPECT_EQ(format_date(cal.front()), "2021-01-07");
  // The last entry is the Thursday closing the week that contains Aug 24.
  EXPECT_EQ(format_date(cal.back()), "2021-08-26");
  EXPECT_EQ(week_containing(cal, sys_days{year{2021} / 8 / 24}), 33);
  // The first lottery announcement falls in week 18.
  EXPECT_EQ(week_containing(cal, sys_days{year{2021} / 5 / 12}), 18);
}

TEST(Dates, WeekContainingBounds) {
  const auto cal = thursday_calendar(sys_days{year{2021} / 1 / 7}, sys_days{year{2021} / 1 / 21});
  ASSERT_EQ(cal.size(), 3u);
  EXPECT_EQ(week_containing(cal, sys_days{year{2021} / 1 / 1}), 0);
  EXPECT_FALSE(week_containing(cal, sys_days{year{2020} / 12 / 31}));
  EXPECT_EQ(week_containing(cal, sys_days{year{2021} / 1 / 8}), 1);
  EXPECT_FALSE(week_containing(cal, sys_days{year{2021} / 1 / 22}));
}

TEST(Csv, QuotedFieldsAndCrLf) {
  const auto t = csv::parse("a,b\r\n\"x,1\",\"he said \"\"hi\"\"\"\r\n\n2,3\n", "mem");
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0].fields[0], "x,1");
  EXPECT_EQ(t.rows[0].fields[1], "he said \"hi\"");
  EXPECT_EQ(t.rows[1].line, 4u);
  EXPECT_EQ(csv::required_number(t, t.rows[1], t.column("b")), 3.0);
}

TEST(Csv, RaggedRowReportsLine) {
  try {
    csv::parse("a,b\n1,2\n3\n", "file.csv");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_EQ(e.file(), "file.csv");
  }
}

TEST(Csv, NumbersRejectGarbage) {
  const auto t = csv::parse("v\n1.5\nabc\nNA\n", "m");
  EXPECT_EQ(csv::number(t, t.rows[0], 0), 1.5);
  EXPECT_THROW(csv::number(t, t.rows[1], 0), ParseError);
  EXPECT_FALSE(csv::number(t, t.rows[2], 0));
  EXPECT_THROW(csv::required_number(t, t.rows[2], 0), ParseError);
}

TEST(Csv, WriterFormatsRoundTrip) {
  csv::Writer w({"name", "value"});
  w.cell("a,b").cell(0.1).end();
  const auto t = csv::parse(w.str(), "w");
  EXPECT_EQ(t.rows[0].fields[0], "a,b");
  EXPECT_EQ(csv::required_number(t, t.rows[0], 1), 0.1);
}

TEST(Config, ParseTypedValuesAndComments) {
  const auto cfg = KeyValueConfig::parse("# comment\nseed = 12\nalpha=0.25\nflag = true\nname = x y\n");
  EXPECT_EQ(cfg.get_u64("seed", 0), 12u);
  EXPECT_DOUBLE_EQ(cfg.get_double("alpha", 0), 0.25);
  EXPECT_TRUE(cfg.get_bool("flag", false));
  EXPECT_EQ(cfg.get_or("name", ""), "x y");
  EXPECT_EQ(cfg.get_int("missing", 5), 5);
  EXPECT_THROW(KeyValueConfig::parse("novalue\n"), ParseError);
  EXPECT_THROW(KeyValueConfig::parse("n = abc\n").get_int("n", 0), ConfigurationError);
}

TEST(Config, PrefixLookup) {
  const auto cfg = KeyValueConfig::parse("selector.a = all\nselector.b = groups:X\nother = 1\n");
  const auto sel = cfg.with_prefix("selector.");
  ASSERT_EQ(sel.size(), 2u);
  EXPECT_EQ(sel[0].first, "a");
  EXPECT_EQ(sel[1].second, "groups:X");
}

TEST(Panel, InvariantsEnforced) {
  Eigen::MatrixXd y(2, 3);
  y << 1, 2, 3, 4, 5, 6;
  EXPECT_NO_THROW(fixtures::make_panel(y));
  EXPECT_THROW(fixtures::make_panel(y, {1.0, 0.0}), DomainError);
  y(1, 2) = 101;
  EXPECT_THROW(fixtures::make_panel(y), DomainError);
  y(1, 2) = std::nan("");
  EXPECT_THROW(fixtures::make_panel(y), DomainError);
  Eigen::MatrixXd z = Eigen::MatrixXd::Ones(2, 3);
  EXPECT_THROW(PanelData({"a", "a"}, fixtures::weekly_calendar(3), z, {1, 1}, {"G", "G"}), ReferenceError);
}

TEST(TreatmentMatrix, StepRowsAndControls) {
  const auto panel = fixtures::make_panel(Eigen::MatrixXd::Constant(3, 8, 10.0));
  TreatmentSchedule s;
  s.add("u0", 3, 7);
  s.add("u1", 5, 7);
  const auto d = treatment_matrix(s, panel);
  for (int t = 0; t < 8; ++t) {
    EXPECT_EQ(d(0, t), t >= 3 ? 1 : 0);
    EXPECT_EQ(d(2, t), 0);
  }
  // Adoptions two weeks apart differ in exactly two columns.
  EXPECT_EQ((d.row(0) - d.row(1)).cwiseAbs().sum(), 2);
  for (int r = 0; r < 3; ++r) {
    for (int t = 1; t < 8; ++t) EXPECT_GE(d(r, t), d(r, t - 1));
  }
}

TEST(TreatmentMatrix, Errors) {
  const auto panel = fixtures::make_panel(Eigen::MatrixXd::Constant(2, 4, 10.0));
  TreatmentSchedule out_of_range;
  out_of_range.add("u0", 4, 4);
  EXPECT_THROW(treatment_matrix(out_of_range, panel), ScheduleError);
  TreatmentSchedule unknown;
  unknown.add("zz", 1, 2);
  EXPECT_THROW(treatment_matrix(unknown, panel), ReferenceError);
  TreatmentSchedule s;
  EXPECT_THROW(s.add("u0", 3, 2), ScheduleError);
}

TEST(Align, EarliestAdopterHasZeroOffset) {
  const auto panel = fixtures::make_panel(Eigen::MatrixXd::Constant(3, 12, 10.0));
  TreatmentSchedule s;
  s.add("u0", 5, 8);
  s.add("u1", 8, 11);
  const auto a = align(panel, s, "u0");
  EXPECT_EQ(a.h, 0);
  EXPECT_EQ(a.pre, (Window{0, 5}));
  EXPECT_EQ(a.treat, (Window{5, 9}));
  EXPECT_EQ(a.post, (Window{9, 12}));
}

TEST(Align, LateAdopterCapsFitWindowAndHasNoPost) {
  const auto panel = fixtures::make_panel(Eigen::MatrixXd::Constant(3, 12, 10.0));
  TreatmentSchedule s;
  s.add("u0", 5, 8);
  s.add("u1", 8, 11);
  const auto a = align(panel, s, "u1");
  EXPECT_EQ(a.h, 3);
  EXPECT_EQ(a.pre, (Window{3, 8}));
  EXPECT_EQ(a.lead, (Window{0, 3}));
  EXPECT_TRUE(a.post.empty());
  // lead, pre, treat and post partition the calendar.
  std::vector<int> hits(12, 0);
  for (auto w : {a.lead, a.pre, a.treat, a.post}) {
    for (int t = w.begin; t < w.end; ++t) ++hits[static_cast<std::size_t>(t)];
  }
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(Align, StudyCalendarFitWindowEndsBeforeFirstAdoption) {
  const auto cal = thursday_calendar(sys_days{year{2021} / 1 / 1}, sys_days{year{2021} / 8 / 24});
  const int first = *week_containing(cal, sys_days{year{2021} / 5 / 12});
  const auto a = align_spell("x", {first, 33}, first, 33);
  EXPECT_EQ(a.pre.end, 18);
  EXPECT_EQ(a.pre.size(), 18);
}

TEST(Align, TooFewPreWeeksRejected) {
  EXPECT_THROW(align_spell("x", {1, 3}, 1, 5), AlignmentError);
  const auto panel = fixtures::make_panel(Eigen::MatrixXd::Constant(2, 6, 1.0));
  TreatmentSchedule s;
  s.add("u0", 3, 4);
  EXPECT_THROW(align(panel, s, "u1"), AlignmentError);
}

TEST(PooledTreatedSet, PopulationShares) {
  const auto panel = fixtures::make_panel(Eigen::MatrixXd::Constant(3, 4, 1.0), {100, 300, 50},
                                         {"A", "A", "B"});
  TreatmentSchedule s;
  s.add("u0", 2, 3);
  s.add("u1", 2, 3);
  const auto all = pooled_treated_set(panel, s, [](std::size_t) { return true; });
  ASSERT_EQ(all.eta.size(), 2u);
  EXPECT_DOUBLE_EQ(all.eta[0], 0.25);
  EXPECT_DOUBLE_EQ(all.eta[1], 0.75);
  const auto one = pooled_treated_set(panel, s, [](std::size_t r) { return r == 1; });
  EXPECT_EQ(one.eta, std::vector<double>{1.0});
  EXPECT_THROW(pooled_treated_set(panel, s, [&](std::size_t r) { return panel.group()[r] == "B"; }),
               SelectionError);
}

TEST(PooledTreatedSet, WeightsSumToOne) {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> pop(1.0, 1e6);
  std::vector<double> p(50);
  for (auto& v : p) v = pop(gen);
  const auto panel = fixtures::make_panel(Eigen::MatrixXd::Constant(50, 4, 1.0), p);
  TreatmentSchedule s;
  for (int i = 0; i < 50; i += 2) s.add("u" + std::to_string(i), 2, 3);
  const auto set = pooled_treated_set(panel, s, [](std::size_t) { return true; });
  double total = 0;
  for (double e : set.eta) total += e;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(ParallelFor, ResultsIndependentOfJobs) {
  std::vector<double> a(100), b(100);
  parallel_for(100, 1, [&](std::size_t i) { a[i] = std::sqrt(static_cast<double>(i)); });
  parallel_for(100, 4, [&](std::size_t i) { b[i] = std::sqrt(static_cast<double>(i)); });
  EXPECT_EQ(a, b);
}

TEST(ParallelFor, RethrowsLowestIndexError) {
  try {
    parallel_for(10, 3, [](std::size_t i) {
      if (i == 7 || i == 4) throw DomainError("index " + std::to_string(i));
    });
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_STREQ(e.what(), "index 4");
  }
}
