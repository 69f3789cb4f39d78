#include <set>
#include <sstream>

#include "doctest.h"
#include "spotlight/errors.hpp"
#include "spotlight/event_csv.hpp"
#include "spotlight/pathway.hpp"
#include "spotlight/random.hpp"

using namespace spotlight;

namespace {

Event ev(std::string patient, std::uint32_t t, std::string code, std::string dim = "observations",
         std::string system = "LOINC") {
  return Event{std::move(patient), t, std::move(code), std::move(system), std::move(dim)};
}

// Selection-sort oracle: repeatedly take the earliest-listed event with the
// smallest remaining time.
std::vector<Event> stable_oracle(std::vector<Event> events) {
  std::vector<Event> out;
  while (!events.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < events.size(); ++i)
      if (events[i].time < events[best].time) best = i;
    out.push_back(events[best]);
    events.erase(events.begin() + static_cast<std::ptrdiff_t>(best));
  }
  return out;
}

}  // namespace

TEST_CASE("dimension config") {
  DimensionConfig d = DimensionConfig::defaults();
  CHECK_NOTHROW(d.validate());
  CHECK(d.condition_row() == 1);
  DimensionConfig five = d;
  five.names.pop_back();
  CHECK_THROWS_AS(five.validate(), ConfigError);
  DimensionConfig bad_cond = d;
  bad_cond.condition = "labs";
  CHECK_THROWS_AS(bad_cond.validate(), ConfigError);
  CHECK(DimensionConfig::from_json(d.to_json()).names == d.names);
}

TEST_CASE("ingest_events") {
  const DimensionConfig dims = DimensionConfig::defaults();
  SUBCASE("bad time row is collected, not fatal") {
    std::istringstream in(
        "patient_id,time,code,system,dimension\n"
        "p1,0,A,ICD9,conditions\n"
        "p1,abc,B,LOINC,observations\n"
        "p1,2,C,LOINC,observations\n");
    IngestResult r = ingest_events(in, {}, dims);
    CHECK(r.events.size() == 2);
    REQUIRE(r.errors.size() == 1);
    CHECK(r.errors[0].line == 3);
  }
  SUBCASE("empty file") {
    std::istringstream in("");
    CHECK(ingest_events(in, {}, dims).events.empty());
  }
  SUBCASE("missing column") {
    std::istringstream in("patient_id,time,code,dimension\np1,0,A,conditions\n");
    CHECK_THROWS_AS(ingest_events(in, {}, dims), ConfigError);
  }
  SUBCASE("unmapped dimension rejected with line") {
    std::istringstream in("patient_id,time,code,system,dimension\np1,0,A,X,labs\np1,,B,X,procedures\n");
    IngestResult r = ingest_events(in, {}, dims);
    REQUIRE(r.errors.size() == 1);
    CHECK(r.errors[0].line == 2);
    REQUIRE(r.events.size() == 1);
    CHECK(r.events[0].time == 0);
  }
  SUBCASE("custom column names, quoting and semicolons") {
    std::istringstream in(
        "subj;day;cd;sys;dim\n"
        "\"p;1\";1;\"x\"\"y\";S;encounters\n");
    ColumnMap map = ColumnMap::from_json(
        {{"patient", "subj"}, {"time", "day"}, {"code", "cd"}, {"system", "sys"}, {"dimension", "dim"},
         {"delimiter", ";"}});
    IngestResult r = ingest_events(in, map, dims);
    REQUIRE(r.events.size() == 1);
    CHECK(r.events[0].patient_id == "p;1");
    CHECK(r.events[0].code == "x\"y");
    CHECK_THROWS_AS(ColumnMap::from_json({{"bogus", "x"}}), ConfigError);
  }
  SUBCASE("equal times keep file order; patients grouped") {
    Rng rng(4);
    std::ostringstream csv;
    csv << "patient_id,time,code,system,dimension\n";
    std::vector<Event> p1, p2;
    for (int i = 0; i < 60; ++i) {
      const std::string patient = rng.bernoulli(0.5) ? "p1" : "p2";
      Event e = ev(patient, static_cast<std::uint32_t>(rng.below(4)), "C" + std::to_string(i));
      csv << e.patient_id << ',' << e.time << ',' << e.code << ',' << e.system << ',' << e.dimension << '\n';
      (patient == "p1" ? p1 : p2).push_back(e);
    }
    std::istringstream in(csv.str());
    IngestResult r = ingest_events(in, {}, dims);
    std::vector<Event> expected;
    const bool p1_first = r.events.front().patient_id == "p1";
    for (auto& e : stable_oracle(p1_first ? p1 : p2)) expected.push_back(e);
    for (auto& e : stable_oracle(p1_first ? p2 : p1)) expected.push_back(e);
    CHECK(r.events == expected);
  }
}

TEST_CASE("build_vocabulary") {
  std::vector<Event> e{ev("p", 0, "A"), ev("p", 0, "B"), ev("p", 0, "A"), ev("p", 0, "C")};
  CodeVocabulary v = build_vocabulary(e);
  CHECK(v.size() == 3);
  CHECK(*v.find(e[0]) == 1);
  CHECK(*v.find(e[1]) == 2);
  CHECK(*v.find(e[3]) == 3);

  std::vector<Event> abc{ev("p", 0, "A"), ev("p", 0, "B"), ev("p", 0, "C")};
  CodeRemap remap = CodeRemap::from_json({{"groups", {{"A", "G"}, {"LOINC:B", "G"}}}});
  CodeVocabulary g = build_vocabulary(abc, remap);
  CHECK(g.size() == 2);
  CHECK(g.entry(1).code == "G");
  CHECK(g.entry(1).group == "G");
  CHECK(g.entry(2).code == "C");
  CHECK(*g.find(abc[1]) == 1);

  CHECK(build_vocabulary(std::vector<Event>{}).size() == 0);
  CHECK_THROWS_AS(CodeRemap::from_json({{"map", {{"A", "G"}}}}), ConfigError);
  CHECK_THROWS_AS(CodeRemap::from_json({{"groups", {{"A", 3}}}}), ConfigError);
  CHECK_THROWS_AS(CodeRemap::from_json({{"groups", {{"A", ""}}}}), ConfigError);
  CHECK_THROWS_AS(v.entry(0), VocabularyError);
  CHECK_THROWS_AS(v.entry(4), VocabularyError);
}

TEST_CASE("vocabulary is a bijection and survives JSON") {
  Rng rng(8);
  std::vector<Event> events;
  for (int i = 0; i < 500; ++i) {
    events.push_back(ev("p", 0, "X" + std::to_string(rng.below(120)),
                        rng.bernoulli(0.5) ? "observations" : "medications",
                        rng.bernoulli(0.5) ? "LOINC" : "RX"));
  }
  CodeVocabulary v = build_vocabulary(events);
  std::set<std::uint32_t> seen;
  for (const Event& e : events) seen.insert(*v.find(e));
  CHECK(seen.size() == v.size());
  CHECK(*seen.begin() == 1);
  CHECK(*seen.rbegin() == v.size());
  std::set<std::string> keys;
  for (std::uint32_t i = 1; i <= v.size(); ++i) keys.insert(v.entry(i).system + ":" + v.entry(i).code);
  CHECK(keys.size() == v.size());

  CodeVocabulary back = CodeVocabulary::from_json(v.to_json());
  REQUIRE(back.size() == v.size());
  for (const Event& e : events) CHECK(*back.find(e) == *v.find(e));
  CHECK_THROWS_AS(CodeVocabulary::from_json({{"0", {{"code", "a"}, {"system", "b"}, {"dimension", "c"}}}}),
                  FormatError);
}

TEST_CASE("compose_pathway") {
  Pathway p = compose_pathway({ev("p", 2, "A"), ev("p", 0, "B"), ev("p", 1, "C")});
  CHECK(p.events[0].time == 0);
  CHECK(p.events[1].time == 1);
  CHECK(p.events[2].time == 2);
  CHECK(compose_pathway({ev("p", 5, "A")}).events.size() == 1);
  Pathway ties = compose_pathway({ev("p", 0, "A"), ev("p", 0, "B"), ev("p", 0, "C")});
  CHECK(ties.events[0].code == "A");
  CHECK(ties.events[2].code == "C");
  CHECK_THROWS_AS(compose_pathway({ev("p", 0, "A"), ev("q", 0, "B")}), ContractError);

  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Event> events;
    for (int i = 0; i < 25; ++i) events.push_back(ev("p", static_cast<std::uint32_t>(rng.below(5)), std::to_string(i)));
    Pathway once = compose_pathway(events);
    CHECK(once.events == stable_oracle(events));
    CHECK(compose_pathway(once.events).events == once.events);
  }
}

TEST_CASE("render_image") {
  const DimensionConfig dims = DimensionConfig::defaults();
  Pathway empty{"p", {}};
  CodeVocabulary none;
  PathwayImage blank = render_image(empty, none, dims);
  CHECK(blank.grid.height == 6);
  CHECK(blank.grid.width == 400);
  for (auto c : blank.grid.cells) CHECK(c == 0);

  Pathway two = compose_pathway({ev("p", 0, "A", "procedures"), ev("p", 1, "B", "observations")});
  CodeVocabulary v = build_vocabulary(two.events);
  PathwayImage img = render_image(two, v, dims);
  CHECK(img.grid.at(2, 0) == 1);
  CHECK(img.grid.at(4, 1) == 2);
  std::size_t nonzero = 0;
  for (auto c : img.grid.cells) nonzero += c != 0;
  CHECK(nonzero == 2);

  std::vector<Event> long_events;
  for (int i = 0; i < 401; ++i) long_events.push_back(ev("p", 0, "A"));
  Pathway too_long = compose_pathway(long_events);
  CHECK_THROWS_AS(render_image(too_long, build_vocabulary(long_events), dims), LengthError);
  CHECK_THROWS_AS(render_image(two, none, dims), VocabularyError);

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Event> events;
    const std::size_t m = rng.below(60);
    for (std::size_t i = 0; i < m; ++i) {
      events.push_back(ev("p", static_cast<std::uint32_t>(rng.below(9)), "K" + std::to_string(rng.below(30)),
                          dims.names[rng.below(6)]));
    }
    Pathway p = compose_pathway(events);
    PathwayImage im = render_image(p, build_vocabulary(events), dims, 64);
    std::size_t occupied_columns = 0;
    for (std::size_t c = 0; c < 64; ++c) {
      std::size_t in_col = 0;
      for (std::size_t r = 0; r < 6; ++r) in_col += im.grid.at(r, c) != 0;
      CHECK(in_col <= 1);
      occupied_columns += in_col;
    }
    CHECK(occupied_columns == m);
  }
}

TEST_CASE("extract_labels") {
  const DimensionConfig dims = DimensionConfig::defaults();
  std::vector<Event> events{ev("p", 0, "C1", "conditions", "ICD9"), ev("p", 1, "C2", "conditions", "ICD9"),
                            ev("p", 1, "O", "observations")};
  CodeVocabulary v = build_vocabulary(events);
  LabelSpace labels = LabelSpace::from_vocabulary(v, dims);
  CHECK(labels.num_classes() == 3);

  PathwayImage one{"p", Grid(6, 400)};
  one.grid.at(1, 0) = 1;
  one.grid.at(4, 5) = 3;
  LabeledInput a = extract_labels(one, dims, labels);
  CHECK(a.input.height == 5);
  CHECK(a.input.width == 400);
  CHECK(a.input.at(3, 5) == 3);
  CHECK(a.labels == std::vector<std::size_t>{1, LabelSpace::kEnd});

  PathwayImage both{"p", Grid(6, 400)};
  both.grid.at(1, 0) = 1;
  both.grid.at(1, 3) = 1;
  both.grid.at(1, 7) = 2;
  CHECK(extract_labels(both, dims, labels).labels == std::vector<std::size_t>{1, 2});
  CHECK(extract_labels(both, dims, labels, 3).labels == std::vector<std::size_t>{1, 2, LabelSpace::kEnd});

  PathwayImage none{"p", Grid(6, 400)};
  CHECK_THROWS_AS(extract_labels(none, dims, labels), UnlabeledPathwayError);
  PathwayImage wrong{"p", Grid(6, 400)};
  wrong.grid.at(1, 0) = 3;
  CHECK_THROWS_AS(extract_labels(wrong, dims, labels), VocabularyError);
}
