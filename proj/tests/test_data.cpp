#include <gtest/gtest.h>

#include "dspert/data.hpp"
#include "dspert/rng.hpp"
#include "oracles.hpp"

using namespace dspert;

namespace {

std::set<Entity> ents(std::initializer_list<Entity> list) { return std::set<Entity>(list); }

}  // namespace

TEST(Bio, ContiguousRunsBecomeSpans) {
  const auto s = parse_bio("John\tB-PER\nSmith\tI-PER\nruns\tO\n\nall\tO\nquiet\tO\n");
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].tokens, (std::vector<std::string>{"John", "Smith", "runs"}));
  EXPECT_EQ(s[0].gold, ents({{0, 2, "PER"}}));
  EXPECT_TRUE(s[1].gold.empty());
}

TEST(Bio, AdjacentEntitiesAndTypeSwitches) {
  const auto s = parse_bio("a\tB-PER\nb\tB-PER\nc\tI-ORG\nd\tI-ORG\ne\tO\r\n");
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].gold, ents({{0, 1, "PER"}, {1, 2, "PER"}, {2, 4, "ORG"}}));
}

TEST(Bio, OrphanInsideIsRepairedOrRejected) {
  WarningSink warnings;
  const auto s = parse_bio("Smith\tI-PER\nruns\tO\n", {}, &warnings);
  EXPECT_EQ(s[0].gold, ents({{0, 1, "PER"}}));
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("orphan I-PER"), std::string::npos);
  EXPECT_THROW(parse_bio("Smith\tI-PER\n", BioOptions{true}), DataError);
}

TEST(Bio, MalformedLines) {
  EXPECT_THROW(parse_bio("token-without-tag\n"), DataError);
  EXPECT_THROW(parse_bio("x\tS-PER\n"), DataError);
  EXPECT_TRUE(parse_bio("-DOCSTART-\t-X-\n\n").empty());
}

TEST(Bio, RoundTrip) {
  const auto s = parse_bio("a\tB-PER\nb\tI-PER\nc\tO\nd\tB-LOC\n\ne\tO\n");
  EXPECT_EQ(parse_bio(serialize_bio(s)), s);
  Sentence nested{{"a", "b"}, {}};
  nested.add_entity({0, 2, "ORG"});
  nested.add_entity({0, 1, "PER"});
  EXPECT_THROW(serialize_bio({nested}), DataError);
}

TEST(JsonSpans, NestedPairsAccepted) {
  const auto s = parse_json_spans(
      R"({"tokens":["a","b","c"],"entities":[{"start":0,"end":3,"type":"ORG"},{"start":1,"end":2,"type":"PER"}]})"
      "\n\n"
      R"({"tokens":["x"],"entities":[]})"
      "\n");
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].gold, ents({{0, 3, "ORG"}, {1, 2, "PER"}}));
  EXPECT_TRUE(s[1].gold.empty());
  EXPECT_EQ(parse_json_spans(serialize_json_spans(s)), s);
}

TEST(JsonSpans, BadRecordsNameTheLine) {
  auto message = [](const std::string& text) {
    try {
      parse_json_spans(text);
    } catch (const DataError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  const std::string ok = R"({"tokens":["a"]})";
  EXPECT_NE(message(ok + "\n" + R"({"tokens":["a","b"],"entities":[{"start":2,"end":1,"type":"X"}]})")
                .find("line 2"),
            std::string::npos);
  EXPECT_NE(message(R"({"tokens":["a"],"entities":[{"start":0,"end":2,"type":"X"}]})").find("out of range"),
            std::string::npos);
  EXPECT_NE(message("{not json").find("line 1"), std::string::npos);
  EXPECT_NE(message(R"({"tokens":["a","b"],"entities":[{"start":0,"end":1,"type":"X"},{"start":0,"end":1,"type":"Y"}]})")
                .find("labelled both"),
            std::string::npos);
}

TEST(Vocab, ReservedEntriesAndUnknowns) {
  Sentence a{{"the", "cat"}, {}};
  a.add_entity({1, 2, "ANIMAL"});
  Sentence b{{"a", "dog"}, {}};
  b.add_entity({1, 2, "ANIMAL"});
  b.add_entity({0, 2, "NP"});
  const Vocab v = Vocab::build({a, b});
  EXPECT_EQ(v.token_count(), 6u);
  EXPECT_EQ(v.type_count(), 3u);
  EXPECT_EQ(v.type_name(kNonEntity), "O");
  EXPECT_EQ(v.token_id("zebra"), kUnkId);
  EXPECT_EQ(v.tokens()[kPadId], "<pad>");
  EXPECT_FALSE(v.type_index("LOC").has_value());
  std::set<std::size_t> ids;
  for (const auto& t : v.tokens()) ids.insert(v.token_id(t));
  EXPECT_EQ(ids.size(), v.token_count());
  const Vocab back = Vocab::from_json(v.to_json());
  EXPECT_EQ(back.tokens(), v.tokens());
  EXPECT_EQ(back.types(), v.types());
  EXPECT_THROW(Vocab::from_json({{"tokens", {"x"}}, {"types", {"O"}}}), DataError);
}

TEST(Nestedness, DefinitionExamples) {
  const auto gold = ents({{1, 3, "A"}, {0, 5, "B"}});
  EXPECT_EQ(nestedness_tag(2, 4, gold), NestednessTag::Nested);
  EXPECT_EQ(nestedness_tag(0, 4, gold), NestednessTag::Covering);
  EXPECT_EQ(nestedness_tag(6, 8, gold), NestednessTag::Flat);
  EXPECT_EQ(nestedness_tag(1, 3, gold), NestednessTag::Nested);
  EXPECT_EQ(nestedness_tag(0, 5, gold), NestednessTag::Covering);
  const auto three = ents({{2, 3, "A"}, {1, 4, "B"}, {0, 6, "C"}});
  EXPECT_EQ(nestedness_tag(1, 4, three), NestednessTag::Both);
  EXPECT_EQ(nestedness_tag(0, 4, three, Containment::Proper), NestednessTag::Both);
  EXPECT_EQ(nestedness_tag(0, 4, gold, Containment::Proper), NestednessTag::Both);
}

TEST(Nestedness, AgreesWithBruteForce) {
  Rng rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t t = 2 + rng.below(9);
    std::set<Entity> gold;
    const std::size_t n = rng.below(5);
    for (std::size_t g = 0; g < n; ++g) {
      const std::size_t s = rng.below(t);
      const std::size_t e = s + 1 + rng.below(t - s);
      gold.insert({s, e, "T" + std::to_string(rng.below(2))});
    }
    const std::size_t s = rng.below(t);
    const std::size_t e = s + 1 + rng.below(t - s);
    ASSERT_EQ(nestedness_tag(s, e, gold), oracle::nestedness(s, e, gold)) << "trial " << trial;
  }
}

TEST(Nestedness, FlatCorpusHasOnlyFlatTags) {
  const auto corpus = parse_bio("a\tB-PER\nb\tI-PER\nc\tB-LOC\nd\tO\ne\tB-ORG\n");
  for (const auto& s : corpus)
    for (std::size_t i = 0; i < s.tokens.size(); ++i)
      for (std::size_t j = i + 1; j <= s.tokens.size(); ++j)
        EXPECT_EQ(nestedness_tag(i, j, s.gold), NestednessTag::Flat);
}

TEST(Synthetic, DeterministicPerSeed) {
  SynthConfig c;
  c.n_sentences = 40;
  EXPECT_EQ(gen_synthetic(c), gen_synthetic(c));
  SynthConfig d = c;
  d.seed = 8;
  EXPECT_NE(gen_synthetic(c), gen_synthetic(d));
}

TEST(Synthetic, NestRateControlsStructure) {
  SynthConfig c;
  c.n_sentences = 100;
  c.nest_rate = 0.0;
  for (const auto& s : gen_synthetic(c))
    for (const auto& e : s.gold) EXPECT_EQ(nestedness_tag(e.start, e.end, s.gold), NestednessTag::Flat);

  c.nest_rate = 1.0;
  for (const auto& s : gen_synthetic(c)) {
    bool nested = false;
    for (const auto& a : s.gold)
      for (const auto& b : s.gold) nested = nested || properly_contains(a.start, a.end, b.start, b.end);
    EXPECT_TRUE(nested);
  }
}

TEST(Synthetic, LabelsArePureAndWithinBounds) {
  SynthConfig c;
  c.n_sentences = 200;
  c.num_types = 4;
  for (const auto& s : gen_synthetic(c)) {
    EXPECT_LE(s.tokens.size(), c.max_len);
    EXPECT_EQ(s.gold, synth::label(s.tokens, c.num_types));
    for (const auto& e : s.gold) EXPECT_LE(e.width(), 6u);
  }
  c.nest_rate = 1.5;
  EXPECT_THROW(gen_synthetic(c), ConfigError);
}
