#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "support.hpp"

namespace conpet {
namespace {

std::string record(const std::string& id, const std::string& text, std::size_t b, std::size_t e,
                   const std::string& label) {
  return R"({"id":")" + id + R"(","text":")" + text + R"(","head_span":[)" + std::to_string(b) + "," +
         std::to_string(e) + R"(],"label":")" + label + "\"}";
}

TEST(LoadCorpus, ThreeRecordsInFileOrder) {
  std::istringstream in(record("b", "Paris is big", 0, 1, "city") + "\n" +
                        record("a", "Bob runs", 0, 1, "person") + "\n" +
                        record("c", "the Nile flows", 1, 2, "river") + "\n");
  const auto examples = load_corpus(in);
  ASSERT_EQ(examples.size(), 3u);
  EXPECT_EQ(examples[0].id, "b");
  EXPECT_EQ(examples[1].id, "a");
  EXPECT_EQ(examples[2].id, "c");
  EXPECT_EQ(examples[2].tokens, (std::vector<std::string>{"the", "Nile", "flows"}));
  EXPECT_EQ(examples[2].head_span, (TokenSpan{1, 2}));
  EXPECT_FALSE(examples[0].tail_span.has_value());
}

TEST(LoadCorpus, MissingLabelNamesTheLine) {
  std::istringstream in(record("a", "x y", 0, 1, "t") + "\n" +
                        R"({"id":"b","text":"x y","head_span":[0,1]})" + "\n");
  try {
    load_corpus(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("label"), std::string::npos);
  }
}

TEST(LoadCorpus, SpanOutsideTextIsAParseError) {
  std::istringstream in(record("a", "x y", 1, 3, "t") + "\n");
  EXPECT_THROW(load_corpus(in), ParseError);
}

TEST(LoadCorpus, DuplicateIdIsAValidationError) {
  std::istringstream in(record("a", "x y", 0, 1, "t") + "\n" + record("a", "z w", 0, 1, "t") + "\n");
  EXPECT_THROW(load_corpus(in), ValidationError);
}

TEST(LoadCorpus, UnknownFormatRejected) {
  std::istringstream in("");
  EXPECT_THROW(load_corpus(in, "csv"), InvalidArgument);
}

TEST(LoadCorpus, WriteThenLoadRoundTrips) {
  SyntheticSpec spec;
  spec.num_tasks = 2;
  spec.examples_per_type = 4;
  spec.kind = TaskKind::relation_extraction;
  const auto bench = make_synthetic(spec);
  std::stringstream buf;
  write_corpus(buf, bench.examples);
  EXPECT_EQ(load_corpus(buf), bench.examples);
}

// Large corpus: 486,044 records over 66 entity types.
TEST(LoadCorpus, LargeCorpusScale) {
  constexpr std::size_t kRecords = 486044;
  constexpr std::size_t kLabels = 66;
  std::string text;
  text.reserve(kRecords * 80);
  for (std::size_t i = 0; i < kRecords; ++i) {
    text += record("r" + std::to_string(i), "w" + std::to_string(i % 97) + " is here", 0, 1,
                   "type" + std::to_string(i % kLabels));
    text += '\n';
  }
  std::istringstream in(std::move(text));
  const auto examples = load_corpus(in);
  EXPECT_EQ(examples.size(), kRecords);
  EXPECT_EQ(label_set(examples).size(), kLabels);
}

std::vector<std::string> numbered_labels(std::size_t n) {
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < n; ++i) labels.push_back("L" + std::to_string(i));
  return labels;
}

void expect_partition(const std::vector<SchemaCluster>& clusters, const std::vector<std::string>& labels) {
  std::set<std::string> seen;
  std::size_t total = 0;
  for (const auto& c : clusters) {
    total += c.types.size();
    seen.insert(c.types.begin(), c.types.end());
  }
  EXPECT_EQ(total, labels.size()) << "clusters overlap";
  EXPECT_EQ(seen, std::set<std::string>(labels.begin(), labels.end()));
}

TEST(SplitTasks, SixtySixLabelsIntoTenClusters) {
  const auto labels = numbered_labels(66);
  const auto clusters = split_tasks(labels, 10, 42);
  ASSERT_EQ(clusters.size(), 10u);
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    EXPECT_EQ(clusters[i].index, i + 1);
    EXPECT_TRUE(clusters[i].types.size() == 6 || clusters[i].types.size() == 7);
  }
  expect_partition(clusters, labels);
}

TEST(SplitTasks, EighteenLabelsIntoFiveClusters) {
  const auto labels = numbered_labels(18);
  const auto clusters = split_tasks(labels, 5, 1);
  ASSERT_EQ(clusters.size(), 5u);
  expect_partition(clusters, labels);
}

TEST(SplitTasks, FourLabelsFourClustersAreSingletons) {
  for (std::uint64_t seed : {0ULL, 1ULL, 99ULL, 123456789ULL}) {
    const auto clusters = split_tasks(numbered_labels(4), 4, seed);
    for (const auto& c : clusters) EXPECT_EQ(c.types.size(), 1u);
    expect_partition(clusters, numbered_labels(4));
  }
}

TEST(SplitTasks, DeterministicGivenSeedAndOrderInsensitive) {
  auto labels = numbered_labels(30);
  const auto a = split_tasks(labels, 7, 5);
  std::reverse(labels.begin(), labels.end());
  EXPECT_EQ(split_tasks(labels, 7, 5), a);
  EXPECT_NE(split_tasks(labels, 7, 6), a);
}

TEST(SplitTasks, TooManyClustersRejected) {
  EXPECT_THROW(split_tasks(numbered_labels(3), 4, 0), InvalidArgument);
  EXPECT_THROW(split_tasks(numbered_labels(3), 0, 0), InvalidArgument);
}

std::vector<Example> plain_examples(std::size_t n) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    e.id = "e" + std::to_string(i);
    e.tokens = {"tok" + std::to_string(i)};
    e.head_span = {0, 1};
    e.label = "L";
    out.push_back(e);
  }
  return out;
}

TEST(SplitExamples, HundredExamplesEightOneOne) {
  const auto parts = split_examples(plain_examples(100), {}, 3);
  EXPECT_EQ(parts.train.size(), 80u);
  EXPECT_EQ(parts.valid.size(), 10u);
  EXPECT_EQ(parts.test.size(), 10u);
}

TEST(SplitExamples, SingleExampleLandsInTrain) {
  const auto parts = split_examples(plain_examples(1), {}, 3);
  EXPECT_EQ(parts.train.size(), 1u);
  EXPECT_TRUE(parts.valid.empty());
  EXPECT_TRUE(parts.test.empty());
}

TEST(SplitExamples, ProportionsWithinOneExample) {
  for (std::size_t n : {2u, 3u, 7u, 11u, 19u, 55u, 101u}) {
    const auto sizes = partition_sizes(n, {});
    EXPECT_EQ(sizes[0] + sizes[1] + sizes[2], n);
    EXPECT_LE(std::abs(static_cast<double>(sizes[0]) - 0.8 * n), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(sizes[1]) - 0.1 * n), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(sizes[2]) - 0.1 * n), 1.0);
  }
}

std::uint64_t partition_hash(const ExamplePartition& p) {
  std::uint64_t h = kFnvOffset;
  for (const auto* part : {&p.train, &p.valid, &p.test}) {
    for (const Example& e : *part) h = fnv1a64(e.id + "|", h);
    h = fnv1a64("#", h);
  }
  return h;
}

TEST(SplitExamples, TwoSeedsGiveDifferentValidPartitions) {
  const auto examples = plain_examples(10000);
  const auto a = split_examples(examples, {}, 1);
  const auto b = split_examples(examples, {}, 2);
  const auto a2 = split_examples(examples, {}, 1);
  EXPECT_NE(partition_hash(a), partition_hash(b));
  EXPECT_EQ(partition_hash(a), partition_hash(a2));
  for (const auto* p : {&a, &b}) {
    EXPECT_EQ(p->train.size(), 8000u);
    EXPECT_EQ(p->valid.size(), 1000u);
    EXPECT_EQ(p->test.size(), 1000u);
    std::set<std::string> ids;
    for (const auto* part : {&p->train, &p->valid, &p->test}) {
      for (const Example& e : *part) ids.insert(e.id);
    }
    EXPECT_EQ(ids.size(), 10000u);
  }
}

TEST(SplitExamples, EmptyOrBadRatiosRejected) {
  EXPECT_THROW(split_examples({}, {}, 0), InvalidArgument);
  EXPECT_THROW(split_examples(plain_examples(3), {0.5, 0.5, 0.0}, 0), InvalidArgument);
  EXPECT_THROW(split_examples(plain_examples(3), {0.5, 0.4, 0.2}, 0), InvalidArgument);
}

TEST(TaskSequence, ClustersDisjointAndCoverLabels) {
  SyntheticSpec spec;
  spec.num_tasks = 6;
  spec.examples_per_type = 10;
  const auto bench = make_synthetic(spec);
  const auto labels = label_set(bench.examples);
  const auto seq = build_task_sequence(bench.examples, bench.clusters, {}, 9);
  for (std::size_t i = 0; i < seq.clusters.size(); ++i) {
    for (std::size_t j = i + 1; j < seq.clusters.size(); ++j) {
      for (const auto& t : seq.clusters[i].types) {
        EXPECT_EQ(std::count(seq.clusters[j].types.begin(), seq.clusters[j].types.end(), t), 0);
      }
    }
  }
  check_clusters(seq.clusters, labels);
  for (std::size_t k = 1; k <= seq.num_tasks(); ++k) {
    const auto& types = seq.clusters[k - 1].types;
    for (const auto* part : {&seq.train, &seq.valid, &seq.test}) {
      for (const Example& e : (*part)[k - 1]) {
        EXPECT_EQ(e.task_index, k);
        EXPECT_NE(std::find(types.begin(), types.end(), e.label), types.end());
      }
    }
  }
  const auto views = seq.cumulative_train(3);
  ASSERT_EQ(views.size(), 3u);
  EXPECT_EQ(views[2].data(), seq.train[2].data());
}

TEST(TaskSequence, OverlappingOrIncompleteClustersRejected) {
  const std::vector<std::string> labels{"a", "b", "c"};
  EXPECT_THROW(check_clusters(std::vector<SchemaCluster>{{1, {"a", "b"}}, {2, {"b", "c"}}}, labels),
               ValidationError);
  EXPECT_THROW(check_clusters(std::vector<SchemaCluster>{{1, {"a"}}, {2, {"b"}}}, labels), ValidationError);
}

TEST(SplitConfig, ExplicitMapping) {
  std::istringstream in(R"({"2": ["c"], "1": ["a", "b"]})");
  const auto clusters = load_split_config(in);
  ASSERT_EQ(clusters.size(), 2u);
  EXPECT_EQ(clusters[0], (SchemaCluster{1, {"a", "b"}}));
  EXPECT_EQ(clusters[1], (SchemaCluster{2, {"c"}}));
  std::istringstream gap(R"({"1": ["a"], "3": ["c"]})");
  EXPECT_THROW(load_split_config(gap), ParseError);
}

Example typing_example() {
  Example e;
  e.id = "x";
  e.tokens = {"Paris", "is", "big"};
  e.head_span = {0, 1};
  e.label = "city";
  return e;
}

TEST(Preprocess, EntityTypingTemplate) {
  const auto out = preprocess(typing_example(), TaskKind::entity_typing);
  EXPECT_EQ(out.text(), "[E1] Paris [/E1] is big In this sentence, Paris is a [MASK].");
}

TEST(Preprocess, RelationTemplate) {
  Example e;
  e.id = "r";
  e.tokens = {"A", "founded", "B"};
  e.head_span = {0, 1};
  e.tail_span = TokenSpan{2, 3};
  e.label = "founder";
  const auto out = preprocess(e, TaskKind::relation_extraction);
  EXPECT_EQ(out.text(), "[E1] A [/E1] founded [E2] B [/E2] In this sentence, B is the [MASK] of A.");
}

TEST(Preprocess, TailBeforeHead) {
  Example e;
  e.id = "r";
  e.tokens = {"B", "was", "founded", "by", "A"};
  e.head_span = {4, 5};
  e.tail_span = TokenSpan{0, 1};
  e.label = "founder";
  EXPECT_EQ(preprocess(e, TaskKind::relation_extraction).text(),
            "[E2] B [/E2] was founded by [E1] A [/E1] In this sentence, B is the [MASK] of A.");
}

TEST(Preprocess, SpanCoveringWholeText) {
  Example e = typing_example();
  e.head_span = {0, 3};
  EXPECT_EQ(preprocess(e, TaskKind::entity_typing).text(),
            "[E1] Paris is big [/E1] In this sentence, Paris is big is a [MASK].");
}

TEST(Preprocess, MarkersOnceEachAndTextRecoverable) {
  SyntheticSpec spec;
  spec.num_tasks = 2;
  spec.examples_per_type = 5;
  spec.kind = TaskKind::relation_extraction;
  for (const Example& e : make_synthetic(spec).examples) {
    const auto out = preprocess(e, TaskKind::relation_extraction);
    for (std::string_view m : {kHeadOpen, kHeadClose, kTailOpen, kTailClose}) {
      EXPECT_EQ(std::count(out.tokens.begin(), out.tokens.end(), std::string(m)), 1);
    }
    EXPECT_EQ(strip_markers(out), e.tokens);
  }
}

TEST(Preprocess, MissingTailForRelationRejected) {
  EXPECT_THROW(preprocess(typing_example(), TaskKind::relation_extraction), InvalidArgument);
}

TEST(ClipToWindow, KeepsSpansInsideWindow) {
  Example e;
  e.id = "long";
  for (int i = 0; i < 300; ++i) e.tokens.push_back("t" + std::to_string(i));
  e.head_span = {200, 202};
  e.label = "x";
  const auto clipped = clip_to_window(e, 128);
  ASSERT_EQ(clipped.tokens.size(), 128u);
  EXPECT_EQ(clipped.tokens[clipped.head_span.begin], "t200");
  EXPECT_EQ(clipped.tokens[clipped.head_span.end - 1], "t201");
  EXPECT_EQ(clip_to_window(e, 0), e);
  EXPECT_EQ(clip_to_window(e, 400), e);
}

}  // namespace
}  // namespace conpet
