#include <gtest/gtest.h>

#include "redloop/csv.h"
#include "redloop/datastore.h"
#include "redloop/error.h"
#include "support.h"

using namespace redloop;

TEST(Jsonl, ExactBytes) {
  Dataset d{"d", {{"a", "hello \"world\"", 1}, {"b", "two\nlines", 0}}, {}};
  EXPECT_EQ(dataset_to_jsonl(d),
            "{\"prompt\": \"hello \\\"world\\\"\\n\\n###\\n\\n\", \"completion\": \" 1\"}\n"
            "{\"prompt\": \"two\\nlines\\n\\n###\\n\\n\", \"completion\": \" 0\"}\n");
}

TEST(Jsonl, ParsesAndNamesLines) {
  const std::string ok =
      "{\"prompt\": \"x\\n\\n###\\n\\n\", \"completion\": \" 1\"}\n"
      "{\"prompt\": \"y\\n\\n###\\n\\n\", \"completion\": \" 0\"}\n";
  const Dataset d = dataset_from_jsonl(ok, "ds", {DatasetTag::SeedTrain});
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.examples[0].prompt_id, "ds-1");
  EXPECT_EQ(d.examples[1].text, "y");
  EXPECT_EQ(d.examples[1].label, 0);

  auto line_of = [](const std::string& content) -> std::size_t {
    try {
      dataset_from_jsonl(content, "x");
    } catch (const FormatError& e) {
      return e.line();
    }
    return 0;
  };
  const std::string good = "{\"prompt\": \"x\\n\\n###\\n\\n\", \"completion\": \" 1\"}\n";
  EXPECT_EQ(line_of(good + "{\"prompt\": \"x\\n\\n###\\n\\n\", \"completion\": \"1\"}\n"), 2u);
  EXPECT_EQ(line_of(good + good + "{\"prompt\": \"no separator\", \"completion\": \" 1\"}\n"), 3u);
  EXPECT_EQ(line_of("{\"prompt\": \"x\\n\\n###\\n\\n\", \"completion\": \" 1\", \"extra\": 1}\n"), 1u);
  EXPECT_EQ(line_of("not json\n"), 1u);
  EXPECT_EQ(line_of("{\"prompt\": \"x\\n\\n###\\n\\n\\n\\n###\\n\\n\", \"completion\": \" 1\"}\n"), 1u);
}

TEST(Jsonl, FileRoundTrip) {
  redloop::testing::TempDir dir("jsonl");
  Dataset d{"f", {{"f-1", "alpha", 1}, {"f-2", "beta, gamma", 0}}, {}};
  save_dataset_jsonl(d, dir / "f.jsonl");
  const Dataset back = load_dataset_jsonl(dir / "f.jsonl", "f");
  EXPECT_EQ(dataset_to_jsonl(back), dataset_to_jsonl(d));
}

TEST(Csv, Rfc4180) {
  const auto recs = csv::parse("a,b,c\r\n\"x, y\",\"he said \"\"no\"\"\",\"multi\nline\"\n1,,3");
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[1].fields, (std::vector<std::string>{"x, y", "he said \"no\"", "multi\nline"}));
  EXPECT_EQ(recs[1].line, 2u);
  EXPECT_EQ(recs[2].line, 4u);
  EXPECT_EQ(recs[2].fields, (std::vector<std::string>{"1", "", "3"}));
}

TEST(Csv, UnterminatedQuoteNamesOpeningLine) {
  try {
    csv::parse("a,b\n1,2\n3,\"open\nstill open\n");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(Csv, IngestRejectsAndSchema) {
  const std::string content = "comment_text,toxic\nfine,0\n,1\nbad,x\nworse,1\n";
  const auto r = csv::ingest_toxic(content, "comment_text", "toxic", "ext");
  EXPECT_EQ(r.rows_read, 4u);
  EXPECT_EQ(r.dataset.size(), 2u);
  ASSERT_EQ(r.rejects.size(), 2u);
  EXPECT_EQ(r.rejects[0].row, 2u);
  EXPECT_EQ(r.rejects[1].line, 4u);
  EXPECT_TRUE(r.dataset.has_tag(DatasetTag::ExternalTransfer));
  EXPECT_THROW(csv::ingest_toxic(content, "text", "toxic", "ext"), SchemaError);
}
