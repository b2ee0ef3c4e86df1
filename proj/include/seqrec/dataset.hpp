#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace seqrec {

// One user-item interaction as read from disk. Ratings are carried through
// for reporting but never used by training.
struct Interaction {
  std::string user_id;
  std::string item_id;
  int64_t timestamp = 0;
  std::optional<double> rating;
};

enum class FileFormat { Ml1m, Tsv };

FileFormat parse_file_format(const std::string& name);
std::string to_string(FileFormat f);

struct LoadReport {
  std::vector<Interaction> interactions;
  int64_t malformed = 0;
  std::vector<int64_t> malformed_lines;  // first few offending line numbers
};

// Reads a newline-delimited interaction log. Unreadable files throw; more
// than 1% malformed rows throws listing the offending line numbers; fewer
// are skipped and counted in the report.
LoadReport load_interactions(const std::string& path, FileFormat format);

// Item index 0 is reserved for padding; real items occupy [1, num_items].
constexpr int64_t kPaddingIndex = 0;

struct SequenceDataset {
  std::vector<std::string> user_ids;              // per surviving user
  std::vector<std::vector<int64_t>> sequences;    // dense item indices, time order
  std::vector<std::string> index_to_item;         // [0] is the padding slot
  std::map<std::string, int64_t> item_to_index;
  int64_t max_len = 50;

  int64_t num_users() const { return static_cast<int64_t>(sequences.size()); }
  int64_t num_items() const { return static_cast<int64_t>(index_to_item.size()) - 1; }
  int64_t vocab_size() const { return static_cast<int64_t>(index_to_item.size()); }

  // FNV-1a over the item vocabulary in index order; stored in checkpoints so
  // a reloaded model can refuse mismatched data.
  uint64_t vocab_hash() const;
};

// Builds per-user chronological sequences with a dense item vocabulary.
// Users with fewer than min_seq_len interactions are dropped, as are items
// that appear fewer than min_item_count times (counted before user
// filtering). Ordering is (timestamp, input file order).
SequenceDataset build_dataset(const std::vector<Interaction>& interactions,
                              int64_t min_seq_len = 3, int64_t max_len = 50,
                              int64_t min_item_count = 1);

// Leave-one-out view: last item is the test target, the one before it the
// validation target, everything earlier the training prefix.
struct SplitView {
  const SequenceDataset* dataset = nullptr;
  std::vector<std::vector<int64_t>> train_prefix;
  std::vector<int64_t> valid_target;
  std::vector<int64_t> test_target;

  int64_t num_users() const { return static_cast<int64_t>(train_prefix.size()); }
};

SplitView split(const SequenceDataset& dataset);

struct Batch {
  std::vector<int64_t> items;    // row-major B x max_len, right-aligned
  std::vector<int64_t> lengths;  // true (non-padding) length per row
  std::vector<int64_t> targets;  // next-item index per row
  std::vector<int64_t> users;    // dataset user index per row
  int64_t max_len = 0;

  int64_t size() const { return static_cast<int64_t>(lengths.size()); }
  int64_t item_at(int64_t row, int64_t col) const { return items[row * max_len + col]; }
};

// Training rows pair the prefix-minus-last with the last prefix item as the
// target, so the validation and test items never leak into training. Users
// whose prefix has a single item carry no training signal and yield no row.
// Row order is shuffled deterministically by shuffle_seed; a trailing
// partial batch is emitted so every trainable user appears exactly once.
std::vector<Batch> make_batches(const SplitView& view, int64_t batch_size,
                                uint64_t shuffle_seed);

// Number of users that contribute training rows (prefix length >= 2).
int64_t num_trainable_users(const SplitView& view);

// Right-aligned evaluation row for one user: the full training prefix for
// validation scoring, or prefix plus the validation item for test scoring.
enum class EvalTarget { Validation, Test };
Batch eval_row(const SplitView& view, int64_t user, EvalTarget which);

enum class CandidateSetting { Whole, Random, Popular };

CandidateSetting parse_candidate_setting(const std::string& name);
std::string to_string(CandidateSetting s);

// Per-item frequency over all training prefixes, used by the popular
// candidate setting.
std::vector<int64_t> train_item_frequencies(const SplitView& view);

// Candidate item pool for ranking one user's ground-truth target.
//   whole   — every item minus the user's training-prefix items, with the
//             ground truth always present exactly once
//   random  — ground truth plus size-1 seeded samples the user never
//             interacted with
//   popular — ground truth plus the size-1 most frequent training items
//             outside the user's prefix
std::vector<int64_t> candidate_set(const SplitView& view, int64_t user, int64_t ground_truth,
                                   CandidateSetting setting, int64_t size, uint64_t rng_seed,
                                   const std::vector<int64_t>& popularity = {});

}  // namespace seqrec
