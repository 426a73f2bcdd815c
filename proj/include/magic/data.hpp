#pragma once

#include <cstdint>
#include <istream>
#include <string>
#include <unordered_map>
#include <vector>

#include "magic/batch.hpp"
#include "magic/rng.hpp"
#include "magic/tensor.hpp"

namespace magic {

enum class Kind { blind, visual };
enum class Split { train, val, test };

struct AnnotationRecord {
  std::string id;
  std::vector<std::string> objects;
  std::uint32_t target = 0;
  std::string text;
  Kind kind = Kind::blind;
  Split split = Split::train;
};

// JSONL, one record per line with fields {id, objects, target, text, kind,
// split}. Each malformed-field class throws with its own message prefix so
// callers can tell them apart.
std::vector<AnnotationRecord> parse_annotations(std::istream& in);
std::vector<AnnotationRecord> load_annotations(const std::string& path);

// Binary feature store, id -> rows x dim float matrix ("MVGF" format).
struct FeatureStore {
  std::uint32_t dim = 0;
  std::vector<std::string> order;  // write order, preserved across round-trips
  std::unordered_map<std::string, Tensor<float>> records;

  void add(const std::string& id, Tensor<float> rows);
  const Tensor<float>& get(const std::string& id) const;
};

void write_feature_store(const std::string& path, const FeatureStore& store);
// expected_dim != 0 enforces the dimension on load
FeatureStore read_feature_store(const std::string& path, std::uint32_t expected_dim = 0);

struct MaskSample {
  std::vector<std::uint8_t> view_keep;  // objects x views, flat
  std::vector<std::uint8_t> lang_keep;  // tokens
};

// Independent drops at p_view / p_lang; a group that ends up empty gets one
// uniformly chosen member restored.
MaskSample sample_masks(Rng& rng, std::size_t objects, std::size_t views, std::size_t tokens,
                        double p_view, double p_lang);

// Evenly spaced canonical view indices round(i*n/j), deduplicated ascending.
std::vector<std::uint32_t> subsample_views(std::size_t n, std::size_t j);

// Pads rec.objects to m with distinct ids drawn from pool (which must not
// intersect the record), then shuffles object order and re-indexes the target.
AnnotationRecord extend_distractors(const AnnotationRecord& rec,
                                    const std::vector<std::string>& pool, std::size_t m,
                                    Rng& rng);

struct SynthConfig {
  std::size_t attributes = 4;
  std::size_t dim = 64;
  std::size_t views = 8;
  double noise_std = 0.02;
  std::size_t count_train = 2000;
  std::size_t count_val = 500;
  std::uint64_t seed = 0;
};

// Relational reference games over attribute vectors: two objects with
// attributes in U[0,1]^A; the referring expression compares attribute c1 of
// the target with a different attribute c2 of the other object ("closer to" /
// "farther from"); exactly one object satisfies it. Views are a fixed random
// projection of the occluded attribute vector plus noise; view v only exposes
// attributes {v mod A, (v+1) mod A}. Writes annotations.jsonl, objects.mvgf,
// language.mvgf, meta.json into out_dir.
void generate_synthetic(const SynthConfig& cfg, const std::string& out_dir);

// Monte-Carlo accuracy of the Bayes-optimal scorer that sees one object's
// attributes and the predicate but not the other object. The reference line
// for the object-context ablation.
double bayes_single_object_ceiling(std::size_t trials, std::uint64_t seed);

struct Dataset {
  std::vector<AnnotationRecord> annotations;
  FeatureStore objects;
  FeatureStore language;

  std::vector<const AnnotationRecord*> split(Split s) const;
};

Dataset load_dataset(const std::string& dir);

// Pads instances into one rectangular batch. All records must have the same
// object count; views are subsampled to views_per_object; language is
// truncated at max_tokens. masks, when given, must hold one MaskSample per
// instance shaped (objects x views_per_object, min(lang rows, max_tokens)).
Batch<float> make_batch(const std::vector<const AnnotationRecord*>& instances,
                        const FeatureStore& objects, const FeatureStore& language,
                        std::size_t views_per_object, std::size_t max_tokens,
                        const std::vector<MaskSample>* masks = nullptr);

}  // namespace magic
